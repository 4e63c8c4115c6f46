"""End-to-end driver: extraction, alignment, completion, artifacts, manifest."""

from __future__ import annotations

import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .alignment import AlignmentResult, align
from .completion import GraphCompletion, complete_graph
from .evaluation import ReportAnnotations
from .export import write_graph
from .extraction import ExtractionResult, extract_triplets
from .gateway import Gateway, UsageRecord
from .ioc import IocCatalog
from .model import CtiReport, KnowledgeGraph, Ontology, PipelineConfig, dumps_canonical
from .retriever import DemoIndex, Demonstration, build_index

log = logging.getLogger(__name__)

PHASES = ("extraction", "alignment", "completion")


class PipelineFailed(RuntimeError):
    def __init__(self, report_id: str, phase: str, cause: BaseException):
        super().__init__(f"report {report_id}: {phase} failed: {cause}")
        self.report_id = report_id
        self.phase = phase
        self.cause = cause


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


@dataclass
class DemoSet:
    extraction: DemoIndex | list[Demonstration]
    typing: DemoIndex | list[Demonstration]
    relation: DemoIndex | list[Demonstration]


def prepare_demos(corpus: Sequence[Demonstration], config: PipelineConfig, gateway: Gateway) -> DemoSet:
    """Split the corpus by task; tasks configured for kNN get an embedding index."""
    parts: dict[str, Any] = {}
    for task in ("extraction", "typing", "relation"):
        demos = [d for d in corpus if d.task == task]
        if config.demo_mode.get(task, "fixed") == "knn" and demos:
            parts[task] = build_index(demos, gateway, tag=f"index/{task}")
        else:
            parts[task] = demos
    return DemoSet(**parts)


@dataclass
class ReportRun:
    report: CtiReport
    extraction: ExtractionResult | None = None
    alignment: AlignmentResult | None = None
    completion: GraphCompletion | None = None
    usage: dict[str, UsageRecord] = field(default_factory=dict)
    failure: PipelineFailed | None = None

    @property
    def graph(self) -> KnowledgeGraph | None:
        if self.completion is not None:
            return self.completion.graph
        return self.alignment.graph if self.alignment is not None else None

    def prediction(self) -> ReportAnnotations:
        ann = ReportAnnotations(self.report.id)
        if self.extraction is not None:
            ann.triplets = [t.key() for t in self.extraction.triplets]
        if self.alignment is not None:
            ann.typed_triplets = list(self.alignment.typed)
            ann.clusters = [sorted(c.members) for c in self.alignment.clusters]
        if self.completion is not None:
            g = self.completion.graph
            ann.inferred_relations = [
                (g.nodes[e.source].canonical, e.relation, g.nodes[e.target].canonical) for e in self.completion.inferred
            ]
        ann.graph = self.graph
        return ann


def run_report(
    report: CtiReport,
    ontology: Ontology,
    demos: DemoSet,
    config: PipelineConfig,
    gateway: Gateway,
    *,
    catalog: IocCatalog | None = None,
    workers: int = 1,
) -> ReportRun:
    """Run all three phases. Failures are recorded on the result, not raised."""
    run = ReportRun(report)
    phase = "extraction"
    try:
        run.extraction = extract_triplets(report, ontology, demos.extraction, config, gateway)
        phase = "alignment"
        run.alignment = align(run.extraction.triplets, ontology, demos.typing, config, gateway, report.id, catalog)
        phase = "completion"
        run.completion = complete_graph(run.alignment.graph, report, demos.relation, config, gateway, workers)
    except Exception as exc:  # recorded with partial artifacts, re-raised by the caller
        log.error("report %s: %s failed: %s", report.id, phase, exc)
        run.failure = PipelineFailed(report.id, phase, exc)
    for p in PHASES:
        run.usage[p] = gateway.usage(f"{report.id}/{p}")
    return run


def write_report_artifacts(run: ReportRun, out_dir: Path, exports: Sequence[str] = ("json",)) -> list[str]:
    """Write per-report files under ``out_dir/<report id>/``; returns paths relative to ``out_dir``."""
    rdir = out_dir / run.report.id
    rdir.mkdir(parents=True, exist_ok=True)
    written: list[str] = []

    def put(name: str, text: str) -> None:
        write_atomic(rdir / name, text)
        written.append(f"{run.report.id}/{name}")

    if run.extraction is not None:
        put("extraction.json", dumps_canonical(run.extraction.to_dict()))
        put("raw_response.txt", run.extraction.raw_response)
    if run.alignment is not None:
        put("alignment.json", dumps_canonical(run.alignment.to_dict()))
        put("graph_aligned.json", run.alignment.graph.to_json())
    if run.completion is not None:
        put("completion.json", dumps_canonical(run.completion.metadata()))
    g = run.graph
    if g is not None:
        put("graph.json", g.to_json())
        for fmt in exports:
            if fmt != "json":
                write_graph(g, rdir / f"graph.{fmt}", fmt)
                written.append(f"{run.report.id}/graph.{fmt}")
    put("prediction.json", dumps_canonical(run.prediction().to_dict()))
    if run.failure is not None:
        put("failure.txt", f"{run.failure}\n")
    return written


def build_manifest(
    runs: Sequence[ReportRun],
    config: PipelineConfig,
    ontology: Ontology,
    gateway: Gateway,
    outputs: dict[str, list[str]],
    fixture_mode: str,
) -> dict[str, Any]:
    phases = {p: UsageRecord() for p in PHASES}
    per_report = {}
    for run in runs:
        per_report[run.report.id] = {p: u.to_dict() for p, u in run.usage.items()}
        for p, u in run.usage.items():
            phases[p] = phases[p] + u
    index_usage = gateway.usage("index/")
    return {
        "config": config.to_dict(),
        "ontology": ontology.name,
        "reports": [r.report.id for r in runs],
        "status": {r.report.id: ("ok" if r.failure is None else f"failed in {r.failure.phase}: {r.failure.cause}") for r in runs},
        "backend": {"mode": gateway.mode, "chat_model": gateway.chat_model, "embedding_model": gateway.embedding_model},
        "fixture_mode": fixture_mode,
        "replay": gateway.mode == "replay",
        "usage": {
            "per_report": per_report,
            "phases": {p: u.to_dict() for p, u in phases.items()},
            "demo_index": index_usage.to_dict(),
            "total": gateway.usage().to_dict(),
            "calls": len(gateway.calls),
            "completions": gateway.completion_count(),
        },
        "outputs": outputs,
    }


def run_pipeline(
    reports: Sequence[CtiReport],
    ontology: Ontology,
    corpus: Sequence[Demonstration],
    config: PipelineConfig,
    gateway: Gateway,
    out_dir: str | Path,
    *,
    exports: Sequence[str] = ("json",),
    fixture_mode: str = "live",
    workers: int = 1,
    catalog: IocCatalog | None = None,
) -> tuple[list[ReportRun], dict[str, Any]]:
    """Process reports in order, stopping at the first failed report.

    Reports are sequential so that per-report usage attribution (shared
    embedding cache hits) is deterministic; ``workers`` parallelizes the
    relation-prediction calls within a report.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    demos = prepare_demos(corpus, config, gateway)
    runs: list[ReportRun] = []
    outputs: dict[str, list[str]] = {}
    for report in reports:
        run = run_report(report, ontology, demos, config, gateway, catalog=catalog, workers=workers)
        runs.append(run)
        outputs[report.id] = write_report_artifacts(run, out_dir, exports)
        if run.failure is not None:
            break
    manifest = build_manifest(runs, config, ontology, gateway, outputs, fixture_mode)
    write_atomic(out_dir / "manifest.json", dumps_canonical(manifest))
    return runs, manifest
