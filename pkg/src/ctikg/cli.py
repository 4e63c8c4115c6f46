"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .evaluation import MATCH_MODES, EvaluationError, MatchPolicy, evaluate_corpus, format_table, load_annotations
from .export import FORMATS, write_graph
from .extraction import ExtractionFailed, extract_triplets
from .gateway import BackendConfig, FixtureStore, Gateway, GatewayError, UsageRecord, aggregate_usage
from .model import (
    PERMUTATIONS,
    KnowledgeGraph,
    ModelError,
    Ontology,
    PipelineConfig,
    builtin_ontology,
    dumps_canonical,
    load_reports,
)
from .pipeline import build_manifest, prepare_demos, run_pipeline, write_atomic
from .retriever import builtin_demonstrations, load_demonstrations

log = logging.getLogger("ctikg")


class UsageError(Exception):
    pass


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("report", help="report file (.json, .jsonl, .txt) or a directory of them")
    p.add_argument("--ontology", required=True, help="ontology JSON file, or 'malont' / 'stix' for a bundled one")
    p.add_argument("--demos", help="demonstration corpus (JSON lines); defaults to the bundled MALOnt set")
    p.add_argument("--config", help="JSON config file with optional 'pipeline' and 'backend' sections")
    p.add_argument("--k", type=int, help="number of extraction demonstrations")
    p.add_argument("--threshold", type=float, help="entity merging similarity threshold")
    p.add_argument("--permutation", choices=PERMUTATIONS)
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=("live", "record", "replay"), default="live")
    p.add_argument("--replay", choices=("strict", "fallback"), default="strict", help="behaviour on a replay miss")
    p.add_argument("--cache-dir", help="fixture directory for record/replay")
    p.add_argument("--out", default="runs", help="parent directory for run outputs")
    p.add_argument("--run-id", help="name of the run directory (default: timestamp + input hash)")
    p.add_argument("--overwrite", action="store_true", help="allow reusing an existing run directory")
    p.add_argument("--workers", type=int, default=1, help="concurrent relation-prediction calls")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctikg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="phase 1 only: extract triplets")
    _add_run_flags(p)

    p = sub.add_parser("pipeline", help="extraction, alignment and completion")
    _add_run_flags(p)
    p.add_argument("--export", action="append", choices=FORMATS, default=None, help="graph formats to write (repeatable)")

    p = sub.add_parser("eval", help="score predictions against gold annotations")
    p.add_argument("pred", help="prediction file or run directory")
    p.add_argument("gold", help="gold annotation file or directory")
    p.add_argument("--match", choices=MATCH_MODES, default="normalized_exact")
    p.add_argument("--strip-punctuation", action="store_true")
    p.add_argument("--config", help="config file (backend section used by --match judge)")
    p.add_argument("--backend", choices=("live", "record", "replay"), default="live")
    p.add_argument("--replay", choices=("strict", "fallback"), default="strict")
    p.add_argument("--cache-dir")
    p.add_argument("--output", help="write the JSON score report here")

    p = sub.add_parser("export", help="convert a graph JSON file to DOT or GraphML")
    p.add_argument("graph")
    p.add_argument("--export", choices=FORMATS, required=True)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("fixtures", help="inspect a record/replay fixture directory")
    p.add_argument("action", choices=("list", "verify", "usage"))
    p.add_argument("--cache-dir", required=True)
    return parser


# ---------------------------------------------------------------------------
# shared setup


def _read_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    data = json.loads(p.read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def resolve_config(args: argparse.Namespace, raw: dict[str, Any]) -> PipelineConfig:
    """Flags override the config file, which overrides built-in defaults."""
    section = dict(raw.get("pipeline", {k: v for k, v in raw.items() if k != "backend"}))
    if getattr(args, "k", None) is not None:
        section["k_extract"] = args.k
    if getattr(args, "threshold", None) is not None:
        section["merge_threshold"] = args.threshold
    if getattr(args, "permutation", None) is not None:
        section["permutation"] = args.permutation
    if getattr(args, "seed", None) is not None:
        section["seed"] = args.seed
    return PipelineConfig.from_dict(section)


def _ontology(arg: str) -> Ontology:
    p = Path(arg)
    if p.is_file():
        return Ontology.load(p)
    if arg in ("malont", "stix"):
        return builtin_ontology(arg)
    raise UsageError(f"ontology file not found: {arg}")


def make_gateway(args: argparse.Namespace, raw: dict[str, Any]) -> Gateway:
    backend = BackendConfig.from_dict(raw.get("backend", {}))
    if args.backend in ("record", "replay") and not args.cache_dir:
        raise UsageError(f"--backend {args.backend} needs --cache-dir")
    return Gateway.from_config(backend, args.backend, args.cache_dir, strict=args.replay == "strict")


def fixture_mode(args: argparse.Namespace) -> str:
    return f"replay-{args.replay}" if args.backend == "replay" else args.backend


def _run_dir(args: argparse.Namespace, config: PipelineConfig, report_ids: list[str]) -> Path:
    if args.run_id:
        run_id = args.run_id
    else:
        digest = hashlib.sha256(dumps_canonical({"config": config.to_dict(), "reports": report_ids}).encode()).hexdigest()[:8]
        run_id = time.strftime("%Y%m%d-%H%M%S", time.gmtime()) + "-" + digest
    path = Path(args.out) / run_id
    if path.exists() and not args.overwrite:
        raise RuntimeError(f"run directory {path} already exists (use --overwrite or a new --run-id)")
    return path


def _setup(args: argparse.Namespace):
    if not Path(args.report).exists():
        raise UsageError(f"report path not found: {args.report}")
    if args.demos and not Path(args.demos).is_file():
        raise UsageError(f"demonstration file not found: {args.demos}")
    ontology = _ontology(args.ontology)
    raw = _read_config(args.config)
    try:
        config = resolve_config(args, raw)
    except ModelError as exc:
        raise UsageError(str(exc)) from exc
    gateway = make_gateway(args, raw)
    reports = load_reports(args.report)
    corpus = load_demonstrations(args.demos) if args.demos else builtin_demonstrations()
    return ontology, config, gateway, reports, corpus


# ---------------------------------------------------------------------------
# commands


def cmd_extract(args: argparse.Namespace) -> int:
    ontology, config, gateway, reports, corpus = _setup(args)
    run_dir = _run_dir(args, config, [r.id for r in reports])
    run_dir.mkdir(parents=True, exist_ok=True)
    demos = prepare_demos([d for d in corpus if d.task == "extraction"], config, gateway)
    outputs: dict[str, list[str]] = {}
    status = 0
    for report in reports:
        try:
            result = extract_triplets(report, ontology, demos.extraction, config, gateway)
        except ExtractionFailed as exc:
            write_atomic(run_dir / report.id / "raw_response.txt", exc.raw_response)
            print(f"error: {exc}", file=sys.stderr)
            status = 1
            break
        write_atomic(run_dir / report.id / "extraction.json", dumps_canonical(result.to_dict()))
        write_atomic(run_dir / report.id / "raw_response.txt", result.raw_response)
        write_atomic(run_dir / report.id / "prompt.txt", result.prompt)
        outputs[report.id] = [f"{report.id}/extraction.json", f"{report.id}/raw_response.txt", f"{report.id}/prompt.txt"]
    manifest = build_manifest([], config, ontology, gateway, outputs, fixture_mode(args))
    manifest["reports"] = [r.id for r in reports]
    manifest["usage"]["phases"] = {"extraction": gateway.usage(kind="chat").to_dict()}
    write_atomic(run_dir / "manifest.json", dumps_canonical(manifest))
    print(run_dir)
    return status


def cmd_pipeline(args: argparse.Namespace) -> int:
    ontology, config, gateway, reports, corpus = _setup(args)
    run_dir = _run_dir(args, config, [r.id for r in reports])
    runs, manifest = run_pipeline(
        reports,
        ontology,
        corpus,
        config,
        gateway,
        run_dir,
        exports=args.export or ["json"],
        fixture_mode=fixture_mode(args),
        workers=args.workers,
    )
    print(run_dir)
    failed = [r for r in runs if r.failure is not None]
    for r in failed:
        print(f"error: {r.failure}", file=sys.stderr)
    return 1 if failed else 0


def _load_predictions(path: str):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"prediction path not found: {path}")
    if p.is_dir():
        files = sorted(p.rglob("prediction.json"))
        if files:
            out = {}
            for f in files:
                out.update(load_annotations(f))
            return out
    return load_annotations(p)


def cmd_eval(args: argparse.Namespace) -> int:
    if not Path(args.gold).exists():
        raise UsageError(f"gold path not found: {args.gold}")
    gateway = None
    if args.match == "judge":
        gateway = make_gateway(args, _read_config(args.config))
    policy = MatchPolicy(args.match, strip_punctuation=args.strip_punctuation, gateway=gateway)
    preds = _load_predictions(args.pred)
    golds = load_annotations(args.gold)
    scores = evaluate_corpus(preds, golds, policy)
    table = format_table(scores)
    sys.stdout.write(table)
    if args.output:
        out = Path(args.output)
        write_atomic(out, dumps_canonical(scores))
        write_atomic(out.with_suffix(".txt"), table)
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    if not Path(args.graph).is_file():
        raise UsageError(f"graph file not found: {args.graph}")
    write_graph(KnowledgeGraph.load(args.graph), args.output, args.export)
    return 0


def cmd_fixtures(args: argparse.Namespace) -> int:
    store = FixtureStore(args.cache_dir)
    if not store.directory.is_dir():
        raise UsageError(f"fixture directory not found: {args.cache_dir}")
    records = list(store.records())
    if args.action == "list":
        for rec in records:
            preview = rec["prompt"][:60].replace("\n", " ")
            print(f"{rec['request_hash']}  {rec.get('kind', 'chat'):<9}  {preview}")
        return 0
    if args.action == "usage":
        total = aggregate_usage(UsageRecord.from_dict(r["usage"]) for r in records)
        print(dumps_canonical({"fixtures": len(records), **total.to_dict()}), end="")
        return 0
    from .gateway import request_hash

    bad = 0
    for rec in records:
        expected = request_hash(rec.get("kind", "chat"), rec["prompt"], rec["params"])
        if expected != rec["request_hash"] or store.path_for(expected).name != f"{rec['request_hash']}.json":
            print(f"mismatch: {rec['request_hash']} (content hashes to {expected})")
            bad += 1
    print(f"{len(records) - bad}/{len(records)} fixtures verified")
    return 1 if bad else 0


COMMANDS = {
    "extract": cmd_extract,
    "pipeline": cmd_pipeline,
    "eval": cmd_eval,
    "export": cmd_export,
    "fixtures": cmd_fixtures,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))  # exits 2
    except (GatewayError, ModelError, EvaluationError, RuntimeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
