"""Phase 1: one-shot triplet extraction from a report."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence, TypeVar

from .gateway import CompletionRequest, Gateway, UsageRecord, aggregate_usage
from .model import CtiReport, ModelError, Ontology, PipelineConfig, RawTriplet, normalize_space
from .parsing import ParseError, find_array
from .prompts import build_extraction_prompt
from .retriever import DemoIndex, Demonstration, fixed_demos, retrieve

log = logging.getLogger(__name__)

REPAIR_ATTEMPTS = 2
T = TypeVar("T")


class ExtractionFailed(RuntimeError):
    def __init__(self, report_id: str, raw_response: str, diagnostic: str):
        super().__init__(f"report {report_id}: response could not be parsed: {diagnostic}")
        self.report_id = report_id
        self.raw_response = raw_response
        self.diagnostic = diagnostic


@dataclass
class ExtractionResult:
    report_id: str
    triplets: list[RawTriplet]
    usage: UsageRecord
    raw_response: str
    prompt: str = ""
    demo_ids: list[str] = field(default_factory=list)
    calls: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "report_id": self.report_id,
            "triplets": [t.to_dict() for t in self.triplets],
            "usage": self.usage.to_dict(),
            "raw_response": self.raw_response,
            "demo_ids": list(self.demo_ids),
            "calls": self.calls,
        }


def parse_triplet_response(text: str) -> list[RawTriplet]:
    """Triplets from a bare array, a fenced block, or an object wrapping one array.

    Strings are whitespace-normalized and exact duplicates dropped.
    """
    entries = find_array(text)
    out: list[RawTriplet] = []
    seen: set[tuple[str, str, str]] = set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ParseError(f"entry {i} is not an object")
        for name in ("subject", "relation", "object"):
            value = entry.get(name)
            if not isinstance(value, str) or not normalize_space(value):
                raise ParseError(f"entry {i} is missing field {name!r}")
        try:
            t = RawTriplet.of(entry["subject"], entry["relation"], entry["object"])
        except ModelError as exc:
            raise ParseError(f"entry {i}: {exc}") from exc
        if t.key() not in seen:
            seen.add(t.key())
            out.append(t)
    return out


def repair_suffix(attempt: int, diagnostic: str) -> str:
    return (
        f"\n\nFormat correction {attempt}: the previous answer was rejected ({diagnostic}). "
        "Reply again with only the JSON structure requested above."
    )


def complete_parsed(
    gateway: Gateway,
    prompt: str,
    parse: Callable[[str], T],
    config: PipelineConfig,
    tag: str,
    repairs: int = REPAIR_ATTEMPTS,
) -> tuple[T, str, list[UsageRecord]]:
    """Ask, parse, and re-ask with a format reminder up to ``repairs`` times.

    Returns (parsed value, raw text of the accepted answer, usage per call).
    Raises :class:`ParseError` carrying the last raw text when every attempt fails.
    """
    usages: list[UsageRecord] = []
    current = prompt
    for attempt in range(repairs + 1):
        result = gateway.complete(CompletionRequest(current, config.decoding), tag=tag)
        usages.append(result.usage)
        try:
            return parse(result.text), result.text, usages
        except ParseError as exc:
            log.warning("%s: unparseable response (attempt %d): %s", tag, attempt + 1, exc.diagnostic)
            last_text, last_diag = result.text, exc.diagnostic
            current = prompt + repair_suffix(attempt + 1, exc.diagnostic)
    err = ParseError(last_diag)
    err.raw_response = last_text  # type: ignore[attr-defined]
    err.usages = usages  # type: ignore[attr-defined]
    raise err


def select_demos(
    source: DemoIndex | Sequence[Demonstration],
    query_text: str,
    k: int,
    config: PipelineConfig,
    gateway: Gateway,
    tag: str = "",
) -> list[Demonstration]:
    """kNN retrieval when given an index, the curated first-``k`` list otherwise."""
    if k == 0:
        return []
    if isinstance(source, DemoIndex):
        ranked = retrieve(source, query_text, k, config.permutation, gateway=gateway, seed=config.seed, tag=tag)
        return [d for d, _ in ranked]
    return fixed_demos(source, k)


def extract_triplets(
    report: CtiReport,
    ontology: Ontology,
    index: DemoIndex | Sequence[Demonstration],
    config: PipelineConfig,
    gateway: Gateway,
) -> ExtractionResult:
    tag = f"{report.id}/extraction"
    demos = select_demos(index, report.text, config.k_extract, config, gateway, tag)
    parts = build_extraction_prompt(ontology, demos, report.text)
    prompt = parts.render()
    try:
        triplets, raw, usages = complete_parsed(gateway, prompt, parse_triplet_response, config, tag)
    except ParseError as exc:
        raise ExtractionFailed(report.id, getattr(exc, "raw_response", ""), exc.diagnostic) from exc
    return ExtractionResult(
        report_id=report.id,
        triplets=triplets,
        usage=aggregate_usage(usages),
        raw_response=raw,
        prompt=prompt,
        demo_ids=[d.id for d in demos],
        calls=len(usages),
    )
