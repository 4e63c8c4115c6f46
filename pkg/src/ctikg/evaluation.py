"""Scoring for each phase and for end-to-end graphs.

Counts are integers and ratios are exact :class:`fractions.Fraction` values
until they are reported (rounded to four decimals).
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Any, Hashable, Iterable, Sequence

from .alignment import group_by_type, merge_group
from .gateway import CompletionRequest, Gateway
from .ioc import IocCatalog
from .model import KnowledgeGraph, Ontology, TypedTriplet, normalize_space
from .prompts import build_judge_prompt

Triple = tuple[str, str, str]
MATCH_MODES = ("normalized_exact", "voice_equivalent", "judge")
_PUNCT = str.maketrans("", "", string.punctuation)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MatchPolicy:
    mode: str = "normalized_exact"
    casefold: bool = True
    collapse_space: bool = True
    strip_punctuation: bool = False
    gateway: Gateway | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.mode not in MATCH_MODES:
            raise EvaluationError(f"unknown match mode {self.mode!r}")
        if self.mode == "judge" and self.gateway is None:
            raise EvaluationError("judge mode requires a gateway")

    def norm(self, s: str) -> str:
        if self.strip_punctuation:
            s = s.translate(_PUNCT)
        if self.collapse_space:
            s = normalize_space(s)
        if self.casefold:
            s = s.casefold()
        return s

    def key(self, t: Triple) -> Hashable:
        s, r, o = (self.norm(x) for x in t)
        if self.mode == "normalized_exact":
            return (s, r, o)
        # voice_equivalent (and the judge's fast path): subject/object swap allowed
        return (r, tuple(sorted((s, o))))


@dataclass(frozen=True)
class PRF:
    tp: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn) < 0:
            raise EvaluationError("negative count")

    @property
    def precision_exact(self) -> Fraction:
        d = self.tp + self.fp
        return Fraction(self.tp, d) if d else Fraction(0)

    @property
    def recall_exact(self) -> Fraction:
        d = self.tp + self.fn
        return Fraction(self.tp, d) if d else Fraction(0)

    @property
    def f1_exact(self) -> Fraction:
        p, r = self.precision_exact, self.recall_exact
        return 2 * p * r / (p + r) if p + r else Fraction(0)

    @property
    def precision(self) -> float:
        return float(self.precision_exact)

    @property
    def recall(self) -> float:
        return float(self.recall_exact)

    @property
    def f1(self) -> float:
        return float(self.f1_exact)

    def __add__(self, other: PRF) -> PRF:
        return PRF(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": round(self.precision, 4),
            "recall": round(self.recall, 4),
            "f1": round(self.f1, 4),
        }


def _as_triple(t: Any) -> Triple:
    if isinstance(t, dict):
        return (t["subject"], t["relation"], t["object"])
    if hasattr(t, "key"):
        return t.key()
    s, r, o = t[:3]
    return (s, r, o)


def _judge(policy: MatchPolicy, pred: Triple, gold: Triple) -> bool:
    parts = build_judge_prompt(pred, gold)
    result = policy.gateway.complete(CompletionRequest(parts.render()), tag="evaluation/judge")  # type: ignore[union-attr]
    return result.text.strip().casefold().startswith("yes")


def match_triplets(pred: Iterable[Any], gold: Iterable[Any], policy: MatchPolicy = MatchPolicy()) -> PRF:
    """Greedy one-to-one matching; predictions visited in sorted order."""
    preds = sorted(_as_triple(p) for p in pred)
    golds = sorted(_as_triple(g) for g in gold)
    used = [False] * len(golds)
    gold_keys = [policy.key(g) for g in golds]
    tp = 0
    unmatched_preds = []
    for p in preds:
        k = policy.key(p)
        hit = next((i for i, gk in enumerate(gold_keys) if not used[i] and gk == k), None)
        if hit is None:
            unmatched_preds.append(p)
            continue
        used[hit] = True
        tp += 1
    if policy.mode == "judge":
        for p in unmatched_preds:
            hit = next((i for i, g in enumerate(golds) if not used[i] and _judge(policy, p, g)), None)
            if hit is not None:
                used[hit] = True
                tp += 1
    return PRF(tp, len(preds) - tp, len(golds) - tp)


@dataclass(frozen=True)
class TypingScores:
    accuracy: float
    micro_f1: float
    macro_f1: float
    per_class: dict[str, PRF]

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": round(self.accuracy, 4),
            "micro_f1": round(self.micro_f1, 4),
            "macro_f1": round(self.macro_f1, 4),
            "per_class": {k: v.to_dict() for k, v in sorted(self.per_class.items())},
        }


def typing_metrics(pred_labels: Sequence[str], gold_labels: Sequence[str]) -> TypingScores:
    if len(pred_labels) != len(gold_labels):
        raise EvaluationError(f"label lists differ in length: {len(pred_labels)} vs {len(gold_labels)}")
    if not gold_labels:
        return TypingScores(0.0, 0.0, 0.0, {})
    correct = sum(p == g for p, g in zip(pred_labels, gold_labels))
    per_class = {}
    for c in sorted(set(pred_labels) | set(gold_labels)):
        tp = sum(p == g == c for p, g in zip(pred_labels, gold_labels))
        fp = sum(p == c and g != c for p, g in zip(pred_labels, gold_labels))
        fn = sum(g == c and p != c for p, g in zip(pred_labels, gold_labels))
        per_class[c] = PRF(tp, fp, fn)
    pooled = sum(per_class.values(), PRF(0, 0, 0))
    macro = sum((v.f1_exact for v in per_class.values()), Fraction(0)) / len(per_class)
    return TypingScores(float(Fraction(correct, len(gold_labels))), pooled.f1, float(macro), per_class)


@dataclass(frozen=True)
class MergeScores:
    prf: PRF
    entity_count: int

    def to_dict(self) -> dict[str, Any]:
        return {**self.prf.to_dict(), "entity_count": self.entity_count}


def _pairs(clusters: Iterable[Iterable[Hashable]]) -> set[frozenset]:
    out: set[frozenset] = set()
    for c in clusters:
        for a, b in combinations(sorted(set(c), key=repr), 2):
            out.add(frozenset((a, b)))
    return out


def merge_metrics(pred_clusters: Sequence[Iterable[Hashable]], gold_clusters: Sequence[Iterable[Hashable]]) -> MergeScores:
    """Pairwise-link precision/recall over unordered same-cluster mention pairs."""
    pred_sets = [set(c) for c in pred_clusters]
    gold_sets = [set(c) for c in gold_clusters]
    pm = set().union(*pred_sets) if pred_sets else set()
    gm = set().union(*gold_sets) if gold_sets else set()
    if pm != gm:
        raise EvaluationError(f"clusterings cover different mentions: {sorted(map(repr, pm ^ gm))[:5]}")
    for sets, name in ((pred_sets, "predicted"), (gold_sets, "gold")):
        if sum(len(s) for s in sets) != len(pm):
            raise EvaluationError(f"{name} clusters overlap")
    pp, gp = _pairs(pred_sets), _pairs(gold_sets)
    tp = len(pp & gp)
    return MergeScores(PRF(tp, len(pp) - tp, len(gp) - tp), len(pred_sets))


def threshold_sweep(
    typed: Sequence[TypedTriplet],
    gold_clusters: Sequence[Iterable[str]],
    gateway: Gateway,
    thresholds: Sequence[float] = (0.7, 0.6, 0.5, 0.4),
    ontology: Ontology | None = None,
    catalog: IocCatalog | None = None,
) -> dict[float, MergeScores]:
    """Merging scores at each threshold over the groups implied by ``typed``.

    Passing gold typed triplets scores merging on gold groups; passing the
    pipeline's typed triplets scores it on predicted groups, so typing
    noise is included.
    """
    groups = group_by_type(typed, ontology)
    out = {}
    for tau in thresholds:
        clusters = [c.members for grp in groups for c in merge_group(grp, gateway, tau, catalog, tag="evaluation/merging")]
        out[tau] = merge_metrics(clusters, gold_clusters)
    return out


def graph_triplets(g: KnowledgeGraph) -> list[Triple]:
    return [(s, r, o) for s, r, o, _ in g.triplets()]


def evaluate_end_to_end(pred_graph: KnowledgeGraph, gold_graph: KnowledgeGraph, policy: MatchPolicy = MatchPolicy()) -> PRF:
    return match_triplets(graph_triplets(pred_graph), graph_triplets(gold_graph), policy)


def entity_alignment_correct(
    pred_types: dict[str, str],
    gold_types: dict[str, str],
    pred_clusters: Sequence[Iterable[str]],
    gold_clusters: Sequence[Iterable[str]],
) -> dict[str, bool]:
    """Per mention: right type AND exactly the gold co-members after merging."""
    def partner_map(clusters: Sequence[Iterable[str]]) -> dict[str, frozenset[str]]:
        out = {}
        for c in clusters:
            cs = frozenset(c)
            for m in cs:
                out[m] = cs
        return out

    pc, gc = partner_map(pred_clusters), partner_map(gold_clusters)
    return {
        m: pred_types.get(m) == gold_types[m] and pc.get(m) == gc.get(m)
        for m in gold_types
    }


# ---------------------------------------------------------------------------
# gold / prediction files


@dataclass
class ReportAnnotations:
    """One report's annotations, used for both gold and predictions.

    File form: ``{"report_id", "triplets", "typed_triplets", "clusters",
    "inferred_relations", "graph"?}``; every field except ``report_id`` may
    be omitted.
    """

    report_id: str
    triplets: list[Triple] | None = None
    typed_triplets: list[TypedTriplet] | None = None
    clusters: list[list[str]] | None = None
    inferred_relations: list[Triple] | None = None
    graph: KnowledgeGraph | None = None

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ReportAnnotations:
        if "report_id" not in d:
            raise EvaluationError("annotation record lacks report_id")
        try:
            return cls(
                report_id=str(d["report_id"]),
                triplets=[_as_triple(t) for t in d["triplets"]] if "triplets" in d else None,
                typed_triplets=[TypedTriplet.from_dict(t) for t in d["typed_triplets"]] if "typed_triplets" in d else None,
                clusters=[list(c) for c in d["clusters"]] if "clusters" in d else None,
                inferred_relations=[_as_triple(t) for t in d["inferred_relations"]] if "inferred_relations" in d else None,
                graph=KnowledgeGraph.from_dict(d["graph"]) if d.get("graph") else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise EvaluationError(f"report {d.get('report_id')!r}: malformed annotations: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"report_id": self.report_id}
        if self.triplets is not None:
            d["triplets"] = [dict(zip(("subject", "relation", "object"), t)) for t in self.triplets]
        if self.typed_triplets is not None:
            d["typed_triplets"] = [t.to_dict() for t in self.typed_triplets]
        if self.clusters is not None:
            d["clusters"] = [sorted(c) for c in self.clusters]
        if self.inferred_relations is not None:
            d["inferred_relations"] = [dict(zip(("subject", "relation", "object"), t)) for t in self.inferred_relations]
        if self.graph is not None:
            d["graph"] = self.graph.to_dict()
        return d

    def mention_types(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for t in self.typed_triplets or []:
            out.setdefault(t.subject.surface, t.subject_type)
            out.setdefault(t.object.surface, t.object_type)
        return out

    def end_to_end_triplets(self) -> list[Triple]:
        if self.graph is not None:
            return graph_triplets(self.graph)
        return list(self.triplets or []) + list(self.inferred_relations or [])


def load_annotations(path: str | Path) -> dict[str, ReportAnnotations]:
    """From a file (one record, a list, or JSON lines) or a directory of ``*.json``."""
    path = Path(path)
    records: list[dict[str, Any]] = []
    if path.is_dir():
        for child in sorted(path.rglob("*.json")):
            data = json.loads(child.read_text(encoding="utf-8"))
            if isinstance(data, dict) and "report_id" in data:
                records.append(data)
    elif path.suffix == ".jsonl":
        records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    else:
        data = json.loads(path.read_text(encoding="utf-8"))
        records = data if isinstance(data, list) else [data]
    out: dict[str, ReportAnnotations] = {}
    for rec in records:
        ann = ReportAnnotations.from_dict(rec)
        if ann.report_id in out:
            raise EvaluationError(f"duplicate annotations for report {ann.report_id!r}")
        out[ann.report_id] = ann
    return out


def score_report(pred: ReportAnnotations, gold: ReportAnnotations, policy: MatchPolicy = MatchPolicy()) -> dict[str, Any]:
    """Scores for every phase both sides annotate; skipped phases say why."""
    out: dict[str, Any] = {}
    if pred.triplets is not None and gold.triplets is not None:
        out["extraction"] = match_triplets(pred.triplets, gold.triplets, policy).to_dict()
    if pred.typed_triplets is not None and gold.typed_triplets is not None:
        gt, pt = gold.mention_types(), pred.mention_types()
        mentions = sorted(gt)
        out["typing"] = typing_metrics([pt.get(m, "<missing>") for m in mentions], [gt[m] for m in mentions]).to_dict()
    if pred.clusters is not None and gold.clusters is not None:
        try:
            out["merging"] = merge_metrics(pred.clusters, gold.clusters).to_dict()
        except EvaluationError as exc:
            out["merging"] = {"skipped": str(exc)}
    if pred.inferred_relations is not None and gold.inferred_relations is not None:
        out["relation_prediction"] = match_triplets(pred.inferred_relations, gold.inferred_relations, policy).to_dict()
    pe, ge = pred.end_to_end_triplets(), gold.end_to_end_triplets()
    if pe or ge:
        out["end_to_end"] = match_triplets(pe, ge, policy).to_dict()
    return out


PHASES = ("extraction", "typing", "merging", "relation_prediction", "end_to_end")


def evaluate_corpus(
    preds: dict[str, ReportAnnotations],
    golds: dict[str, ReportAnnotations],
    policy: MatchPolicy = MatchPolicy(),
) -> dict[str, Any]:
    if set(preds) != set(golds):
        missing = sorted(set(golds) ^ set(preds))
        raise EvaluationError(f"prediction and gold report sets differ: {missing}")
    per_report = {rid: score_report(preds[rid], golds[rid], policy) for rid in sorted(golds)}
    pooled: dict[str, Any] = {}
    for phase in ("extraction", "relation_prediction", "end_to_end"):
        parts = [r[phase] for r in per_report.values() if phase in r]
        if parts:
            pooled[phase] = PRF(sum(p["tp"] for p in parts), sum(p["fp"] for p in parts), sum(p["fn"] for p in parts)).to_dict()
    return {"reports": per_report, "micro": pooled}


def format_table(scores: dict[str, Any]) -> str:
    lines = [f"{'report':<24} {'phase':<20} {'P':>7} {'R':>7} {'F1':>7}"]
    for rid, phases in scores["reports"].items():
        for phase in PHASES:
            s = phases.get(phase)
            if s is None:
                continue
            if "skipped" in s:
                lines.append(f"{rid:<24} {phase:<20} skipped: {s['skipped']}")
            elif "f1" in s:
                lines.append(f"{rid:<24} {phase:<20} {s['precision']:>7.4f} {s['recall']:>7.4f} {s['f1']:>7.4f}")
            else:
                lines.append(f"{rid:<24} {phase:<20} acc={s['accuracy']:.4f} micro={s['micro_f1']:.4f} macro={s['macro_f1']:.4f}")
    for phase, s in scores["micro"].items():
        lines.append(f"{'ALL':<24} {phase:<20} {s['precision']:>7.4f} {s['recall']:>7.4f} {s['f1']:>7.4f}")
    return "\n".join(lines) + "\n"
