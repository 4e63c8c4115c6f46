"""Phase 2: typing, type-level grouping, embedding-based merging, graph rebuild."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .extraction import complete_parsed, select_demos
from .gateway import Gateway, UsageRecord
from .ioc import IocCatalog, detect_ioc, normalize_ioc
from .model import Edge, EntityNode, KnowledgeGraph, Ontology, PipelineConfig, RawTriplet, TypedTriplet, normalize_space
from .parsing import ParseError, find_array
from .prompts import build_typing_prompt
from .retriever import DemoIndex, Demonstration

log = logging.getLogger(__name__)


class TypingFailed(RuntimeError):
    def __init__(self, raw_response: str, diagnostic: str):
        super().__init__(f"typing response could not be parsed: {diagnostic}")
        self.raw_response = raw_response
        self.diagnostic = diagnostic


class AlignmentError(RuntimeError):
    """Internal invariant breach, e.g. a mention that belongs to no cluster."""


# ---------------------------------------------------------------------------
# coarse-grained typing


def _class_of(tagged: Any, role: str) -> str:
    part = tagged.get(role) if isinstance(tagged, dict) else None
    label = part.get("class") if isinstance(part, dict) else None
    if not isinstance(label, str) or not label.strip():
        raise ParseError(f"tagged triplet lacks a {role} class")
    return label


def parse_typing_response(text: str, triplets: Sequence[RawTriplet], ontology: Ontology) -> list[TypedTriplet]:
    """Map the model's tagged triplets back onto ``triplets`` by position.

    Surfaces always come from the input triplets; only the class labels are
    read from the response. Unknown labels fall back to the ontology's
    fallback type.
    """
    items = find_array(text)
    if len(items) != len(triplets):
        raise ParseError(f"expected {len(triplets)} tagged triplets, got {len(items)}")
    typed = []
    for i, (item, raw) in enumerate(zip(items, triplets)):
        if not isinstance(item, dict):
            raise ParseError(f"item {i} is not an object")
        tagged = item.get("tagged_triplet", item)
        labels = []
        for role in ("subject", "object"):
            try:
                label = _class_of(tagged, role)
            except ParseError as exc:
                raise ParseError(f"item {i}: {exc.diagnostic}") from exc
            resolved = ontology.resolve_label(label)
            if resolved is None:
                log.warning("unknown type label %r for %r; using %r", label, getattr(raw, role).surface, ontology.fallback)
                resolved = ontology.fallback
            labels.append(resolved)
        typed.append(TypedTriplet(raw.subject, labels[0], raw.relation, raw.object, labels[1]))
    return typed


def assign_types(
    triplets: Sequence[RawTriplet],
    ontology: Ontology,
    demos: DemoIndex | Sequence[Demonstration],
    config: PipelineConfig,
    gateway: Gateway,
    tag: str = "typing",
) -> list[TypedTriplet]:
    if not triplets:
        raise ValueError("assign_types needs at least one triplet")
    query_text = json.dumps([t.to_dict() for t in triplets], ensure_ascii=False)
    chosen = select_demos(demos, query_text, config.k_typing, config, gateway, tag)
    prompt = build_typing_prompt(ontology, chosen, triplets).render()
    try:
        typed, _, _ = complete_parsed(gateway, prompt, lambda text: parse_typing_response(text, triplets, ontology), config, tag)
    except ParseError as exc:
        raise TypingFailed(getattr(exc, "raw_response", ""), exc.diagnostic) from exc
    return typed


# ---------------------------------------------------------------------------
# grouping


@dataclass(frozen=True)
class GroupMember:
    surface: str
    occurrences: tuple[tuple[int, str], ...]  # (triplet index, "subject" | "object")

    @property
    def frequency(self) -> int:
        return len(self.occurrences)


@dataclass
class EntityGroup:
    entity_type: str
    members: list[GroupMember]


def _mentions(typed: Sequence[TypedTriplet]):
    for i, t in enumerate(typed):
        yield i, "subject", t.subject.surface, t.subject_type
        yield i, "object", t.object.surface, t.object_type


def group_by_type(typed: Sequence[TypedTriplet], ontology: Ontology | None = None) -> list[EntityGroup]:
    """Partition distinct (surface, type) mentions by type, in first-seen order."""
    key = ontology.group_key if ontology is not None else (lambda label: label)
    occ: dict[str, dict[str, list[tuple[int, str]]]] = {}
    for i, role, surface, label in _mentions(typed):
        occ.setdefault(key(label), {}).setdefault(surface, []).append((i, role))
    return [
        EntityGroup(label, [GroupMember(s, tuple(o)) for s, o in members.items()])
        for label, members in occ.items()
    ]


# ---------------------------------------------------------------------------
# fine-grained merging


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1

    def components(self) -> list[list[int]]:
        """Components as sorted index lists, ordered by smallest member."""
        groups: dict[int, list[int]] = {}
        for i in range(len(self.parent)):
            groups.setdefault(self.find(i), []).append(i)
        return sorted(groups.values(), key=lambda c: c[0])


@dataclass
class MergeCluster:
    entity_type: str
    counts: dict[str, int]
    canonical: str = ""
    ioc_class: str | None = None
    members: frozenset[str] = field(init=False)

    def __post_init__(self) -> None:
        if not self.counts:
            raise AlignmentError("empty merge cluster")
        self.members = frozenset(self.counts)
        if not self.canonical:
            self.canonical = choose_canonical(self)

    def to_dict(self) -> dict[str, Any]:
        return {
            "entity_type": self.entity_type,
            "canonical": self.canonical,
            "members": sorted(self.members),
            "ioc_class": self.ioc_class,
        }


def choose_canonical(cluster: MergeCluster) -> str:
    """Most frequent surface; ties go to the longest, then the lexicographically least."""
    return min(cluster.counts, key=lambda s: (-cluster.counts[s], -len(s), s))


def similarity_matrix(vectors: Sequence[Sequence[float]]) -> np.ndarray:
    m = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding in merge group")
    unit = m / norms[:, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def admitted_pairs(
    surfaces: Sequence[str],
    sim: np.ndarray,
    threshold: float,
    catalog: IocCatalog | None = None,
) -> list[tuple[int, int]]:
    """Index pairs i<j with similarity >= threshold that the IOC guard allows."""
    classes = [detect_ioc(s, catalog) for s in surfaces]
    literals = [normalize_ioc(s, c) if c else None for s, c in zip(surfaces, classes)]
    ii, jj = np.nonzero(np.triu(sim >= threshold, k=1))
    pairs = []
    for i, j in zip(ii.tolist(), jj.tolist()):
        if classes[i] is None and classes[j] is None:
            pairs.append((i, j))
        elif classes[i] == classes[j] and literals[i] == literals[j]:
            pairs.append((i, j))
    return pairs


def merge_group(
    group: EntityGroup,
    gateway: Gateway,
    threshold: float,
    catalog: IocCatalog | None = None,
    tag: str = "merging",
) -> list[MergeCluster]:
    if not group.members:
        raise ValueError("cannot merge an empty group")
    surfaces = [m.surface for m in group.members]
    freq = {m.surface: m.frequency for m in group.members}
    if len(surfaces) == 1:
        comps = [[0]]
    else:
        vectors = gateway.embed(surfaces, tag=tag)
        sim = similarity_matrix([v.values for v in vectors])
        uf = UnionFind(len(surfaces))
        for i, j in admitted_pairs(surfaces, sim, threshold, catalog):
            uf.union(i, j)
        comps = uf.components()
    clusters = []
    for comp in comps:
        counts = {surfaces[i]: freq[surfaces[i]] for i in comp}
        ioc = {detect_ioc(s, catalog) for s in counts} - {None}
        clusters.append(MergeCluster(group.entity_type, counts, ioc_class=min(ioc) if ioc else None))
    return clusters


# ---------------------------------------------------------------------------
# graph rebuild


def rebuild_graph(
    typed: Sequence[TypedTriplet],
    clusters: Sequence[MergeCluster],
    ontology: Ontology | None = None,
) -> KnowledgeGraph:
    key = ontology.group_key if ontology is not None else (lambda label: label)
    owner: dict[tuple[str, str], EntityNode] = {}
    g = KnowledgeGraph()
    for c in clusters:
        node = g.add_node(EntityNode.create(c.canonical, c.entity_type, c.members, c.ioc_class))
        for surface in c.members:
            if (surface, c.entity_type) in owner:
                raise AlignmentError(f"mention {surface!r} ({c.entity_type}) belongs to two clusters")
            owner[(surface, c.entity_type)] = node
    for t in typed:
        try:
            s = owner[(t.subject.surface, key(t.subject_type))]
            o = owner[(t.object.surface, key(t.object_type))]
        except KeyError as exc:
            raise AlignmentError(f"mention {exc.args[0]!r} belongs to no cluster") from None
        g.add_edge(Edge(s.id, o.id, normalize_space(t.relation), "extracted"))
    return g


# ---------------------------------------------------------------------------
# phase driver


@dataclass
class AlignmentResult:
    typed: list[TypedTriplet]
    groups: list[EntityGroup]
    clusters: list[MergeCluster]
    graph: KnowledgeGraph
    usage: UsageRecord

    def to_dict(self) -> dict[str, Any]:
        return {
            "typed_triplets": [t.to_dict() for t in self.typed],
            "clusters": [c.to_dict() for c in self.clusters],
            "usage": self.usage.to_dict(),
        }


def align(
    triplets: Sequence[RawTriplet],
    ontology: Ontology,
    demos: DemoIndex | Sequence[Demonstration],
    config: PipelineConfig,
    gateway: Gateway,
    report_id: str = "report",
    catalog: IocCatalog | None = None,
) -> AlignmentResult:
    tag = f"{report_id}/alignment"
    if not triplets:
        return AlignmentResult([], [], [], KnowledgeGraph(), UsageRecord())
    typed = assign_types(triplets, ontology, demos, config, gateway, tag)
    groups = group_by_type(typed, ontology)
    clusters = [c for grp in groups for c in merge_group(grp, gateway, config.merge_threshold, catalog, tag)]
    graph = rebuild_graph(typed, clusters, ontology)
    return AlignmentResult(typed, groups, clusters, graph, gateway.usage(tag))
