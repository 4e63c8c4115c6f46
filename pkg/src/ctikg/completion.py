"""Phase 3: link disjoint subgraphs through their central entities."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

from .extraction import select_demos
from .gateway import CompletionRequest, Gateway, UsageRecord
from .model import CtiReport, Edge, KnowledgeGraph, ModelError, PipelineConfig, normalize_space, validate_graph
from .parsing import ParseError, json_candidates
from .prompts import build_relation_prompt
from .retriever import DemoIndex, Demonstration

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Component:
    node_ids: tuple[str, ...]  # sorted
    edges: tuple[Edge, ...]

    def __contains__(self, node_id: object) -> bool:
        return node_id in self.node_ids


def connected_components(g: KnowledgeGraph) -> list[Component]:
    """Weakly connected components by iterative DFS, ordered by least node id."""
    adj: dict[str, set[str]] = {n: set() for n in g.nodes}
    for e in g.edges:
        adj[e.source].add(e.target)
        adj[e.target].add(e.source)
    seen: set[str] = set()
    groups: list[list[str]] = []
    for start in sorted(adj):
        if start in seen:
            continue
        seen.add(start)
        stack, comp = [start], []
        while stack:
            n = stack.pop()
            comp.append(n)
            for m in adj[n]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        groups.append(sorted(comp))
    comps = []
    for ids in groups:
        members = set(ids)
        comps.append(Component(tuple(ids), tuple(e for e in g.edges if e.source in members)))
    return comps


def degrees(g: KnowledgeGraph) -> dict[str, tuple[int, int]]:
    """(total degree, out degree) for every node."""
    total = {n: 0 for n in g.nodes}
    out = {n: 0 for n in g.nodes}
    for e in g.edges:
        out[e.source] += 1
        total[e.source] += 1
        total[e.target] += 1
    return {n: (total[n], out[n]) for n in g.nodes}


def centrality_key(g: KnowledgeGraph, node_id: str) -> tuple[int, int]:
    if node_id not in g.nodes:
        raise KeyError(node_id)
    total = sum((e.source == node_id) + (e.target == node_id) for e in g.edges)
    out = sum(e.source == node_id for e in g.edges)
    return (total, out)


@dataclass
class CentralSelection:
    components: list[Component]
    centrals: list[list[str]]  # per component, sorted ids
    topic: str
    topic_ties: list[str] = field(default_factory=list)

    @property
    def topic_component(self) -> int:
        for i, comp in enumerate(self.components):
            if self.topic in comp:
                return i
        raise ModelError("topic outside every component")

    def all_centrals(self) -> list[str]:
        return [c for cs in self.centrals for c in cs]


def select_centrals(components: Sequence[Component], g: KnowledgeGraph) -> CentralSelection:
    """Every node with the maximal (total, out) key is central in its component.

    The topic is the central with the maximal key overall; remaining ties go
    to the least canonical string, and the tied ids are recorded.
    """
    if not components:
        raise ValueError("select_centrals needs at least one component")
    deg = degrees(g)
    centrals = []
    for comp in components:
        best = max(deg[n] for n in comp.node_ids)
        centrals.append(sorted(n for n in comp.node_ids if deg[n] == best))
    flat = [c for cs in centrals for c in cs]
    best = max(deg[c] for c in flat)
    tied = sorted((c for c in flat if deg[c] == best), key=lambda n: (g.nodes[n].canonical, n))
    return CentralSelection(list(components), centrals, tied[0], tied if len(tied) > 1 else [])


# ---------------------------------------------------------------------------
# relation prediction


def parse_predicted_triple(text: str) -> tuple[str, str, str]:
    for value in json_candidates(text):
        if not isinstance(value, dict):
            continue
        triple = value.get("predicted_triple", value)
        if isinstance(triple, dict) and all(isinstance(triple.get(k), str) and triple[k].strip() for k in ("subject", "relation", "object")):
            return (normalize_space(triple["subject"]), normalize_space(triple["relation"]), normalize_space(triple["object"]))
    raise ParseError("no predicted_triple object with subject, relation and object")


def _names(g: KnowledgeGraph, node_id: str) -> set[str]:
    node = g.nodes[node_id]
    return {s.casefold() for s in node.aliases | {node.canonical}}


@dataclass
class PredictionOutcome:
    central: str
    topic: str
    status: str  # linked | unparseable | off_entity
    response: str
    edge: Edge | None = None
    usage: UsageRecord = field(default_factory=UsageRecord)

    def to_dict(self) -> dict[str, Any]:
        return {
            "central": self.central,
            "topic": self.topic,
            "status": self.status,
            "response": self.response,
            "edge": self.edge.to_dict() if self.edge else None,
        }


def _predict_one(
    g: KnowledgeGraph,
    central: str,
    topic: str,
    report: CtiReport,
    demos: list[Demonstration],
    config: PipelineConfig,
    gateway: Gateway,
    tag: str,
) -> PredictionOutcome:
    prompt = build_relation_prompt(report.text, demos, g.nodes[central].canonical, g.nodes[topic].canonical).render()
    result = gateway.complete(CompletionRequest(prompt, config.decoding), tag=tag)
    try:
        subj, rel, obj = parse_predicted_triple(result.text)
    except ParseError as exc:
        log.warning("%s: dropping unparseable prediction for %s: %s", tag, central, exc.diagnostic)
        return PredictionOutcome(central, topic, "unparseable", result.text, usage=result.usage)
    ends = {central: _names(g, central), topic: _names(g, topic)}
    src = next((n for n, names in ends.items() if subj.casefold() in names), None)
    dst = next((n for n, names in ends.items() if obj.casefold() in names and n != src), None)
    if src is None or dst is None:
        log.warning("%s: prediction %r names entities outside the queried pair", tag, (subj, rel, obj))
        return PredictionOutcome(central, topic, "off_entity", result.text, usage=result.usage)
    return PredictionOutcome(central, topic, "linked", result.text, Edge(src, dst, rel, "inferred"), result.usage)


def predict_relations(
    g: KnowledgeGraph,
    selection: CentralSelection,
    report: CtiReport,
    demos: DemoIndex | Sequence[Demonstration],
    config: PipelineConfig,
    gateway: Gateway,
    workers: int = 1,
) -> list[PredictionOutcome]:
    """One completion per central outside the topic's component."""
    if len(selection.components) < 2:
        return []
    tag = f"{report.id}/completion"
    chosen = select_demos(demos, report.text, config.k_relation, config, gateway, tag)
    home = selection.topic_component
    queries = [c for i, cs in enumerate(selection.centrals) if i != home for c in cs]
    if workers <= 1:
        return [_predict_one(g, c, selection.topic, report, chosen, config, gateway, tag) for c in queries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_predict_one, g, c, selection.topic, report, chosen, config, gateway, tag) for c in queries]
        return [f.result() for f in futures]


def integrate(g: KnowledgeGraph, inferred: Sequence[Edge]) -> KnowledgeGraph:
    out = g.copy()
    for e in inferred:
        if e.provenance != "inferred":
            e = Edge(e.source, e.target, e.relation, "inferred")
        out.add_edge(e)
    problems = validate_graph(out)
    if problems:
        raise ModelError("integrated graph is invalid: " + "; ".join(problems))
    return out


@dataclass
class GraphCompletion:
    graph: KnowledgeGraph
    selection: CentralSelection | None
    outcomes: list[PredictionOutcome]

    @property
    def inferred(self) -> list[Edge]:
        return [o.edge for o in self.outcomes if o.edge is not None]

    def metadata(self) -> dict[str, Any]:
        sel = self.selection
        g = self.graph
        label = lambda n: {"id": n, "canonical": g.nodes[n].canonical}  # noqa: E731
        return {
            "components": [list(c.node_ids) for c in sel.components] if sel else [],
            "centrals": [[label(n) for n in cs] for cs in sel.centrals] if sel else [],
            "topic": label(sel.topic) if sel else None,
            "topic_ties": [label(n) for n in sel.topic_ties] if sel else [],
            "calls": [o.to_dict() for o in self.outcomes],
        }


def complete_graph(
    g: KnowledgeGraph,
    report: CtiReport,
    demos: DemoIndex | Sequence[Demonstration],
    config: PipelineConfig,
    gateway: Gateway,
    workers: int = 1,
) -> GraphCompletion:
    if not g.nodes:
        return GraphCompletion(g.copy(), None, [])
    comps = connected_components(g)
    selection = select_centrals(comps, g)
    outcomes = predict_relations(g, selection, report, demos, config, gateway, workers)
    new = integrate(g, [o.edge for o in outcomes if o.edge is not None])
    return GraphCompletion(new, selection, outcomes)
