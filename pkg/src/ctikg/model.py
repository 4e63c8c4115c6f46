"""Domain types shared by every pipeline stage.

Everything here is a plain value type that round-trips through JSON with
stable key ordering. The only mutable container is :class:`KnowledgeGraph`,
which enforces edge uniqueness and rejects self-loops on insertion.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Literal

Provenance = Literal["extracted", "inferred"]
Permutation = Literal["knn_ascend", "knn_descend", "random"]

PERMUTATIONS: tuple[str, ...] = ("knn_ascend", "knn_descend", "random")
PROVENANCES: tuple[str, ...] = ("extracted", "inferred")


class ModelError(ValueError):
    """Raised when a value violates a domain-type invariant."""


def normalize_space(text: str) -> str:
    """Trim and collapse internal runs of whitespace to one space."""
    return " ".join(text.split())


def dumps_canonical(obj: Any, *, indent: int | None = 2) -> str:
    """JSON text with sorted keys; the one serializer used for every artifact."""
    return json.dumps(obj, sort_keys=True, indent=indent, ensure_ascii=False) + (
        "\n" if indent is not None else ""
    )


# ---------------------------------------------------------------------------
# reports and ontologies


@dataclass(frozen=True, slots=True)
class CtiReport:
    id: str
    text: str
    source: str = "unknown"
    published: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ModelError("report id must be non-empty")
        if not self.text.strip():
            raise ModelError(f"report {self.id!r} has empty text")

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "source": self.source, "published": self.published, "text": self.text}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CtiReport:
        return cls(
            id=str(d["id"]),
            text=d["text"],
            source=d.get("source", "unknown"),
            published=d.get("published"),
        )


def load_reports(path: str | Path) -> list[CtiReport]:
    """Load reports from a ``.json`` file, a ``.jsonl`` file, a ``.txt`` file or a directory.

    A ``.txt`` file becomes one report whose id is the file stem. Directories
    are scanned (non-recursively) for the other three forms. Ids must be
    unique across the result.
    """
    path = Path(path)
    reports: list[CtiReport] = []
    if path.is_dir():
        for child in sorted(path.iterdir()):
            if child.suffix in (".json", ".jsonl", ".txt"):
                reports.extend(load_reports(child))
    elif path.suffix == ".jsonl":
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                reports.append(CtiReport.from_dict(json.loads(line)))
    elif path.suffix == ".txt":
        reports.append(CtiReport(id=path.stem, text=path.read_text(encoding="utf-8")))
    else:
        data = json.loads(path.read_text(encoding="utf-8"))
        items = data if isinstance(data, list) else [data]
        reports.extend(CtiReport.from_dict(d) for d in items)
    seen: set[str] = set()
    for r in reports:
        if r.id in seen:
            raise ModelError(f"duplicate report id {r.id!r} in {path}")
        seen.add(r.id)
    return reports


@dataclass(frozen=True, slots=True)
class EntityType:
    label: str
    parent: str | None = None
    description: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"label": self.label}
        if self.parent is not None:
            d["parent"] = self.parent
        if self.description is not None:
            d["description"] = self.description
        return d


@dataclass(frozen=True)
class Ontology:
    """Entity types (optionally hierarchical) plus an optional relation vocabulary.

    ``fallback_type`` receives any mention whose model-assigned label cannot be
    mapped onto a declared type. With ``collapse_subtypes`` set, grouping for
    entity merging uses each label's root ancestor instead of the label itself.
    """

    name: str
    entity_types: tuple[EntityType, ...]
    relation_types: tuple[str, ...] = ()
    fallback_type: str | None = None
    collapse_subtypes: bool = False

    def __post_init__(self) -> None:
        if not self.entity_types:
            raise ModelError("ontology needs at least one entity type")
        labels = [t.label for t in self.entity_types]
        if len(set(labels)) != len(labels):
            dupes = sorted({x for x in labels if labels.count(x) > 1})
            raise ModelError(f"duplicate entity type labels: {dupes}")
        known = set(labels)
        for t in self.entity_types:
            if t.parent is not None and t.parent not in known:
                raise ModelError(f"type {t.label!r} has unknown parent {t.parent!r}")
        if self.fallback_type is not None and self.fallback_type not in known:
            raise ModelError(f"fallback type {self.fallback_type!r} is not a declared type")
        if len(set(self.relation_types)) != len(self.relation_types):
            raise ModelError("duplicate relation type labels")
        # parent chains must terminate
        for t in self.entity_types:
            self.root_of(t.label)

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.entity_types]

    @property
    def open_relations(self) -> bool:
        return not self.relation_types

    @property
    def fallback(self) -> str:
        return self.fallback_type if self.fallback_type is not None else self.entity_types[0].label

    def root_of(self, label: str) -> str:
        parents = {t.label: t.parent for t in self.entity_types}
        seen = {label}
        while parents.get(label) is not None:
            label = parents[label]  # type: ignore[assignment]
            if label in seen:
                raise ModelError(f"cycle in parent chain at {label!r}")
            seen.add(label)
        return label

    def group_key(self, label: str) -> str:
        return self.root_of(label) if self.collapse_subtypes else label

    def resolve_label(self, label: str) -> str | None:
        """Exact match, then case-insensitive exact match; ``None`` if neither."""
        label = normalize_space(label)
        if label in self.labels:
            return label
        folded = {x.casefold(): x for x in self.labels}
        return folded.get(label.casefold())

    def prompt_types(self) -> list[dict[str, Any]]:
        return [t.to_dict() for t in self.entity_types]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "entity_types": [t.to_dict() for t in self.entity_types],
            "relation_types": list(self.relation_types),
            "fallback_type": self.fallback_type,
            "collapse_subtypes": self.collapse_subtypes,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Ontology:
        types = []
        for t in d["entity_types"]:
            if isinstance(t, str):
                types.append(EntityType(label=t))
            else:
                types.append(EntityType(label=t["label"], parent=t.get("parent"), description=t.get("description")))
        return cls(
            name=d.get("name", "custom"),
            entity_types=tuple(types),
            relation_types=tuple(d.get("relation_types") or ()),
            fallback_type=d.get("fallback_type"),
            collapse_subtypes=bool(d.get("collapse_subtypes", False)),
        )

    @classmethod
    def load(cls, path: str | Path) -> Ontology:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def builtin_ontology(name: str) -> Ontology:
    """Load a bundled ontology (``"malont"`` or ``"stix"``)."""
    here = Path(__file__).parent / "data" / f"ontology_{name}.json"
    if not here.exists():
        raise ModelError(f"no bundled ontology named {name!r}")
    return Ontology.load(here)


# ---------------------------------------------------------------------------
# triplets


@dataclass(frozen=True, slots=True)
class Mention:
    surface: str
    span: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if not self.surface.strip():
            raise ModelError("mention surface must be non-empty")

    def check_span(self, report_text: str) -> bool:
        if self.span is None:
            return True
        start, end = self.span
        return report_text[start:end] == self.surface


@dataclass(frozen=True, slots=True)
class RawTriplet:
    subject: Mention
    relation: str
    object: Mention

    def __post_init__(self) -> None:
        if not self.relation.strip():
            raise ModelError("relation must be non-empty")

    @classmethod
    def of(cls, subject: str, relation: str, obj: str) -> RawTriplet:
        return cls(Mention(normalize_space(subject)), normalize_space(relation), Mention(normalize_space(obj)))

    def key(self) -> tuple[str, str, str]:
        return (self.subject.surface, self.relation, self.object.surface)

    def to_dict(self) -> dict[str, str]:
        return {"subject": self.subject.surface, "relation": self.relation, "object": self.object.surface}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RawTriplet:
        return cls.of(d["subject"], d["relation"], d["object"])


@dataclass(frozen=True, slots=True)
class TypedTriplet:
    subject: Mention
    subject_type: str
    relation: str
    object: Mention
    object_type: str

    @property
    def raw(self) -> RawTriplet:
        return RawTriplet(self.subject, self.relation, self.object)

    def check_types(self, ontology: Ontology) -> bool:
        labels = set(ontology.labels)
        return self.subject_type in labels and self.object_type in labels

    def to_dict(self) -> dict[str, Any]:
        return {
            "subject": {"text": self.subject.surface, "class": self.subject_type},
            "relation": self.relation,
            "object": {"text": self.object.surface, "class": self.object_type},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TypedTriplet:
        return cls(
            Mention(normalize_space(d["subject"]["text"])),
            d["subject"]["class"],
            normalize_space(d["relation"]),
            Mention(normalize_space(d["object"]["text"])),
            d["object"]["class"],
        )


# ---------------------------------------------------------------------------
# graph


def entity_id(canonical: str, entity_type: str) -> str:
    digest = hashlib.sha256(f"{entity_type}\x1f{canonical}".encode("utf-8")).hexdigest()
    return "e" + digest[:16]


@dataclass(slots=True)
class EntityNode:
    id: str
    canonical: str
    entity_type: str
    aliases: set[str] = field(default_factory=set)
    ioc_class: str | None = None

    def __post_init__(self) -> None:
        self.aliases.add(self.canonical)

    @classmethod
    def create(cls, canonical: str, entity_type: str, aliases: Iterable[str] = (), ioc_class: str | None = None) -> EntityNode:
        return cls(entity_id(canonical, entity_type), canonical, entity_type, set(aliases), ioc_class)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "canonical": self.canonical,
            "entity_type": self.entity_type,
            "aliases": sorted(self.aliases),
            "ioc_class": self.ioc_class,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EntityNode:
        return cls(d["id"], d["canonical"], d["entity_type"], set(d.get("aliases", ())), d.get("ioc_class"))


@dataclass(frozen=True, slots=True)
class Edge:
    source: str
    target: str
    relation: str
    provenance: str = "extracted"

    def key(self) -> tuple[str, str, str]:
        return (self.source, self.relation, self.target)

    def to_dict(self) -> dict[str, str]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Edge:
        return cls(d["source"], d["target"], d["relation"], d.get("provenance", "extracted"))


class KnowledgeGraph:
    """Nodes keyed by id plus a list of directed, provenance-tagged edges.

    :meth:`add_edge` is the only sanctioned way to grow ``edges``; it keeps
    (source, relation, target) unique and drops self-loops. Direct list
    manipulation is possible (deserialization, tests) and is what
    :func:`validate_graph` exists to check.
    """

    def __init__(self, nodes: dict[str, EntityNode] | None = None, edges: list[Edge] | None = None):
        self.nodes: dict[str, EntityNode] = dict(nodes or {})
        self.edges: list[Edge] = list(edges or [])
        self._keys: set[tuple[str, str, str]] = {e.key() for e in self.edges}

    def __repr__(self) -> str:
        return f"KnowledgeGraph(nodes={len(self.nodes)}, edges={len(self.edges)})"

    def add_node(self, node: EntityNode) -> EntityNode:
        existing = self.nodes.get(node.id)
        if existing is None:
            self.nodes[node.id] = node
            return node
        existing.aliases |= node.aliases
        return existing

    def add_edge(self, edge: Edge) -> bool:
        """Insert ``edge``; returns False for self-loops and duplicates."""
        if edge.source == edge.target:
            return False
        if edge.source not in self.nodes or edge.target not in self.nodes:
            raise ModelError(f"edge {edge.key()} references a missing node")
        if edge.key() in self._keys:
            return False
        self._keys.add(edge.key())
        self.edges.append(edge)
        return True

    def copy(self) -> KnowledgeGraph:
        nodes = {
            k: EntityNode(n.id, n.canonical, n.entity_type, set(n.aliases), n.ioc_class) for k, n in self.nodes.items()
        }
        return KnowledgeGraph(nodes, list(self.edges))

    def find(self, surface: str) -> EntityNode | None:
        """Node whose canonical form or alias equals ``surface`` (whitespace-normalized)."""
        surface = normalize_space(surface)
        for node in self.nodes.values():
            if node.canonical == surface:
                return node
        for node in self.nodes.values():
            if surface in node.aliases:
                return node
        return None

    def triplets(self) -> Iterator[tuple[str, str, str, str]]:
        """(source canonical, relation, target canonical, provenance) per edge."""
        for e in self.edges:
            yield (self.nodes[e.source].canonical, e.relation, self.nodes[e.target].canonical, e.provenance)

    def to_dict(self) -> dict[str, Any]:
        return {
            "nodes": [self.nodes[k].to_dict() for k in sorted(self.nodes)],
            "edges": [e.to_dict() for e in sorted(self.edges, key=lambda e: (e.source, e.relation, e.target, e.provenance))],
        }

    def to_json(self) -> str:
        return dumps_canonical(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> KnowledgeGraph:
        nodes = [EntityNode.from_dict(n) for n in d.get("nodes", [])]
        return cls({n.id: n for n in nodes}, [Edge.from_dict(e) for e in d.get("edges", [])])

    @classmethod
    def load(cls, path: str | Path) -> KnowledgeGraph:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def validate_graph(g: KnowledgeGraph) -> list[str]:
    """Return one human-readable description per invariant violation."""
    problems: list[str] = []
    for key, node in g.nodes.items():
        if key != node.id:
            problems.append(f"node {node.id!r} stored under key {key!r}")
        if not node.aliases:
            problems.append(f"node {node.id!r} has no aliases")
        elif node.canonical not in node.aliases:
            problems.append(f"node {node.id!r} canonical {node.canonical!r} not among its aliases")
    seen: set[tuple[str, str, str]] = set()
    for e in g.edges:
        for end in (e.source, e.target):
            if end not in g.nodes:
                problems.append(f"edge {e.source!r} -{e.relation}-> {e.target!r} references missing node {end!r}")
        if e.source == e.target:
            problems.append(f"self-loop edge on node {e.source!r} ({e.relation!r})")
        if e.provenance not in PROVENANCES:
            problems.append(f"edge {e.key()} has unknown provenance {e.provenance!r}")
        if e.key() in seen:
            problems.append(f"duplicate edge {e.source!r} -{e.relation}-> {e.target!r}")
        seen.add(e.key())
    return problems


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True, slots=True)
class DecodingParams:
    temperature: float = 0.0
    max_output_tokens: int = 4096

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ModelError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ModelError("max_output_tokens must be positive")

    def canonical(self) -> dict[str, Any]:
        # 0 and 0.0 must hash identically
        return {"max_output_tokens": int(self.max_output_tokens), "temperature": float(self.temperature)}


DEMO_MODES = ("knn", "fixed")


@dataclass(frozen=True)
class PipelineConfig:
    k_extract: int = 2
    k_typing: int = 8
    k_relation: int = 2
    merge_threshold: float = 0.6
    permutation: str = "knn_ascend"
    seed: int = 0
    decoding: DecodingParams = field(default_factory=DecodingParams)
    demo_mode: dict[str, str] = field(
        default_factory=lambda: {"extraction": "knn", "typing": "fixed", "relation": "fixed"}
    )

    def __post_init__(self) -> None:
        if self.k_extract < 1 or self.k_typing < 1:
            raise ModelError("k_extract and k_typing must be positive")
        if self.k_relation < 0:
            raise ModelError("k_relation must be non-negative")
        if not -1.0 <= self.merge_threshold <= 1.0:
            raise ModelError("merge_threshold must lie in [-1, 1]")
        if self.permutation not in PERMUTATIONS:
            raise ModelError(f"unknown permutation {self.permutation!r}")
        for task, mode in self.demo_mode.items():
            if mode not in DEMO_MODES:
                raise ModelError(f"unknown demo mode {mode!r} for task {task!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "k_extract": self.k_extract,
            "k_typing": self.k_typing,
            "k_relation": self.k_relation,
            "merge_threshold": self.merge_threshold,
            "permutation": self.permutation,
            "seed": self.seed,
            "decoding": self.decoding.canonical(),
            "demo_mode": dict(self.demo_mode),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PipelineConfig:
        base = cls()
        decoding = d.get("decoding") or {}
        demo_mode = dict(base.demo_mode)
        demo_mode.update(d.get("demo_mode") or {})
        return cls(
            k_extract=int(d.get("k_extract", base.k_extract)),
            k_typing=int(d.get("k_typing", base.k_typing)),
            k_relation=int(d.get("k_relation", base.k_relation)),
            merge_threshold=float(d.get("merge_threshold", base.merge_threshold)),
            permutation=d.get("permutation", base.permutation),
            seed=int(d.get("seed", base.seed)),
            decoding=DecodingParams(
                temperature=float(decoding.get("temperature", base.decoding.temperature)),
                max_output_tokens=int(decoding.get("max_output_tokens", base.decoding.max_output_tokens)),
            ),
            demo_mode=demo_mode,
        )
