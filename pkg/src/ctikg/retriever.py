"""Demonstration corpus and exact kNN retrieval over report embeddings."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .gateway import EmbeddingVector, Gateway
from .model import ModelError, normalize_space

TASKS = ("extraction", "typing", "relation")


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class Demonstration:
    """An annotated example. ``gold`` depends on ``task``:

    * extraction: list of ``{"subject", "relation", "object"}``
    * typing: list of ``{"triplet": {...}, "tagged_triplet": {...}}`` where the
      tagged triplet's subject/object are ``{"text", "class"}``
    * relation: ``{"central", "topic", "predicted_triple": {...}}``
    """

    id: str
    task: str
    report_text: str
    gold: Any

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ModelError(f"demonstration {self.id!r}: unknown task {self.task!r}")
        check_gold(self.task, self.gold, self.id)

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "task": self.task, "report_text": self.report_text, "gold": self.gold}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Demonstration:
        return cls(str(d["id"]), d["task"], d.get("report_text", ""), d["gold"])


def _triple_ok(t: Any) -> bool:
    return isinstance(t, dict) and all(isinstance(t.get(k), str) and normalize_space(t[k]) for k in ("subject", "relation", "object"))


def _tagged_ok(t: Any) -> bool:
    if not isinstance(t, dict) or not isinstance(t.get("relation"), str):
        return False
    return all(
        isinstance(t.get(role), dict) and isinstance(t[role].get("text"), str) and isinstance(t[role].get("class"), str)
        for role in ("subject", "object")
    )


def check_gold(task: str, gold: Any, demo_id: str = "?") -> None:
    if task == "extraction":
        ok = isinstance(gold, list) and all(_triple_ok(t) for t in gold)
    elif task == "typing":
        ok = isinstance(gold, list) and bool(gold) and all(
            isinstance(item, dict) and _triple_ok(item.get("triplet")) and _tagged_ok(item.get("tagged_triplet"))
            for item in gold
        )
    else:
        ok = (
            isinstance(gold, dict)
            and isinstance(gold.get("central"), str)
            and isinstance(gold.get("topic"), str)
            and _triple_ok(gold.get("predicted_triple"))
        )
    if not ok:
        raise ModelError(f"demonstration {demo_id!r}: gold does not match the {task} schema")


def load_demonstrations(path: str | Path, task: str | None = None) -> list[Demonstration]:
    """Read a JSON-lines corpus, optionally keeping only one task."""
    demos = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = Demonstration.from_dict(json.loads(line))
        except (KeyError, json.JSONDecodeError) as exc:
            raise ModelError(f"{path}:{n}: bad demonstration line: {exc}") from exc
        if task is None or d.task == task:
            demos.append(d)
    ids = [d.id for d in demos]
    if len(set(ids)) != len(ids):
        raise ModelError(f"{path}: duplicate demonstration ids")
    return demos


def builtin_demonstrations(task: str | None = None) -> list[Demonstration]:
    return load_demonstrations(Path(__file__).parent / "data" / "demos_malont.jsonl", task)


def cosine(a: EmbeddingVector | Sequence[float], b: EmbeddingVector | Sequence[float]) -> float:
    va = a.values if isinstance(a, EmbeddingVector) else tuple(a)
    vb = b.values if isinstance(b, EmbeddingVector) else tuple(b)
    if len(va) != len(vb):
        raise RetrievalError(f"dimension mismatch: {len(va)} vs {len(vb)}")
    na = math.sqrt(math.fsum(x * x for x in va))
    nb = math.sqrt(math.fsum(y * y for y in vb))
    if na == 0.0 or nb == 0.0:
        raise RetrievalError("cosine of a zero-norm vector is undefined")
    c = math.fsum(x * y for x, y in zip(va, vb)) / (na * nb)
    return max(-1.0, min(1.0, c))


class DemoIndex:
    """Immutable (demonstration, embedding) pairs for one task."""

    def __init__(self, entries: Sequence[tuple[Demonstration, EmbeddingVector]]):
        dims = {v.dims for _, v in entries}
        if len(dims) > 1:
            raise RetrievalError(f"mixed embedding dims in index: {sorted(dims)}")
        ids = [d.id for d, _ in entries]
        if len(set(ids)) != len(ids):
            raise RetrievalError("duplicate demonstration ids in index")
        self._entries = tuple(entries)

    @property
    def entries(self) -> tuple[tuple[Demonstration, EmbeddingVector], ...]:
        return self._entries

    def __len__(self) -> int:
        return len(self._entries)


def build_index(corpus: Sequence[Demonstration], gateway: Gateway, tag: str = "index") -> DemoIndex:
    if not corpus:
        raise RetrievalError("cannot index an empty corpus")
    vectors = gateway.embed([d.report_text for d in corpus], tag=tag)
    return DemoIndex(list(zip(corpus, vectors)))


def rank(
    index: DemoIndex,
    query: EmbeddingVector,
    k: int,
    permutation: str = "knn_ascend",
    seed: int = 0,
) -> list[tuple[Demonstration, float]]:
    """Top-``k`` by cosine (ties by id), then arranged per ``permutation``.

    ``knn_ascend`` puts the most similar demonstration last, i.e. adjacent to
    the query once rendered into a prompt.
    """
    if k < 1:
        raise RetrievalError("k must be >= 1")
    scored = [(d, cosine(query, v)) for d, v in index.entries]
    scored.sort(key=lambda item: (-item[1], item[0].id))
    top = scored[:k]
    if permutation == "knn_descend":
        return top
    if permutation == "knn_ascend":
        # stable reverse keeps id order among equal scores reversed, which is
        # the mirror image of the descend order
        return top[::-1]
    if permutation == "random":
        shuffled = list(top)
        random.Random(seed).shuffle(shuffled)
        return shuffled
    raise RetrievalError(f"unknown permutation {permutation!r}")


def retrieve(
    index: DemoIndex,
    query_text: str,
    k: int,
    permutation: str = "knn_ascend",
    *,
    gateway: Gateway,
    seed: int = 0,
    tag: str = "",
) -> list[tuple[Demonstration, float]]:
    (query,) = gateway.embed([query_text], tag=tag)
    return rank(index, query, k, permutation, seed)


def fixed_demos(corpus: Sequence[Demonstration], k: int) -> list[Demonstration]:
    """First ``k`` demonstrations in corpus order (the curated-list mode)."""
    return list(corpus[:k])
