"""In-context-learning prompt assembly for extraction, typing and relation prediction.

Templates live in ``templates/<task>.txt``. A template file is split into
``[instruction]``, ``[demo]`` and ``[query]`` sections and uses
:class:`string.Template` slots (``${name}``). Rendering is a pure function of
its inputs.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from string import Template
from typing import Any, Sequence

from .model import Ontology, RawTriplet

TEMPLATE_DIR = Path(__file__).parent / "templates"
PLACEHOLDER = "insert your answer here"

# characters per token, a coarse stand-in for a real tokenizer
TOKENIZER_TABLE: dict[str, float] = {
    "default": 4.0,
    "gpt-4": 4.0,
    "gpt-3.5-turbo": 4.0,
    "llama3": 3.8,
    "qwen2.5": 3.6,
}

_SECTION = re.compile(r"^\[(\w+)\]\s*$", re.MULTILINE)


@lru_cache(maxsize=None)
def load_template(task: str, directory: str | None = None) -> dict[str, Template]:
    path = Path(directory or TEMPLATE_DIR) / f"{task}.txt"
    text = path.read_text(encoding="utf-8")
    parts = _SECTION.split(text)
    # parts[0] is the comment preamble
    sections = {name: body.strip("\n") for name, body in zip(parts[1::2], parts[2::2])}
    missing = {"instruction", "query"} - sections.keys()
    if missing:
        raise ValueError(f"template {path} lacks sections {sorted(missing)}")
    return {name: Template(body) for name, body in sections.items()}


def estimate_tokens(text: str, model: str = "default") -> int:
    ratio = TOKENIZER_TABLE.get(model, TOKENIZER_TABLE["default"])
    return math.ceil(len(text) / ratio)


def _json(obj: Any) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False)


@dataclass(frozen=True)
class PromptParts:
    task: str
    instruction: str
    demonstrations: tuple[str, ...]
    query_block: str

    def render(self) -> str:
        return "\n\n".join([self.instruction, *self.demonstrations, self.query_block]) + "\n"

    def estimate_tokens(self, model: str = "default") -> int:
        return estimate_tokens(self.render(), model)


def _ontology_types(ontology: Ontology) -> str:
    return _json(ontology.prompt_types())


def _relation_guidance(ontology: Ontology) -> str:
    if ontology.open_relations:
        return "Relations are open-ended: describe each relation with a short verb phrase grounded in the report."
    return "Relations must use one of these labels: " + json.dumps(list(ontology.relation_types), ensure_ascii=False)


def build_extraction_prompt(ontology: Ontology, demos: Sequence[Any], report_text: str) -> PromptParts:
    """``demos`` are Demonstrations (or ``(Demonstration, score)`` pairs) already in final order."""
    t = load_template("extraction")
    instruction = t["instruction"].substitute(
        entity_types=_ontology_types(ontology), relation_guidance=_relation_guidance(ontology)
    ).rstrip()
    blocks = []
    for n, demo in enumerate(_unscored(demos), 1):
        blocks.append(t["demo"].substitute(number=n, report_text=demo.report_text, gold=_json(demo.gold)))
    query = t["query"].substitute(report_text=report_text)
    return PromptParts("extraction", instruction, tuple(blocks), query)


def typing_item(triplet: RawTriplet) -> dict[str, Any]:
    return {"triplet": triplet.to_dict(), "tagged_triplet": PLACEHOLDER}


def build_typing_prompt(ontology: Ontology, demos: Sequence[Any], triplets: Sequence[RawTriplet]) -> PromptParts:
    if not triplets:
        raise ValueError("typing prompt needs at least one triplet")
    t = load_template("typing")
    instruction = t["instruction"].substitute(entity_types=_ontology_types(ontology))
    blocks = [t["demo"].substitute(number=n, pairs=_json(d.gold)) for n, d in enumerate(_unscored(demos), 1)]
    query = t["query"].substitute(items=_json([typing_item(tr) for tr in triplets]))
    return PromptParts("typing", instruction, tuple(blocks), query)


def relation_question(central: str, topic: str) -> str:
    return f'What is the relationship between "{central}" and "{topic}"?'


def build_relation_prompt(report_text: str, demos: Sequence[Any], central: str, topic: str) -> PromptParts:
    if central == topic:
        raise ValueError("central and topic entities must differ")
    t = load_template("relation")
    instruction = t["instruction"].substitute()
    blocks = []
    for n, d in enumerate(_unscored(demos), 1):
        block = {
            "context": d.report_text,
            "question": relation_question(d.gold["central"], d.gold["topic"]),
            "predicted_triple": d.gold["predicted_triple"],
        }
        blocks.append(t["demo"].substitute(number=n, block=_json(block)))
    query_block = {"context": report_text, "question": relation_question(central, topic), "predicted_triple": PLACEHOLDER}
    return PromptParts("relation", instruction, tuple(blocks), t["query"].substitute(block=_json(query_block)))


def build_judge_prompt(pred: tuple[str, str, str], gold: tuple[str, str, str]) -> PromptParts:
    t = load_template("judge")
    fmt = lambda x: json.dumps(dict(zip(("subject", "relation", "object"), x)), ensure_ascii=False)  # noqa: E731
    return PromptParts("judge", t["instruction"].substitute(), (), t["query"].substitute(pred=fmt(pred), gold=fmt(gold)))


def _unscored(demos: Sequence[Any]) -> list[Any]:
    return [d[0] if isinstance(d, tuple) else d for d in demos]
