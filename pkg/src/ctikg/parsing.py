"""Recovering JSON payloads from free-form model output."""

from __future__ import annotations

import json
import re
from typing import Any, Iterator

_FENCE = re.compile(r"```[ \t]*(?:json|JSON)?[ \t]*\n?(.*?)```", re.DOTALL)
_decoder = json.JSONDecoder()


class ParseError(ValueError):
    """No usable payload, or a payload that fails its schema. ``diagnostic`` says which."""

    def __init__(self, diagnostic: str):
        super().__init__(diagnostic)
        self.diagnostic = diagnostic


def json_candidates(text: str) -> Iterator[Any]:
    """Yield decoded JSON values: fenced blocks, then the whole text, then embedded values."""
    for m in _FENCE.finditer(text):
        body = m.group(1).strip()
        try:
            yield json.loads(body)
        except json.JSONDecodeError:
            continue
    stripped = text.strip()
    try:
        yield json.loads(stripped)
        return
    except json.JSONDecodeError:
        pass
    pos = 0
    while True:
        starts = [i for i in (stripped.find("[", pos), stripped.find("{", pos)) if i >= 0]
        if not starts:
            return
        i = min(starts)
        try:
            value, end = _decoder.raw_decode(stripped, i)
        except json.JSONDecodeError:
            pos = i + 1
            continue
        yield value
        pos = end


def as_array(value: Any) -> list[Any] | None:
    """A list, or the single list-valued field of an object; ``None`` otherwise."""
    if isinstance(value, list):
        return value
    if isinstance(value, dict):
        arrays = [v for v in value.values() if isinstance(v, list)]
        if len(arrays) == 1:
            return arrays[0]
    return None


def find_array(text: str) -> list[Any]:
    """First recoverable array, preferring one whose elements are all objects."""
    fallback: list[Any] | None = None
    for value in json_candidates(text):
        arr = as_array(value)
        if arr is None:
            continue
        if all(isinstance(x, dict) for x in arr):
            return arr
        if fallback is None:
            fallback = arr
    if fallback is not None:
        return fallback
    raise ParseError("no JSON array found in response")
