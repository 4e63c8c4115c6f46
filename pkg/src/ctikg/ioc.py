"""Indicator-of-compromise recognition for the merge guard.

Patterns ship in ``data/ioc_patterns.json`` as ``{"precedence": [...],
"patterns": {class: regex}}``; every pattern is anchored and tested against
the whole (trimmed) mention surface.
"""

from __future__ import annotations

import ipaddress
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

DEFAULT_PATTERNS = Path(__file__).parent / "data" / "ioc_patterns.json"
IOC_CLASSES = (
    "cve", "url", "email", "ipv4", "ipv6", "sha256", "sha1", "md5", "domain", "registry_key", "file_path",
)


@dataclass(frozen=True)
class IocClass:
    name: str
    pattern: str

    def __post_init__(self) -> None:
        if not (self.pattern.startswith("^") and self.pattern.endswith("$")):
            raise ValueError(f"IOC pattern for {self.name!r} must be anchored with ^...$")

    @property
    def regex(self) -> re.Pattern[str]:
        return _compile(self.pattern)


@lru_cache(maxsize=None)
def _compile(pattern: str) -> re.Pattern[str]:
    return re.compile(pattern)


class IocCatalog:
    def __init__(self, classes: list[IocClass]):
        if len({c.name for c in classes}) != len(classes):
            raise ValueError("duplicate IOC class names")
        self.classes = classes

    @classmethod
    def load(cls, path: str | Path = DEFAULT_PATTERNS) -> IocCatalog:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        patterns = data["patterns"]
        order = data.get("precedence", list(patterns))
        return cls([IocClass(name, patterns[name]) for name in order])

    def detect(self, surface: str) -> str | None:
        s = surface.strip()
        for c in self.classes:
            if c.regex.match(s):
                return c.name
        return None


@lru_cache(maxsize=1)
def default_catalog() -> IocCatalog:
    return IocCatalog.load()


def detect_ioc(surface: str, catalog: IocCatalog | None = None) -> str | None:
    """IOC class of ``surface`` by fixed precedence, or ``None``."""
    return (catalog or default_catalog()).detect(surface)


def normalize_ioc(surface: str, ioc_class: str) -> str:
    """Literal used for IOC identity. File paths and URLs are compared verbatim."""
    s = surface.strip()
    if ioc_class in ("cve", "md5", "sha1", "sha256", "email", "registry_key"):
        return s.casefold()
    if ioc_class == "domain":
        return s.rstrip(".").casefold()
    if ioc_class == "ipv6":
        try:
            return ipaddress.IPv6Address(s).compressed
        except ValueError:
            return s.casefold()
    return s


def ioc_compatible(a: str, b: str, catalog: IocCatalog | None = None) -> bool:
    """Whether the merge guard admits linking mentions ``a`` and ``b``.

    Two non-IOC mentions are always admissible. An IOC mention links only to
    a mention of the same IOC class with the same normalized literal, which
    keeps IOCs out of clusters formed through non-IOC intermediaries.
    """
    ca, cb = detect_ioc(a, catalog), detect_ioc(b, catalog)
    if ca is None and cb is None:
        return True
    if ca != cb:
        return False
    return normalize_ioc(a, ca) == normalize_ioc(b, cb)  # type: ignore[arg-type]
