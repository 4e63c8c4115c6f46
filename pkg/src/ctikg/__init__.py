"""Cybersecurity knowledge-graph construction from CTI report text."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    CtiReport,
    Edge,
    EntityNode,
    KnowledgeGraph,
    Mention,
    Ontology,
    PipelineConfig,
    RawTriplet,
    TypedTriplet,
    validate_graph,
)
from .gateway import Gateway  # noqa: E402
from .pipeline import run_pipeline  # noqa: E402

__all__ = [
    "CtiReport",
    "Edge",
    "EntityNode",
    "Gateway",
    "KnowledgeGraph",
    "Mention",
    "Ontology",
    "PipelineConfig",
    "RawTriplet",
    "TypedTriplet",
    "run_pipeline",
    "validate_graph",
]
