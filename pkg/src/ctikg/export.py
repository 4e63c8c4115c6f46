"""DOT and GraphML writers for :class:`~ctikg.model.KnowledgeGraph`."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path

from .model import KnowledgeGraph

FORMATS = ("json", "dot", "graphml")


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def to_dot(g: KnowledgeGraph, name: str = "cskg") -> str:
    """Inferred edges are dashed and carry ``provenance="inferred"``."""
    lines = [f"digraph {_dot_quote(name)} {{", "  node [shape=box];"]
    for nid in sorted(g.nodes):
        n = g.nodes[nid]
        attrs = [f"label={_dot_quote(n.canonical)}", f"entity_type={_dot_quote(n.entity_type)}"]
        if n.ioc_class:
            attrs.append(f"ioc_class={_dot_quote(n.ioc_class)}")
        lines.append(f"  {_dot_quote(nid)} [{', '.join(attrs)}];")
    for e in sorted(g.edges, key=lambda e: (e.source, e.relation, e.target)):
        attrs = [f"label={_dot_quote(e.relation)}", f"provenance={_dot_quote(e.provenance)}"]
        if e.provenance == "inferred":
            attrs.append("style=dashed")
        lines.append(f"  {_dot_quote(e.source)} -> {_dot_quote(e.target)} [{', '.join(attrs)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


_NODE_KEYS = (("canonical", "string"), ("entity_type", "string"), ("aliases", "string"), ("ioc_class", "string"))
_EDGE_KEYS = (("relation", "string"), ("provenance", "string"))


def to_graphml(g: KnowledgeGraph) -> str:
    ns = "http://graphml.graphdrawing.org/xmlns"
    root = ET.Element("graphml", {"xmlns": ns})
    for domain, keys in (("node", _NODE_KEYS), ("edge", _EDGE_KEYS)):
        for name, typ in keys:
            ET.SubElement(root, "key", {"id": f"{domain[0]}_{name}", "for": domain, "attr.name": name, "attr.type": typ})
    graph = ET.SubElement(root, "graph", {"id": "cskg", "edgedefault": "directed"})
    for nid in sorted(g.nodes):
        n = g.nodes[nid]
        el = ET.SubElement(graph, "node", {"id": nid})
        values = {"canonical": n.canonical, "entity_type": n.entity_type, "aliases": "|".join(sorted(n.aliases)), "ioc_class": n.ioc_class}
        for name, _ in _NODE_KEYS:
            if values[name] is not None:
                ET.SubElement(el, "data", {"key": f"n_{name}"}).text = values[name]
    for i, e in enumerate(sorted(g.edges, key=lambda e: (e.source, e.relation, e.target))):
        el = ET.SubElement(graph, "edge", {"id": f"x{i}", "source": e.source, "target": e.target})
        ET.SubElement(el, "data", {"key": "e_relation"}).text = e.relation
        ET.SubElement(el, "data", {"key": "e_provenance"}).text = e.provenance
    ET.indent(root)
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"


def write_graph(g: KnowledgeGraph, path: str | Path, fmt: str) -> Path:
    path = Path(path)
    if fmt == "json":
        text = g.to_json()
    elif fmt == "dot":
        text = to_dot(g)
    elif fmt == "graphml":
        text = to_graphml(g)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    path.write_text(text, encoding="utf-8")
    return path
