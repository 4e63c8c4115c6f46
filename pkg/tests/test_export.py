import xml.etree.ElementTree as ET

import pytest

from ctikg.export import to_dot, to_graphml, write_graph
from ctikg.model import Edge, EntityNode, KnowledgeGraph

NS = {"g": "http://graphml.graphdrawing.org/xmlns"}


def graph():
    g = KnowledgeGraph()
    a = g.add_node(EntityNode.create("Akira", "Malware", {"akira"}))
    b = g.add_node(EntityNode.create('say "hi"', "Information"))
    c = g.add_node(EntityNode.create("CVE-2023-23397", "Vulnerability", ioc_class="cve"))
    g.add_edge(Edge(a.id, b.id, "prints"))
    g.add_edge(Edge(a.id, c.id, "exploits", "inferred"))
    return g


def test_dot_marks_inferred_edges():
    dot = to_dot(graph())
    lines = [l for l in dot.splitlines() if "->" in l]
    assert len(lines) == 2
    (inferred,) = [l for l in lines if "exploits" in l]
    assert 'provenance="inferred"' in inferred and "style=dashed" in inferred
    (extracted,) = [l for l in lines if "prints" in l]
    assert 'provenance="extracted"' in extracted and "dashed" not in extracted
    assert r'label="say \"hi\""' in dot and 'ioc_class="cve"' in dot


def test_graphml_parses():
    g = graph()
    root = ET.fromstring(to_graphml(g).split("\n", 1)[1])
    nodes = root.findall("g:graph/g:node", NS)
    edges = root.findall("g:graph/g:edge", NS)
    assert {n.get("id") for n in nodes} == set(g.nodes)
    assert len(edges) == 2
    prov = {e.find("g:data[@key='e_relation']", NS).text: e.find("g:data[@key='e_provenance']", NS).text for e in edges}
    assert prov == {"prints": "extracted", "exploits": "inferred"}
    akira = next(n for n in nodes if n.find("g:data[@key='n_canonical']", NS).text == "Akira")
    assert akira.find("g:data[@key='n_aliases']", NS).text == "Akira|akira"


def test_write_graph(tmp_path):
    g = graph()
    assert KnowledgeGraph.load(write_graph(g, tmp_path / "g.json", "json")).to_json() == g.to_json()
    assert write_graph(g, tmp_path / "g.dot", "dot").read_text().startswith("digraph")
    with pytest.raises(ValueError, match="unknown export format"):
        write_graph(g, tmp_path / "g.png", "png")
