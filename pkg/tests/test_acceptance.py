"""Acceptance gate: ten criteria, each timed against its budget.

A summary line per criterion is printed at the end of the pytest run.
"""

from __future__ import annotations

import json
import random
from collections import deque
from fractions import Fraction
from pathlib import Path

import mpmath
import pytest

from acceptance_log import criterion
from fakes import QUESTION, REPLAY_DIR, ScriptedChat, TableEmbedder, fixture_reports, offline_gateway, query_json
from graphs import AKIRA_CENTRALS, akira_graph, random_graph, star_forest

from ctikg.alignment import EntityGroup, GroupMember, merge_group
from ctikg.completion import centrality_key, complete_graph, connected_components, select_centrals
from ctikg.evaluation import match_triplets, merge_metrics, typing_metrics
from ctikg.extraction import parse_triplet_response
from ctikg.gateway import EmbeddingVector, FixtureStore, Gateway, UsageRecord
from ctikg.model import CtiReport, PipelineConfig, builtin_ontology
from ctikg.parsing import ParseError
from ctikg.pipeline import run_pipeline
from ctikg.retriever import DemoIndex, Demonstration, builtin_demonstrations, cosine, retrieve

mpmath.mp.dps = 50


def mp_cosine(a, b):
    dot = mpmath.fsum(mpmath.mpf(x) * mpmath.mpf(y) for x, y in zip(a, b))
    na = mpmath.sqrt(mpmath.fsum(mpmath.mpf(x) ** 2 for x in a))
    nb = mpmath.sqrt(mpmath.fsum(mpmath.mpf(y) ** 2 for y in b))
    return dot / (na * nb)


def group_of(surfaces):
    return EntityGroup("Information", [GroupMember(s, ((i, "subject"),)) for i, s in enumerate(surfaces)])


def table_gateway(table):
    return Gateway("live", embedder=TableEmbedder(table))


# ---------------------------------------------------------------------------


def test_01_retrieval_oracle():
    rng = random.Random(101)
    with criterion(1, "retrieval equals brute-force cosine top-k", 5.0):
        for trial in range(200):
            dims = rng.randint(1, 64)
            n = rng.randint(1, 50)
            vecs = []
            for i in range(n):
                if vecs and rng.random() < 0.15:
                    vecs.append(list(rng.choice(vecs)))  # exact duplicate: forces a score tie
                else:
                    v = [rng.gauss(0, 1) for _ in range(dims)]
                    if all(x == 0 for x in v):
                        v[0] = 1.0
                    vecs.append(v)
            ids = [f"d{rng.randrange(10**6):06d}-{i}" for i in range(n)]
            demos = [Demonstration(ids[i], "extraction", f"doc {i}", []) for i in range(n)]
            index = DemoIndex([(d, EmbeddingVector.of(v)) for d, v in zip(demos, vecs)])
            query = [rng.gauss(0, 1) for _ in range(dims)]
            gw = table_gateway({"query": query})
            k = rng.randint(1, n)

            ref = {d.id: mp_cosine(query, v) for d, v in zip(demos, vecs)}
            oracle = sorted(ref, key=lambda i: (-ref[i], i))[:k]

            desc = retrieve(index, "query", k, "knn_descend", gateway=gw)
            asc = retrieve(index, "query", k, "knn_ascend", gateway=gw)
            assert [d.id for d, _ in desc] == oracle
            assert {d.id for d, _ in asc} == set(oracle)
            scores = [s for _, s in asc]
            assert all(a <= b for a, b in zip(scores, scores[1:]))
            for d, s in desc:
                assert abs(mpmath.mpf(s) - ref[d.id]) < 1e-12
                assert abs(mpmath.mpf(cosine(query, index.entries[ids.index(d.id)][1])) - ref[d.id]) < 1e-12


# ---------------------------------------------------------------------------


def _synthetic_group(rng: random.Random, size: int, dims: int = 6):
    """Clustered vectors plus a sprinkling of IOC surfaces with known literals."""
    centers = [[rng.gauss(0, 1) for _ in range(dims)] for _ in range(rng.randint(1, 8))]
    surfaces, vectors, ioc = [], [], []
    for i in range(size):
        c = rng.choice(centers)
        vectors.append([x + rng.gauss(0, 0.35) for x in c])
        roll = rng.random()
        if roll < 0.1:
            n = rng.randint(1, 4)
            surfaces.append((f"CVE-2023-{23390 + n}" if rng.random() < 0.5 else f"cve-2023-{23390 + n}"))
            ioc.append(("cve", f"cve-2023-{23390 + n}"))
        elif roll < 0.15:
            n = rng.randint(1, 3)
            surfaces.append(f"10.0.0.{n}")
            ioc.append(("ipv4", f"10.0.0.{n}"))
        else:
            surfaces.append(f"mention {i}")
            ioc.append(None)
    # surfaces are distinct within a group, so repeated IOC forms are dropped
    first = {}
    for i, s in enumerate(surfaces):
        first.setdefault(s, i)
    keep = sorted(first.values())
    return [surfaces[i] for i in keep], [vectors[i] for i in keep], [ioc[i] for i in keep]


def _closure(n, admitted):
    adj = [[] for _ in range(n)]
    for i, j in admitted:
        adj[i].append(j)
        adj[j].append(i)
    seen, parts = [False] * n, set()
    for s in range(n):
        if seen[s]:
            continue
        seen[s] = True
        queue, comp = deque([s]), []
        while queue:
            x = queue.popleft()
            comp.append(x)
            for y in adj[x]:
                if not seen[y]:
                    seen[y] = True
                    queue.append(y)
        parts.add(frozenset(comp))
    return parts


def _oracle_partition(surfaces, vectors, ioc, tau):
    n = len(surfaces)
    norms = [sum(x * x for x in v) ** 0.5 for v in vectors]
    admitted = []
    for i in range(n):
        for j in range(i + 1, n):
            sim = sum(a * b for a, b in zip(vectors[i], vectors[j])) / (norms[i] * norms[j])
            if abs(sim - tau) < 1e-9:
                return None  # too close to the threshold to call
            if sim < tau:
                continue
            if ioc[i] is None and ioc[j] is None or ioc[i] is not None and ioc[i] == ioc[j]:
                admitted.append((i, j))
    return {frozenset(surfaces[x] for x in part) for part in _closure(n, admitted)}


def test_02_clustering_oracle():
    rng = random.Random(202)
    done = 0
    with criterion(2, "merge_group equals brute-force transitive closure", 10.0):
        while done < 200:
            surfaces, vectors, ioc = _synthetic_group(rng, rng.randint(1, 200))
            tau = rng.choice([0.4, 0.5, 0.6, 0.7, 0.8])
            expected = _oracle_partition(surfaces, vectors, ioc, tau)
            if expected is None:
                continue
            gw = table_gateway(dict(zip(surfaces, vectors)))
            clusters = merge_group(group_of(surfaces), gw, tau)
            assert {c.members for c in clusters} == expected
            done += 1


# ---------------------------------------------------------------------------


def test_03_threshold_monotonicity():
    rng = random.Random(303)
    # sparse gaussian vectors: few pairs clear 0.7, many clear 0.4
    surfaces = [f"entity {i}" for i in range(30)]
    table = {s: [rng.gauss(0, 1) for _ in range(8)] for s in surfaces}
    with criterion(3, "cluster count non-increasing as the threshold drops", 2.0):
        counts = []
        for tau in (0.7, 0.6, 0.5, 0.4):
            gw = table_gateway(table)
            counts.append(len(merge_group(group_of(surfaces), gw, tau)))
        assert all(a >= b for a, b in zip(counts, counts[1:])), counts
        assert counts[0] > counts[-1], counts


# ---------------------------------------------------------------------------


def test_04_ioc_guard():
    a, b, bridge = "CVE-2023-23397", "CVE-2023-23392", "Outlook privilege flaw"
    u = [1.0, 0.0, 0.0]
    v = [0.99, (1 - 0.99**2) ** 0.5, 0.0]
    w = [0.995, 0.0998749, 0.0]
    table = {a: u, b: v, bridge: w}
    with criterion(4, "distinct CVE identifiers never co-cluster", 1.0):
        assert abs(cosine(u, v) - 0.99) < 1e-12
        for tau in (0.4, 0.5, 0.6, 0.7):
            for surfaces in ([a, b], [a, b, bridge], [bridge, b, a]):
                clusters = merge_group(group_of(surfaces), table_gateway(table), tau)
                holder = [c for c in clusters if a in c.members]
                assert len(holder) == 1 and b not in holder[0].members


# ---------------------------------------------------------------------------


def test_05_fig5_centrals():
    g = akira_graph()
    with criterion(5, "Akira example: five centrals, topic Akira with degree 6", 1.0):
        sel = select_centrals(connected_components(g), g)
        names = {g.nodes[n].canonical for n in sel.all_centrals()}
        assert names == AKIRA_CENTRALS
        assert len(sel.all_centrals()) == 5
        assert g.nodes[sel.topic].canonical == "Akira"
        assert centrality_key(g, sel.topic)[0] == 6
        assert sel.topic_ties == []


# ---------------------------------------------------------------------------


def _linking_responder(prompt: str) -> str:
    central, topic = QUESTION.match(query_json(prompt)["question"]).groups()
    return json.dumps({"predicted_triple": {"subject": central, "relation": "is linked to", "object": topic}})


def test_06_connectivity(tmp_path):
    rng = random.Random(606)
    graphs = [star_forest(rng, rng.randint(2, 7), prefix=f"g{i}-") for i in range(100)]
    demos = builtin_demonstrations("relation")
    config = PipelineConfig()
    recorder = Gateway("record", store=FixtureStore(tmp_path), chat=ScriptedChat(_linking_responder))
    for i, g in enumerate(graphs):
        complete_graph(g, CtiReport(f"g{i}", f"synthetic report {i}"), demos, config, recorder)
    with criterion(6, "all-success completion connects every component", 5.0):
        for i, g in enumerate(graphs):
            gw = Gateway("replay", store=FixtureStore(tmp_path), chat_model="scripted")
            n_comp = len(connected_components(g))
            done = complete_graph(g, CtiReport(f"g{i}", f"synthetic report {i}"), demos, config, gw)
            assert len(connected_components(done.graph)) == 1
            assert gw.completion_count() == n_comp - 1
            assert all(c.served_from == "fixture" for c in gw.calls)


# ---------------------------------------------------------------------------


def test_07_components_oracle():
    rng = random.Random(707)
    with criterion(7, "connected_components equals undirected reachability", 5.0):
        for _ in range(100):
            g = random_graph(rng, 50, rng.choice([0.005, 0.01, 0.02, 0.04]))
            ids = sorted(g.nodes)
            adj = {n: set() for n in ids}
            for e in g.edges:
                adj[e.source].add(e.target)
                adj[e.target].add(e.source)
            reach = {}
            for s in ids:
                seen, queue = {s}, deque([s])
                while queue:
                    x = queue.popleft()
                    for y in adj[x] - seen:
                        seen.add(y)
                        queue.append(y)
                reach[s] = tuple(sorted(seen))
            expected = sorted(set(reach.values()), key=lambda c: c[0])
            assert [c.node_ids for c in connected_components(g)] == expected


# ---------------------------------------------------------------------------


def test_08_metric_fixtures():
    with criterion(8, "metric worked examples", 1.0):
        gold = [("A", "r", "B"), ("C", "r", "D"), ("E", "r", "F"), ("G", "r", "H")]
        pred = gold[:3] + [("X", "r", "Y"), ("Z", "r", "W")]
        prf = match_triplets(pred, gold)
        assert (prf.tp, prf.fp, prf.fn) == (3, 2, 1)
        assert abs(prf.precision - 0.6) < 1e-9
        assert abs(prf.recall - 0.75) < 1e-9
        assert abs(prf.f1 - 2 * 0.45 / 1.35) < 1e-9
        assert prf.f1_exact == Fraction(2, 3)

        scores = typing_metrics(["A", "A", "B", "B"], ["A", "A", "A", "B"])
        assert abs(scores.accuracy - 0.75) < 1e-9
        assert abs(scores.macro_f1 - (0.8 + 2 / 3) / 2) < 1e-9
        assert abs(scores.micro_f1 - 0.75) < 1e-9

        m = merge_metrics([{"A", "B"}, {"C", "D"}], [{"A", "B", "C"}, {"D"}])
        assert (m.prf.tp, m.prf.fp, m.prf.fn) == (1, 1, 2)
        assert abs(m.prf.precision - 0.5) < 1e-9
        assert abs(m.prf.recall - 1 / 3) < 1e-9
        assert abs(m.prf.f1 - 0.4) < 1e-9
        assert m.entity_count == 2


# ---------------------------------------------------------------------------


def _replay_once(out: Path):
    gw = offline_gateway("replay", REPLAY_DIR)
    runs, manifest = run_pipeline(
        fixture_reports(), builtin_ontology("malont"), builtin_demonstrations(), PipelineConfig(), gw, out,
        fixture_mode="replay-strict",
    )
    return gw, runs, manifest


def test_09_replay_determinism(tmp_path):
    with criterion(9, "strict replay is byte-identical and usage folds exactly", 10.0):
        gw1, runs1, manifest = _replay_once(tmp_path / "one")
        _, runs2, _ = _replay_once(tmp_path / "two")
        assert all(r.failure is None for r in runs1 + runs2)
        files1 = sorted(p.relative_to(tmp_path / "one") for p in (tmp_path / "one").rglob("*") if p.is_file())
        files2 = sorted(p.relative_to(tmp_path / "two") for p in (tmp_path / "two").rglob("*") if p.is_file())
        assert files1 == files2
        assert sum(1 for f in files1 if f.name == "graph.json") == 3
        for f in files1:
            assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes(), f

        store = FixtureStore(REPLAY_DIR)
        folded = UsageRecord()
        for call in gw1.calls:
            folded = folded + UsageRecord.from_dict(store.read(call.request_hash)["usage"])
        assert manifest["usage"]["total"] == folded.to_dict()
        assert {c.request_hash for c in gw1.calls} == set(store.hashes())


# ---------------------------------------------------------------------------


PAYLOAD = [
    {"subject": "Akira", "relation": "encrypts", "object": "files"},
    {"subject": "Akira ransomware group", "relation": "targets", "object": "Cisco VPN accounts"},
]


def test_10_parser_robustness():
    with criterion(10, "parser agrees across bare, fenced and wrapped forms", 1.0):
        bare = json.dumps(PAYLOAD)
        forms = [
            bare,
            "Sure, here you go:\n```json\n" + json.dumps(PAYLOAD, indent=2) + "\n```\nLet me know.",
            "```\n" + bare + "\n```",
            json.dumps({"triplets": PAYLOAD}),
            "Result: " + json.dumps({"triplets": PAYLOAD}) + " done",
        ]
        parsed = [parse_triplet_response(f) for f in forms]
        assert all(p == parsed[0] for p in parsed)
        assert [t.key() for t in parsed[0]] == [(d["subject"], d["relation"], d["object"]) for d in PAYLOAD]

        for field in ("subject", "relation", "object"):
            broken = [dict(PAYLOAD[0]), {k: v for k, v in PAYLOAD[1].items() if k != field}]
            for text in (json.dumps(broken), "```json\n" + json.dumps(broken) + "\n```"):
                with pytest.raises(ParseError) as err:
                    parse_triplet_response(text)
                assert err.value.diagnostic == f"entry 1 is missing field {field!r}"
