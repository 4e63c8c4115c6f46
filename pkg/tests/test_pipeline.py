import json


from build_replay_fixtures import record
from fakes import REPLAY_DIR, fixture_reports, offline_gateway

from ctikg.gateway import MissingFixture
from ctikg.model import PipelineConfig, builtin_ontology, validate_graph
from ctikg.pipeline import run_pipeline
from ctikg.retriever import builtin_demonstrations


def pipeline(gateway, out, **kw):
    return run_pipeline(fixture_reports(), builtin_ontology("malont"), builtin_demonstrations(), PipelineConfig(), gateway, out, **kw)


def test_committed_fixtures_are_fresh(tmp_path):
    """Re-recording the fixture corpus reproduces the committed replay directory byte for byte."""
    record(tmp_path / "replay")
    fresh = {p.name: p.read_bytes() for p in (tmp_path / "replay").glob("*.json")}
    committed = {p.name: p.read_bytes() for p in REPLAY_DIR.glob("*.json")}
    assert fresh.keys() == committed.keys()
    assert fresh == committed


def test_artifacts_and_graphs(tmp_path):
    runs, manifest = pipeline(offline_gateway("replay", REPLAY_DIR), tmp_path, exports=("json", "dot"))
    assert [r.report.id for r in runs] == ["akira", "androxgh0st", "outlook"]
    for run in runs:
        assert run.failure is None and validate_graph(run.graph) == []
        names = {p.split("/", 1)[1] for p in manifest["outputs"][run.report.id]}
        assert names == {
            "extraction.json", "raw_response.txt", "alignment.json", "graph_aligned.json",
            "completion.json", "graph.json", "graph.dot", "prediction.json",
        }
    calls = json.loads((tmp_path / "outlook" / "completion.json").read_text())["calls"]
    assert [c["status"] for c in calls] == ["off_entity", "linked"]
    assert calls[0]["edge"] is None and calls[1]["edge"]["provenance"] == "inferred"


def test_usage_partition(tmp_path):
    gw = offline_gateway("live", None)
    _, manifest = pipeline(gw, tmp_path)
    usage = manifest["usage"]
    for key in ("prompt_tokens", "completion_tokens"):
        summed = sum(u[key] for rep in usage["per_report"].values() for u in rep.values())
        assert summed + usage["demo_index"][key] == usage["total"][key]


def test_stops_at_first_failed_report(tmp_path):
    # a different k changes the extraction prompt, which strict replay has never seen
    gw = offline_gateway("replay", REPLAY_DIR)
    cfg = PipelineConfig(k_extract=1)
    runs, manifest = run_pipeline(fixture_reports(), builtin_ontology("malont"), builtin_demonstrations(), cfg, gw, tmp_path)
    assert len(runs) == 1
    (run,) = runs
    assert run.failure is not None and run.failure.phase == "extraction"
    assert isinstance(run.failure.cause, MissingFixture)
    assert manifest["status"]["akira"].startswith("failed in extraction")
    assert (tmp_path / "akira" / "failure.txt").is_file()
    assert not (tmp_path / "androxgh0st").exists()
