import pytest
from hypothesis import given, settings, strategies as st

from fakes import HashingEmbedder, TableEmbedder

from ctikg.gateway import EmbeddingVector, Gateway
from ctikg.model import ModelError
from ctikg.retriever import (
    DemoIndex,
    Demonstration,
    RetrievalError,
    build_index,
    builtin_demonstrations,
    cosine,
    fixed_demos,
    load_demonstrations,
    rank,
    retrieve,
)


def demo(i, text="t"):
    return Demonstration(i, "extraction", text, [])


def index_of(vectors):
    return DemoIndex([(demo(i), EmbeddingVector.of(v)) for i, v in vectors.items()])


class TestCorpus:
    def test_builtin_counts(self):
        demos = builtin_demonstrations()
        assert {d.task for d in demos} == {"extraction", "typing", "relation"}
        assert len(builtin_demonstrations("typing")) == 8
        assert len(builtin_demonstrations("relation")) >= 2

    def test_gold_schema_enforced(self):
        with pytest.raises(ModelError):
            Demonstration("x", "extraction", "t", [{"subject": "a", "relation": "r"}])
        with pytest.raises(ModelError):
            Demonstration("x", "typing", "", [])
        with pytest.raises(ModelError):
            Demonstration("x", "relation", "t", {"central": "a", "topic": "b"})
        with pytest.raises(ModelError):
            Demonstration("x", "summarize", "t", [])

    def test_load_rejects_duplicates(self, tmp_path):
        line = '{"id": "a", "task": "extraction", "report_text": "t", "gold": []}\n'
        (tmp_path / "d.jsonl").write_text(line * 2)
        with pytest.raises(ModelError, match="duplicate"):
            load_demonstrations(tmp_path / "d.jsonl")

    def test_load_reports_bad_line(self, tmp_path):
        (tmp_path / "d.jsonl").write_text("{not json\n")
        with pytest.raises(ModelError, match=":1:"):
            load_demonstrations(tmp_path / "d.jsonl")

    def test_fixed_demos_is_corpus_order(self):
        corpus = [demo("c"), demo("a"), demo("b")]
        assert [d.id for d in fixed_demos(corpus, 2)] == ["c", "a"]


class TestCosine:
    def test_basic(self):
        assert cosine([1, 0], [0, 1]) == 0.0
        assert cosine([1, 1], [2, 2]) == pytest.approx(1.0)
        assert -1.0 <= cosine([1e-300, 1], [-1e-300, -1]) <= 1.0

    def test_errors(self):
        with pytest.raises(RetrievalError):
            cosine([1, 0], [1, 0, 0])
        with pytest.raises(RetrievalError):
            cosine([0, 0], [1, 0])


class TestRank:
    vectors = {"d1": [1.0, 0.0], "d2": [0.8, 0.6], "d3": [0.0, 1.0], "d0": [0.8, 0.6]}

    def test_descend_ties_by_id(self):
        out = rank(index_of(self.vectors), EmbeddingVector.of([1.0, 0.0]), 3, "knn_descend")
        assert [d.id for d, _ in out] == ["d1", "d0", "d2"]

    def test_ascend_puts_best_last(self):
        out = rank(index_of(self.vectors), EmbeddingVector.of([1.0, 0.0]), 3, "knn_ascend")
        assert [d.id for d, _ in out] == ["d2", "d0", "d1"]

    def test_random_is_seeded_permutation_of_top_k(self):
        idx = index_of(self.vectors)
        q = EmbeddingVector.of([1.0, 0.0])
        a = rank(idx, q, 3, "random", seed=5)
        assert a == rank(idx, q, 3, "random", seed=5)
        assert {d.id for d, _ in a} == {"d0", "d1", "d2"}

    def test_k_larger_than_corpus(self):
        assert len(rank(index_of(self.vectors), EmbeddingVector.of([0.0, 1.0]), 10)) == 4

    def test_bad_arguments(self):
        idx = index_of(self.vectors)
        with pytest.raises(RetrievalError):
            rank(idx, EmbeddingVector.of([1.0, 0.0]), 0)
        with pytest.raises(RetrievalError):
            rank(idx, EmbeddingVector.of([1.0, 0.0]), 1, "shuffle")

    def test_index_rejects_mixed_dims_and_dupes(self):
        with pytest.raises(RetrievalError):
            DemoIndex([(demo("a"), EmbeddingVector.of([1.0])), (demo("b"), EmbeddingVector.of([1.0, 0.0]))])
        with pytest.raises(RetrievalError):
            DemoIndex([(demo("a"), EmbeddingVector.of([1.0])), (demo("a"), EmbeddingVector.of([2.0]))])

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3).filter(lambda v: any(abs(x) > 1e-3 for x in v)), min_size=1, max_size=12),
        st.integers(1, 12),
    )
    def test_ascend_is_reverse_of_descend(self, vecs, k):
        idx = index_of({f"d{i:02d}": v for i, v in enumerate(vecs)})
        q = EmbeddingVector.of([1.0, 0.5, -0.25])
        desc = rank(idx, q, k, "knn_descend")
        asc = rank(idx, q, k, "knn_ascend")
        assert asc == desc[::-1]
        scores = [s for _, s in desc]
        assert scores == sorted(scores, reverse=True)


def test_retrieve_through_gateway():
    corpus = [demo("a", "akira ransomware encrypts"), demo("b", "phishing email lure"), demo("c", "ransomware leak site")]
    gw = Gateway(embedder=HashingEmbedder())
    idx = build_index(corpus, gw, tag="index/extraction")
    out = retrieve(idx, "new ransomware family", 2, "knn_ascend", gateway=gw, tag="q")
    assert len(out) == 2 and out[-1][1] >= out[0][1]
    assert gw.usage("index/").prompt_tokens > 0 and gw.usage("q").prompt_tokens > 0


def test_build_index_empty():
    with pytest.raises(RetrievalError):
        build_index([], Gateway(embedder=TableEmbedder({})))
