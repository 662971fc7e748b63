import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaqr.errors import DataError
from adaqr.retrieval import (
    RankedList,
    cosine_similarity,
    evaluate,
    ndcg_at_k,
    read_run,
    retrieve_batch,
    retrieve_topk,
    write_run,
)
from adaqr.store import Corpus, Document, RelevanceJudgments, as_embedding

from oracles import brute_ndcg, full_sort_topk


def _corpus(rng, n, dim):
    return Corpus([Document(f"d{i:03d}", "", as_embedding(rng.standard_normal(dim))) for i in range(n)])


def test_cosine_similarity_basic():
    assert cosine_similarity([1, 0], [0, 2]) == pytest.approx(0.0)
    assert cosine_similarity([1, 1], [2, 2]) == pytest.approx(1.0)
    with pytest.raises(DataError):
        cosine_similarity([0, 0], [1, 0])


@pytest.mark.parametrize("similarity", ["cosine", "dot"])
def test_topk_matches_full_sort(rng, similarity):
    c = _corpus(rng, 200, 8)
    for _ in range(20):
        q = rng.standard_normal(8)
        got = retrieve_topk(q, c, 10, similarity).doc_ids
        assert got == full_sort_topk(q, c.matrix, c.ids, 10, similarity)


def test_ties_break_on_ascending_id():
    e = as_embedding([1.0, 0.0])
    c = Corpus([Document(i, "", e) for i in ("c", "a", "b")] + [Document("z", "", as_embedding([0.0, 1.0]))])
    assert retrieve_topk([1.0, 0.0], c, 2).doc_ids == ["a", "b"]
    assert retrieve_topk([1.0, 0.0], c, 10).doc_ids == ["a", "b", "c", "z"]


def test_topk_edge_cases(rng):
    assert retrieve_topk([1.0], Corpus([]), 5).items == ()
    with pytest.raises(ValueError):
        retrieve_topk([1.0, 0.0], _corpus(rng, 3, 2), 0)
    with pytest.raises(DataError):
        retrieve_topk([1.0, 0.0, 0.0], _corpus(rng, 3, 2), 1)


def test_batch_preserves_order(rng):
    c = _corpus(rng, 50, 4)
    qs = {f"q{i}": rng.standard_normal(4) for i in range(6)}
    one = retrieve_batch(qs, c, 5, workers=1)
    many = retrieve_batch(qs, c, 5, workers=3)
    assert [r.query_id for r in many] == list(qs)
    assert one == many


def test_ndcg_known_values():
    j = RelevanceJudgments({"q": {"a": 3, "b": 1, "c": 0}})
    assert ndcg_at_k(RankedList("q", (("a", 1.0), ("b", 0.5))), j, 10) == pytest.approx(1.0)
    reversed_ = ndcg_at_k(RankedList("q", (("b", 1.0), ("a", 0.5))), j, 10)
    expected = (1 + 7 / np.log2(3)) / (7 + 1 / np.log2(3))
    assert reversed_ == pytest.approx(expected, abs=1e-12)
    # unjudged documents count as zero
    assert ndcg_at_k(RankedList("q", (("x", 1.0),)), j, 10) == 0.0


ranking_cases = st.integers(min_value=1, max_value=50).flatmap(
    lambda n: st.tuples(
        st.permutations([f"d{i}" for i in range(n)]),
        st.lists(st.integers(0, 3), min_size=n, max_size=n),
        st.integers(1, 20),
    )
)


@settings(max_examples=200, deadline=None)
@given(ranking_cases)
def test_ndcg_matches_brute_force(case):
    order, grade_list, k = case
    grades = {f"d{i}": g for i, g in enumerate(grade_list)}
    j = RelevanceJudgments({"q": grades})
    rl = RankedList("q", tuple((d, 0.0) for d in order))
    got = ndcg_at_k(rl, j, k)
    assert abs(got - brute_ndcg(list(order), grades, k)) <= 1e-9
    assert 0.0 <= got <= 1.0 + 1e-12


def test_evaluate_excludes_zero_ideal_queries():
    j = RelevanceJudgments({"q1": {"a": 1}, "q2": {"a": 0}})
    rl = [RankedList("q1", (("a", 1.0),)), RankedList("q2", (("a", 1.0),))]
    rep = evaluate(rl, j, 10, tags={"q1": "x", "q2": "y"})
    assert rep.excluded == ["q2"]
    assert rep.mean_ndcg == 1.0 and rep.per_tag == {"x": 1.0}
    with pytest.raises(DataError):
        evaluate([rl[1]], j, 10)
    with pytest.raises(DataError):
        evaluate([RankedList("zz", ())], j, 10)


def test_eval_report_write(tmp_path):
    j = RelevanceJudgments({"q1": {"a": 1}})
    rep = evaluate([RankedList("q1", (("a", 1.0),))], j, 10)
    rep.write(tmp_path / "ev")
    assert "mean_ndcg = 1.000000" in (tmp_path / "ev.txt").read_text()
    assert '"mean_ndcg": 1.0' in (tmp_path / "ev.json").read_text()


def test_run_file_round_trip(tmp_path, rng):
    c = _corpus(rng, 30, 4)
    runs = [retrieve_topk(rng.standard_normal(4), c, 5, query_id=f"q{i}") for i in range(3)]
    p = tmp_path / "run.trec"
    write_run(runs, p)
    back = read_run(p)
    assert [r.doc_ids for r in back] == [r.doc_ids for r in runs]
    write_run(back, tmp_path / "again.trec")
    assert p.read_bytes() == (tmp_path / "again.trec").read_bytes()
    first = p.read_text().splitlines()[0].split()
    assert first[1] == "Q0" and first[3] == "1"
