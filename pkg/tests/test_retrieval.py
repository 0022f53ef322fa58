import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ndcg_reference import acc1, ndcg5, prec5
from tonel.cim_noise import get_profile
from tonel.errors import KTooLarge, KTooSmall, MissingText, QueryMismatch, ShapeMismatch
from tonel.retrieval import (
    EvalReport,
    IdentityProjector,
    OracleRanking,
    acc_at_1,
    assemble_prompt,
    make_grid,
    mips_topk,
    mips_topk_batch,
    ndcg_at_5,
    oracle_rankings,
    per_query_ndcg_at_5,
    prec_at_5,
    random_rankings,
    reports_to_csv,
    run_experiment,
)


def brute_force_topk(docs, q, k):
    scores = [(-float(np.dot(np.float64(d), np.float64(q))), i) for i, d in enumerate(docs)]
    return [i for _, i in sorted(scores)[:k]]


def test_basis_docs():
    r = mips_topk(np.eye(4), np.eye(4)[2], 1)
    assert r.indices.tolist() == [2] and r.scores.tolist() == [1.0]


def test_identical_docs_tie_rule():
    assert mips_topk(np.ones((6, 3)), np.ones(3), 3).indices.tolist() == [0, 1, 2]


@pytest.mark.parametrize("seed", range(20))
def test_random_instances_match_brute_force(seed):
    gen = np.random.default_rng(seed)
    n, d = int(gen.integers(5, 400)), int(gen.integers(1, 64))
    docs = gen.standard_normal((n, d)).astype(np.float32)
    if seed % 3 == 0:
        docs = np.round(docs)  # many exact ties
        docs[: n // 2] = docs[n // 2: 2 * (n // 2)]
    q = gen.standard_normal(d).astype(np.float32)
    k = int(gen.integers(1, n + 1))
    r = mips_topk(docs, q, k)
    assert r.indices.tolist() == brute_force_topk(docs, q, k)
    assert (np.diff(r.scores) <= 0).all()
    assert len(set(r.indices.tolist())) == k


def test_errors():
    with pytest.raises(KTooLarge):
        mips_topk(np.eye(3), np.ones(3), 4)
    with pytest.raises(ShapeMismatch):
        mips_topk(np.eye(3), np.ones(2), 1)


def test_oracle_single_doc():
    o = oracle_rankings(np.ones((1, 3)), np.random.default_rng(0).standard_normal((4, 3)))
    assert o.rankings.tolist() == [[0]] * 4


def test_oracle_finds_planted_winner():
    gen = np.random.default_rng(0)
    docs = gen.standard_normal((50, 8))
    docs /= np.linalg.norm(docs, axis=1, keepdims=True)
    docs[17] *= 3.0  # longest document, query along it
    o = oracle_rankings(docs, docs[17:18])
    assert o.rankings[0, 0] == 17


def test_oracle_rows_are_permutations(rng):
    o = oracle_rankings(rng.standard_normal((30, 4)), rng.standard_normal((5, 4)))
    assert all(sorted(r) == list(range(30)) for r in o.rankings.tolist())


def test_self_metrics_are_one(rng):
    docs, qs = rng.standard_normal((40, 6)), rng.standard_normal((9, 6))
    o = oracle_rankings(docs, qs)
    assert acc_at_1(o.top(5), o) == prec_at_5(o.top(5), o) == ndcg_at_5(o.top(5), o) == 1.0


def test_reversed_oracle():
    o = OracleRanking(np.array([np.arange(8)]))
    rev = np.array([np.arange(8)[::-1]])
    assert acc_at_1(rev, o) == 0.0
    top5_rev = np.array([[4, 3, 2, 1, 0]])
    expected = sum((2 ** i - 1) / math.log2(i + 1) for i in range(1, 6)) / \
        sum((2 ** (6 - i) - 1) / math.log2(i + 1) for i in range(1, 6))
    got = ndcg_at_5(top5_rev, o)
    assert got == pytest.approx(expected, abs=1e-15)
    assert got == pytest.approx(ndcg5([4, 3, 2, 1, 0], list(range(8))), abs=1e-15)
    assert got == pytest.approx(0.5443434449057798, abs=1e-12)


def test_precision_examples():
    o = OracleRanking(np.array([np.arange(10)]))
    assert prec_at_5(np.array([[4, 2, 0, 1, 3]]), o) == 1.0
    assert prec_at_5(np.array([[5, 6, 7, 8, 9]]), o) == 0.0
    assert prec_at_5(np.array([[0, 1, 2, 8, 9]]), o) == pytest.approx(0.6)
    assert ndcg_at_5(np.array([[5, 6, 7, 8, 9]]), o) == 0.0


@given(st.integers(0, 10_000))
def test_metrics_match_reference(seed):
    gen = np.random.default_rng(seed)
    n, nq = int(gen.integers(5, 12)), int(gen.integers(1, 6))
    oracle = np.stack([gen.permutation(n) for _ in range(nq)])
    system = np.stack([gen.permutation(n)[:5] for _ in range(nq)])
    o = OracleRanking(oracle)
    sys_l, or_l = system.tolist(), oracle.tolist()
    assert ndcg_at_5(system, o) == pytest.approx(np.mean([ndcg5(s, r) for s, r in zip(sys_l, or_l)]), abs=1e-12)
    assert prec_at_5(system, o) == pytest.approx(np.mean([prec5(s, r) for s, r in zip(sys_l, or_l)]))
    assert acc_at_1(system, o) == pytest.approx(np.mean([acc1(s, r) for s, r in zip(sys_l, or_l)]))
    perm = gen.permutation(nq)
    assert ndcg_at_5(system[perm], OracleRanking(oracle[perm])) == pytest.approx(ndcg_at_5(system, o))


def test_metric_errors():
    o = OracleRanking(np.array([np.arange(6)] * 2))
    with pytest.raises(QueryMismatch):
        acc_at_1(np.zeros((3, 5), int), o)
    with pytest.raises(KTooSmall):
        prec_at_5(np.zeros((2, 4), int), o)
    with pytest.raises(KTooSmall):
        ndcg_at_5(np.zeros((2, 5), int), OracleRanking(np.array([np.arange(4)] * 2)))


def test_random_ranker_converges():
    n, q = 1470, 10_000
    top = random_rankings(q, n, 5, seed=0)
    o = OracleRanking(np.tile(np.arange(n), (q, 1)))
    acc = acc_at_1(top, o)
    se = math.sqrt((1 / n) * (1 - 1 / n) / q)
    assert abs(acc - 1 / n) <= 3 * se


def test_doc_order_invariance(rng):
    docs, q = rng.standard_normal((60, 5)), rng.standard_normal((1, 5))
    perm = rng.permutation(60)
    a = mips_topk_batch(docs, q, 10)[0][0]
    b = perm[mips_topk_batch(docs[perm], q, 10)[0][0]]
    assert np.array_equal(a, b)


def test_oracle_self_check_experiment(rng):
    docs, qs = rng.standard_normal((50, 8)), rng.standard_normal((7, 8))
    grid = make_grid([get_profile("Device-1")], [0.0])
    (r,) = run_experiment(IdentityProjector("oracle", quantized=False), docs, qs, grid)
    assert (r.acc_at_1, r.prec_at_5, r.ndcg_at_5) == (1.0, 1.0, 1.0)
    with pytest.raises(ShapeMismatch):
        run_experiment(IdentityProjector("oracle", quantized=False), docs, qs, make_grid([get_profile("Device-1")]))


def test_device_grid_shape_and_determinism(rng):
    docs, qs = rng.standard_normal((80, 16)), rng.standard_normal((10, 16))
    from tonel.cim_noise import builtin_profiles
    grid = make_grid(builtin_profiles(), [0.0, 0.5, 1.0], seed=4)
    a = run_experiment(IdentityProjector(), docs, qs, grid)
    b = run_experiment(IdentityProjector(), docs, qs, grid)
    assert len(a) == 12
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert all(0 <= r.acc_at_1 <= 1 and 0 <= r.ndcg_at_5 <= 1 for r in a)
    assert [r.n_noisy for r in a[:3]] == [0, 40, 80]
    assert reports_to_csv(a).count("\n") == 13


def test_queries_are_not_noised(rng):
    docs, qs = rng.standard_normal((20, 8)), rng.standard_normal((3, 8))
    grid = make_grid([get_profile("Device-1")], [1.0], [50.0], seed=1, per_query=True)
    (r,) = run_experiment(IdentityProjector(), docs, qs, grid, per_query_detail=True)
    assert r.per_query_resampling and len(r.per_query["top_k"]) == 3


def test_report_dict_drops_empty_detail():
    r = EvalReport("m", "Device-1", 1.0, 1.0, 0, 10, 2, 5, 10, 0.5, 0.5, 0.5)
    assert "per_query" not in r.to_dict() and r.to_dict()["version"]


def test_assemble_prompt():
    assert assemble_prompt("q", ["a", "b"]) == "a\n\nb\n\nq"
    assert assemble_prompt("q", []) == "q"
    assert assemble_prompt("q", list("abcde")).split("\n\n") == ["a", "b", "c", "d", "e", "q"]
    with pytest.raises(MissingText):
        assemble_prompt("q", ["a", None])


def test_per_query_ndcg_shape(rng):
    o = oracle_rankings(rng.standard_normal((10, 3)), rng.standard_normal((4, 3)))
    assert per_query_ndcg_at_5(o.top(5), o).shape == (4,)
