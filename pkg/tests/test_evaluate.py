import math

import numpy as np
import pytest
from conftest import random_matrix
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import recall_ndcg

from mllmrec import evaluate as E
from mllmrec.corpus import InteractionMatrix, split
from mllmrec.model import MlpParams, ModelParams, xavier_init


def identity_params(d=1):
    p = MlpParams(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d))
    return ModelParams(p, p.copy())


ITEMS = np.array([[0.3], [0.9], [0.1]])


def test_rank_all_hand_order():
    train = InteractionMatrix.from_pairs(1, 3, [], [])
    assert E.rank_all(identity_params(), np.array([[1.0]]), ITEMS, train)[0].tolist() == [1, 0, 2]


def test_rank_all_masks_train_items():
    train = InteractionMatrix.from_pairs(1, 3, [0], [1])
    assert E.rank_all(identity_params(), np.array([[1.0]]), ITEMS, train)[0].tolist() == [0, 2]


def test_ties_lower_index_first():
    assert E.rank_scores(np.array([[0.5, 0.7, 0.5, 0.7]]), [[]], 4)[0].tolist() == [1, 3, 0, 2]


def test_rank_all_shape_mismatch():
    train = InteractionMatrix.from_pairs(1, 4, [0], [1])
    with pytest.raises(E.ShapeMismatch):
        E.rank_all(identity_params(), np.array([[1.0]]), ITEMS, train)


def test_recall_examples():
    assert E.recall_at_k([[7, 1, 2]], [[7, 9]], 10) == 0.5
    assert E.recall_at_k([[3, 4, 5]], [[4, 3]], 2) == 1.0
    assert E.recall_at_k([[3, 4, 5]], [[8]], 3) == 0.0


def test_ndcg_examples():
    assert E.ndcg_at_k([[4, 1]], [[4]], 10) == 1.0
    assert E.ndcg_at_k([[1, 4]], [[4]], 2) == pytest.approx(1 / math.log2(3), abs=1e-15)
    assert E.ndcg_at_k([[1, 4]], [[4]], 2) == pytest.approx(0.6309, abs=1e-4)
    assert E.ndcg_at_k([[1, 2]], [[4]], 2) == 0.0


def test_empty_truth_users_are_skipped():
    assert E.recall_at_k([[1], [2]], [[1], []], 1) == 1.0
    report = E.metrics_from_rankings([[1], [2]], [[1], []], ks=(1,))
    assert report.n_users_evaluated == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(2, 20), st.integers(0, 2**31 - 1))
def test_metrics_match_enumeration_oracle(n_users, n_items, seed):
    rng = np.random.default_rng(seed)
    ranked = [rng.permutation(n_items)[: rng.integers(1, n_items + 1)] for _ in range(n_users)]
    truth = [rng.choice(n_items, size=rng.integers(0, n_items + 1), replace=False)
             for _ in range(n_users)]
    if not any(len(t) for t in truth):
        truth[0] = np.array([0])
    for k in (1, 5, 10, 20):
        r, n = recall_ndcg(ranked, truth, k)
        assert abs(E.recall_at_k(ranked, truth, k) - r) <= 1e-12
        assert abs(E.ndcg_at_k(ranked, truth, k) - n) <= 1e-12
    rep = E.metrics_from_rankings(ranked, truth)
    assert rep.recall[20] >= rep.recall[10]
    if max(len(t) for t in truth) <= 10:
        # IDCG is identical at k=10 and k=20 here, so DCG growth carries over
        assert rep.ndcg[20] >= rep.ndcg[10]
    assert all(0 <= v <= 1 for v in (*rep.recall.values(), *rep.ndcg.values()))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_per_user_shift_leaves_ranking_unchanged(seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 5, size=(6, 12)).astype(float)  # many ties
    masked = [rng.choice(12, size=3, replace=False) for _ in range(6)]
    base = E.rank_scores(scores, masked, 12)
    shifted = E.rank_scores(scores + rng.integers(-3, 4, size=(6, 1)), masked, 12)
    assert all(np.array_equal(a, b) for a, b in zip(base, shifted))
    for row, m in zip(base, masked):
        assert not set(row.tolist()) & set(m.tolist())


def test_ndcg_can_drop_with_k_when_truth_exceeds_k():
    ranked = [list(range(20))]
    truth = [list(range(10)) + list(range(30, 40))]
    assert E.ndcg_at_k(ranked, truth, 10) == 1.0
    assert E.ndcg_at_k(ranked, truth, 20) < 1.0


def test_oracle_scorer_is_perfect():
    # one-hot item features; each user's vector marks exactly their truth items
    n = 20
    users = [u for u in range(n) for _ in range(10)]
    items = [(u + j) % n for u in range(n) for j in range(10)]
    s = split(InteractionMatrix.from_pairs(n, n, users, items), seed=0)
    for which, truth in (("valid", s.valid), ("test", s.test)):
        ue = np.zeros((n, n))
        for u in range(n):
            ue[u, truth[u]] = 1.0
        rep = E.evaluate(identity_params(n), s, ue, np.eye(n), ks=(1, 10), which=which)
        assert rep.n_users_evaluated == n
        assert rep.recall == {1: 1.0, 10: 1.0} and rep.ndcg == {1: 1.0, 10: 1.0}


def test_random_scorer_recall_is_k_over_n():
    n_items, k, trials = 50, 10, 4000
    rng = np.random.default_rng(0)
    scores = rng.random((trials, n_items))
    truth = [[int(t)] for t in rng.integers(0, n_items, trials)]
    ranked = E.rank_scores(scores, [[]] * trials, k)
    got = E.recall_at_k(ranked, truth, k)
    sd = math.sqrt((k / n_items) * (1 - k / n_items) / trials)
    assert abs(got - k / n_items) < 4 * sd


def test_evaluate_report_and_leakage(tmp_path):
    rng = np.random.default_rng(4)
    m = random_matrix(rng, 25, 30, 0.3)
    s = split(m, seed=1)
    params = xavier_init(5, 4, 3, 0)
    ue, ie = rng.standard_normal((25, 5)), rng.standard_normal((30, 5))
    ranked = E.rank_all(params, ue, ie, s.train, top_n=30)
    for u, row in enumerate(ranked):
        assert not set(row.tolist()) & set(s.train.by_user[u].tolist())
    rep = E.evaluate(params, s, ue, ie)
    assert rep.recall[20] >= rep.recall[10] and rep.ndcg[20] >= rep.ndcg[10]
    rep.meta.update(dataset="toy", seed=1)
    rep.write(tmp_path / "m.json")
    import json
    data = json.loads((tmp_path / "m.json").read_text())
    assert set(data["recall"]) == {"10", "20"} and data["dataset"] == "toy"
    E.write_topn(ranked[:2], [0, 1], tmp_path / "top.tsv")
    assert len((tmp_path / "top.tsv").read_text().splitlines()) == 2
