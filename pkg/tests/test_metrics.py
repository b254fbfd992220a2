import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trendbias import core, metrics
from trendbias.core import ConfigError
from trendbias.metrics import (
    EvaluationError,
    MetricSpec,
    acc_at_k,
    ap_at_k,
    kl_divergence_smoothed,
    lift,
    mean_perf,
    ndcg_at_k,
    top_popular_overlap,
)


def naive_ap(rel, k, count):
    rel = list(rel[:k]) + [0] * max(0, k - len(rel))
    s = 0.0
    for p in range(1, k + 1):
        if rel[p - 1]:
            s += sum(rel[:p]) / p
    return s / min(k, count)


def naive_ndcg(rel, k, count):
    rel = list(rel[:k]) + [0] * max(0, k - len(rel))
    dcg = sum(rel[p - 1] / math.log(p + 1) for p in range(1, k + 1))
    z = sum(1 / math.log(p + 1) for p in range(1, min(k, count) + 1))
    return dcg / z


class TestExamples:
    def test_acc(self):
        assert acc_at_k([1, 1, 1], 3) == 1.0
        assert acc_at_k([0, 0, 0, 0], 4) == 0.0
        assert acc_at_k([1, 0, 1], 3) == pytest.approx(2 / 3, rel=1e-15)

    def test_acc_pads_short_lists(self):
        assert acc_at_k([1], 4) == 0.25

    def test_ap(self):
        assert ap_at_k([1, 1], 2, 2) == 1.0
        assert ap_at_k([0, 0, 0], 3, 5) == 0.0
        assert ap_at_k([1, 0, 1], 3, 2) == pytest.approx(5 / 6, rel=1e-15)

    def test_ndcg(self):
        assert ndcg_at_k([1], 1, 1) == 1.0
        assert ndcg_at_k([0, 0], 2, 1) == 0.0
        assert ndcg_at_k([0, 1], 2, 1) == pytest.approx(math.log(2) / math.log(3), rel=1e-15)
        assert ndcg_at_k([0, 1], 2, 1) == pytest.approx(0.6309, abs=1e-4)

    @pytest.mark.parametrize("fn", [ap_at_k, ndcg_at_k])
    def test_zero_relevant_is_contract_violation(self, fn):
        with pytest.raises(EvaluationError):
            fn([0, 1], 2, 0)

    def test_mean_perf(self):
        assert mean_perf([1.0]) == 1.0
        assert mean_perf([0.0, 1.0]) == 0.5
        assert mean_perf([0.2, 0.4, 0.9]) == pytest.approx(0.5, rel=1e-15)
        with pytest.raises(EvaluationError):
            mean_perf([])

    def test_lift(self):
        assert lift(0.3, 0.3) == 0.0
        assert lift(1.05, 1.0) == pytest.approx(5.0)
        assert lift(0.9, 1.0) == pytest.approx(-10.0)
        assert lift(0.5, 0.0) is None


class TestMetricSpec:
    def test_parse(self):
        assert MetricSpec.parse("ndcg@5") == MetricSpec("NDCG", 5)
        assert MetricSpec.parse("MAP").k == 10

    def test_invalid(self):
        with pytest.raises(ConfigError, match="k"):
            MetricSpec("ACC", 0)
        with pytest.raises(ConfigError, match="metric"):
            MetricSpec("F1", 3)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12).flatmap(lambda k: st.tuples(
    st.just(k), st.lists(st.integers(0, 1), max_size=k), st.integers(1, 20))))
def test_metric_ranges(args):
    k, rel, count = args
    count = max(count, sum(rel))
    for v in (acc_at_k(rel, k), ap_at_k(rel, k, count), ndcg_at_k(rel, k, count)):
        assert 0.0 <= v <= 1.0 + 1e-15


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(1, 15))
def test_perfect_ranking_scores_one(k, count):
    top = [1] * min(k, count)
    assert ap_at_k(top, k, count) == pytest.approx(1.0, rel=1e-15)
    assert ndcg_at_k(top, k, count) == pytest.approx(1.0, rel=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=10), st.randoms())
def test_acc_permutation_invariant(rel, rnd):
    shuffled = list(rel)
    rnd.shuffle(shuffled)
    assert acc_at_k(shuffled, len(rel)) == acc_at_k(rel, len(rel))


def test_rank_metrics_not_permutation_invariant():
    assert ap_at_k([1, 0], 2, 1) != ap_at_k([0, 1], 2, 1)
    assert ndcg_at_k([1, 0], 2, 1) != ndcg_at_k([0, 1], 2, 1)


def test_batch_matches_scalar():
    rng = np.random.default_rng(5)
    for _ in range(50):
        k = int(rng.integers(1, 8))
        rel = rng.integers(0, 2, size=(6, k))
        counts = rel.sum(axis=1) + rng.integers(0, 3, size=6)
        counts = np.maximum(counts, 1)
        for kind in metrics.KINDS:
            got = metrics.batch_metric(kind, rel, counts, k)
            want = [metrics.metric_at_k(kind, r.tolist(), k, int(c)) for r, c in zip(rel, counts)]
            np.testing.assert_allclose(got, want, rtol=1e-12)


def test_evaluate_excludes_users_without_relevance():
    store = core.build_score_store([{0: 0.9, 1: 0.5}, {1: 0.8}, {2: 0.3}], 5, 3)
    rel = core.RelevanceSet.from_pairs([0, 2], [1, 2], 3, 3)
    rep = metrics.evaluate(store, np.zeros(3), rel, 1)
    assert rep.n_users == 2
    assert rep["ACC"] == 0.5


class TestKL:
    def test_identical(self):
        assert kl_divergence_smoothed([3, 1, 0], [3, 1, 0]) == 0.0

    def test_same_support_over_larger_universe(self):
        assert kl_divergence_smoothed({"A": 1}, {"A": 1, "B": 0}) == 0.0

    def test_disjoint_hand_oracle(self):
        p = np.array([1.0, 0.01]) / 1.01
        q = np.array([0.01, 1.0]) / 1.01
        want = sum(a * math.log(a / b) for a, b in zip(p, q))
        got = kl_divergence_smoothed({"A": 1, "B": 0}, {"A": 0, "B": 1})
        assert got == pytest.approx(want, rel=1e-12)

    def test_all_zero_side_is_error(self):
        with pytest.raises(EvaluationError):
            kl_divergence_smoothed([0, 0], [0, 0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=1, max_size=30))
    def test_nonnegative(self, pairs):
        p = [a for a, _ in pairs]
        q = [b for _, b in pairs]
        if sum(p) == 0 or sum(q) == 0:
            return
        assert kl_divergence_smoothed(p, q) >= -1e-12


class TestOverlap:
    def test_identical(self):
        c = np.arange(30, 0, -1)
        assert top_popular_overlap(c, c, [10])[0].overlap == 10

    def test_disjoint(self):
        t = np.r_[np.ones(5), np.zeros(5)]
        p = np.r_[np.zeros(5), np.ones(5)]
        assert top_popular_overlap(t, p, [5])[0].overlap == 0

    def test_random_against_intersection_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            t = rng.integers(0, 6, size=50)
            p = rng.integers(0, 6, size=50)
            levels = [5, 10, 20]
            rows = top_popular_overlap(t, p, levels)
            for row, level in zip(rows, levels):
                def top(c):
                    ranked = sorted((i for i in range(50) if c[i] > 0), key=lambda i: (-c[i], i))
                    return set(ranked[:level])
                assert row.overlap == len(top(t) & top(p))

    def test_clamped_level(self):
        rows = top_popular_overlap([1, 2, 3], [3, 2, 1], [2, 10])
        assert rows[1].clamped_to == 3 and rows[1].overlap == 3
        assert rows[0].clamped_to is None

    def test_levels_must_ascend(self):
        with pytest.raises(ConfigError):
            top_popular_overlap([1], [1], [10, 5])
