"""Top-k ranking metrics over binary relevance, lift and macro diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from trendbias.core import ConfigError, RelevanceSet, ScoreStore, TopKState

KINDS = ("ACC", "MAP", "NDCG")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MetricSpec:
    kind: str = "ACC"
    k: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"metric: unknown kind {self.kind!r}, expected one of {KINDS}")
        if self.k < 1:
            raise ConfigError(f"k: must be >= 1, got {self.k}")

    @classmethod
    def parse(cls, text: str, default_k: int = 10) -> "MetricSpec":
        """Parse ``"NDCG@5"`` or ``"map"``."""
        kind, _, k = text.partition("@")
        return cls(kind.upper(), int(k) if k else default_k)

    def __str__(self):
        return f"{self.kind}@{self.k}"


def _padded(rel, k):
    rel = [int(y) for y in list(rel)[:k]]
    return rel + [0] * (k - len(rel))


def acc_at_k(topk_relevance: Sequence[int], k: int) -> float:
    return sum(_padded(topk_relevance, k)) / k


def ap_at_k(topk_relevance: Sequence[int], k: int, relevant_count: int) -> float:
    if relevant_count < 1:
        raise EvaluationError("relevant_count must be >= 1")
    hits = 0
    total = 0.0
    for p, y in enumerate(_padded(topk_relevance, k), start=1):
        if y:
            hits += 1
            total += hits / p
    return total / min(k, relevant_count)


def ideal_dcg(k: int, relevant_count: int) -> float:
    return sum(1.0 / math.log(1.0 + p) for p in range(1, min(k, relevant_count) + 1))


def ndcg_at_k(topk_relevance: Sequence[int], k: int, relevant_count: int) -> float:
    if relevant_count < 1:
        raise EvaluationError("relevant_count must be >= 1")
    dcg = sum(y / math.log(1.0 + p) for p, y in enumerate(_padded(topk_relevance, k), start=1))
    return dcg / ideal_dcg(k, relevant_count)


def metric_at_k(kind: str, topk_relevance, k: int, relevant_count: int) -> float:
    if kind == "ACC":
        return acc_at_k(topk_relevance, k)
    if kind == "MAP":
        return ap_at_k(topk_relevance, k, relevant_count)
    if kind == "NDCG":
        return ndcg_at_k(topk_relevance, k, relevant_count)
    raise ConfigError(f"metric: unknown kind {kind!r}")


def mean_perf(per_user_values) -> float:
    values = list(per_user_values)
    if not values:
        raise EvaluationError("mean over an empty user set")
    return math.fsum(values) / len(values)


def lift(perf: float, perf_baseline: float) -> float | None:
    """Relative improvement in percent; ``None`` when the baseline is not positive."""
    if perf_baseline is None or perf_baseline <= 0:
        return None
    return (perf / perf_baseline - 1.0) * 100.0


# -- batched evaluation over relevance matrices ------------------------------

def batch_metric(kind: str, rel: np.ndarray, counts: np.ndarray, k: int) -> np.ndarray:
    """Per-user metric from an (n, k) 0/1 matrix of top-k relevance."""
    rel = np.asarray(rel, dtype=np.float64)[:, :k]
    if rel.shape[1] < k:
        rel = np.pad(rel, ((0, 0), (0, k - rel.shape[1])))
    if kind == "ACC":
        return rel.sum(axis=1) / k
    counts = np.asarray(counts)
    if np.any(counts < 1):
        raise EvaluationError("every evaluated user needs relevant_count >= 1")
    pos = np.arange(1, k + 1, dtype=np.float64)
    if kind == "MAP":
        prec = np.cumsum(rel, axis=1) / pos
        return (rel * prec).sum(axis=1) / np.minimum(k, counts)
    if kind == "NDCG":
        disc = 1.0 / np.log1p(pos)
        ideal = np.concatenate([[0.0], np.cumsum(disc)])[np.minimum(k, counts)]
        return (rel * disc).sum(axis=1) / ideal
    raise ConfigError(f"metric: unknown kind {kind!r}")


@dataclass
class EvalReport:
    k: int
    n_users: int
    values: dict = field(default_factory=dict)
    per_user: dict | None = None

    def __getitem__(self, kind):
        return self.values[kind]


def recommend(store: ScoreStore, bias: np.ndarray, k: int, users=None,
              relevance: RelevanceSet | None = None) -> TopKState:
    """Top-k state for ``users`` under ``bias`` (bias is copied)."""
    return TopKState(store, np.array(bias, dtype=np.float64), k, users=users,
                     relevance=relevance)


def evaluate(store: ScoreStore, bias: np.ndarray, relevance: RelevanceSet, k: int,
             kinds=KINDS, keep_per_user: bool = False) -> EvalReport:
    """Mean metrics over users with at least one relevant item."""
    users = relevance.users
    if len(users) == 0:
        raise EvaluationError("no user has a relevant item")
    state = recommend(store, bias, k, users=users, relevance=relevance)
    return evaluate_state(state, relevance.counts()[users], kinds, keep_per_user)


def evaluate_state(state: TopKState, counts: np.ndarray, kinds=KINDS,
                   keep_per_user: bool = False) -> EvalReport:
    rel = state.relevance_matrix()
    report = EvalReport(k=state.k, n_users=len(state), per_user={} if keep_per_user else None)
    for kind in kinds:
        vals = batch_metric(kind, rel, counts, state.k)
        report.values[kind] = math.fsum(vals.tolist()) / len(vals)
        if keep_per_user:
            report.per_user[kind] = vals
    return report


def prediction_counts(state: TopKState, n_items: int) -> np.ndarray:
    """How often each item appears across the users' top-k lists."""
    items = state.lists().ravel()
    return np.bincount(items[items >= 0], minlength=n_items)


# -- macro diagnostics -------------------------------------------------------

def _aligned(p_counts, q_counts):
    if isinstance(p_counts, Mapping) or isinstance(q_counts, Mapping):
        p_counts = dict(p_counts)
        q_counts = dict(q_counts)
        keys = sorted(set(p_counts) | set(q_counts))
        return (np.array([p_counts.get(x, 0) for x in keys], dtype=np.float64),
                np.array([q_counts.get(x, 0) for x in keys], dtype=np.float64))
    p = np.asarray(p_counts, dtype=np.float64)
    q = np.asarray(q_counts, dtype=np.float64)
    if p.shape != q.shape:
        raise EvaluationError("count vectors must cover the same items")
    return p, q


def kl_divergence_smoothed(p_counts, q_counts, smoothing: float = 0.01) -> float:
    """D(p || q) after replacing zero counts by ``smoothing``.

    Counts are mappings over item ids or aligned arrays. Items with zero
    count on both sides are left out.
    """
    p, q = _aligned(p_counts, q_counts)
    if p.sum() <= 0 or q.sum() <= 0:
        raise EvaluationError("KL divergence needs a nonzero count on each side")
    keep = (p > 0) | (q > 0)
    p = np.where(p[keep] > 0, p[keep], smoothing)
    q = np.where(q[keep] > 0, q[keep], smoothing)
    p = p / p.sum()
    q = q / q.sum()
    return float(math.fsum((p * np.log(p / q)).tolist()))


@dataclass(frozen=True)
class OverlapRow:
    level: int
    overlap: int
    clamped_to: int | None = None


def _popular(counts: np.ndarray, level: int) -> set:
    idx = np.flatnonzero(counts > 0)
    order = np.lexsort((idx, -counts[idx]))
    return set(idx[order[:level]].tolist())


def top_popular_overlap(test_counts, prediction_counts, levels=(10, 20, 50, 100, 200, 500, 1000)):
    """|top-L(test) ∩ top-L(predictions)| per level, most frequent first."""
    t, p = _aligned(test_counts, prediction_counts)
    rows = []
    prev = 0
    for level in levels:
        if level < 1 or level < prev:
            raise ConfigError("levels: must be positive and ascending")
        prev = level
        eff = min(level, len(t))
        rows.append(OverlapRow(level, len(_popular(t, eff) & _popular(p, eff)),
                               eff if eff != level else None))
    return rows
