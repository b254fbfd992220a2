"""Coordinate ascent on per-item biases for ACC@k, MAP@k or NDCG@k.

For one item with every other bias fixed, each user's metric is a step
function of the item's bias: it changes only when the item's biased score
crosses the score of an item in that user's top-k. Collecting those
crossing points as (threshold, delta) pairs and sweeping them in ascending
order gives the exact best bias for the item. Cycling over items until no
item improves yields a coordinate-wise optimum.

Biases are absolute: a threshold ``s`` means the item passes the
competitor once its bias exceeds ``s``. The bias actually applied is
``s + tie_epsilon``, or the middle of the gap to the next threshold when
that gap is narrower, so the crossing is strict.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from trendbias import kernels
from trendbias.core import (
    NEG_INF,
    ConfigError,
    RelevanceSet,
    ScoreStore,
    TopKState,
    zero_bias,
)
from trendbias.metrics import MetricSpec, batch_metric, ideal_dcg, prediction_counts

_log = logging.getLogger(__name__)

_KIND_CODE = {"ACC": kernels.ACC, "MAP": kernels.MAP, "NDCG": kernels.NDCG}


@dataclass(frozen=True)
class CandidatePair:
    s: float
    delta: float


SENTINEL = CandidatePair(float("-inf"), 0.0)

# narrowest bias offset trusted to survive rounding in f + b
_MIN_STEP = 1e-12


@dataclass(frozen=True)
class BiasSearchResult:
    bias: float
    utility_gain: float


@dataclass
class OptimizerConfig:
    metric: MetricSpec = field(default_factory=MetricSpec)
    max_cycles: int = 2
    min_items_changed_fraction: float = 0.0
    # None keeps every item the source offers
    candidate_top_predicted: int | None = None
    candidate_top_recent: int | None = None
    tie_epsilon: float = 1e-9
    warm_start_bias: np.ndarray | None = None
    prune: bool = True

    def __post_init__(self):
        if isinstance(self.metric, str):
            self.metric = MetricSpec.parse(self.metric)
        if self.max_cycles < 0:
            raise ConfigError(f"max_cycles: must be >= 0, got {self.max_cycles}")
        if not self.tie_epsilon > 0:
            raise ConfigError(f"tie_epsilon: must be > 0, got {self.tie_epsilon}")
        if not 0.0 <= self.min_items_changed_fraction <= 1.0:
            raise ConfigError("min_items_changed_fraction: must lie in [0, 1]")
        for name in ("candidate_top_predicted", "candidate_top_recent"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name}: must be >= 0, got {v}")


# -- single-item search ------------------------------------------------------

class ItemSearch:
    """Pair generation and exact single-item search over a top-(k+1) state."""

    def __init__(self, state: TopKState, relevance: RelevanceSet, metric: MetricSpec,
                 tie_epsilon: float = 1e-9):
        if state.depth < metric.k + 1:
            raise ValueError("the search needs a state of depth k + 1")
        if not state.has_relevance:
            raise ValueError("the search needs a state built with its relevance set")
        self.state = state
        self.metric = metric
        self.k = metric.k
        self.code = _KIND_CODE[metric.kind]
        self.tie_epsilon = tie_epsilon
        n = len(state)
        counts = relevance.counts()[state.users]
        if self.code == kernels.ACC:
            self.norm = np.ones(n)
            self.tol = 0.5  # integer hit units
        elif self.code == kernels.MAP:
            self.norm = np.minimum(self.k, counts).astype(np.float64)
            self.tol = 1e-9
        else:
            table = np.array([0.0] + [ideal_dcg(self.k, c) for c in range(1, self.k + 1)])
            self.norm = table[np.minimum(self.k, counts)]
            self.tol = 1e-9
        # relevance columns over local users
        r_ptr, r_items = relevance.slice_rows(state.users)
        rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(r_ptr))
        order = np.lexsort((rows, r_items))
        self._y_ptr = np.zeros(state.n_items + 1, dtype=np.int64)
        np.cumsum(np.bincount(r_items, minlength=state.n_items), out=self._y_ptr[1:])
        self._y_users = rows[order]
        self.y_col = np.zeros(n, dtype=np.int8)
        width = n if self.code == kernels.ACC else n * self.k
        self._s = np.empty(width, dtype=np.float64)
        self._d = np.empty(width, dtype=np.float64)

    @property
    def unit(self) -> float:
        """Factor turning kernel deltas into per-user metric units."""
        return 1.0 / self.k if self.code == kernels.ACC else 1.0

    def raw_pairs(self, item: int):
        """(current utility, thresholds, deltas) in kernel units."""
        st = self.state
        rows = st.load_column(item)
        yrows = self._y_users[self._y_ptr[item]:self._y_ptr[item + 1]]
        self.y_col[yrows] = 1
        try:
            c, cur = st.kern.item_pairs(
                np.int32(item), self.code, self.k, st.f_col, st.has_col, self.y_col,
                self.norm, st.L_items, st.L_scores, st.L_rel, st.L_len, self._s, self._d)
        finally:
            st.clear_column(rows)
            self.y_col[yrows] = 0
        return cur, self._s[:c].copy(), self._d[:c].copy()

    def pairs(self, item: int):
        """(current utility, [CandidatePair, ..., SENTINEL]) in metric units."""
        cur, s, d = self.raw_pairs(item)
        u = self.unit
        out = [CandidatePair(float(a), float(b) * u) for a, b in zip(s, d)]
        out.append(SENTINEL)
        return cur * u, out

    def search(self, item: int) -> BiasSearchResult:
        """Best bias for ``item``; the gain is in kernel units."""
        cur, s, d = self.raw_pairs(item)
        return _sweep(s, d, cur, self.tie_epsilon, float(self.state.bias[item]), self.tol)


def _sweep(s: np.ndarray, d: np.ndarray, cur: float, eps: float, current_bias: float,
           tol: float) -> BiasSearchResult:
    low = ~np.isfinite(s)
    low_sum = float(d[low].sum()) if low.any() else 0.0
    fs, fd = s[~low], d[~low]
    order = np.argsort(fs, kind="stable")
    fs, fd = fs[order], fd[order]
    cand_bias = [NEG_INF]
    cand_util = [0.0]
    if low.any():
        # any finite bias below the smallest finite threshold
        cand_bias.append(0.0 if len(fs) == 0 or fs[0] > 0 else float(fs[0]) - eps)
        cand_util.append(low_sum)
    if len(fs):
        csum = low_sum + np.cumsum(fd)
        ends = np.flatnonzero(np.r_[fs[1:] != fs[:-1], True])
        ts = fs[ends]
        nxt = np.r_[ts[1:], np.inf]
        # stay inside the cell (ts, nxt) even when thresholds are eps apart
        b = ts + np.minimum(eps, (nxt - ts) / 2)
        ok = (b - ts >= _MIN_STEP * np.maximum(1.0, np.abs(ts))) & (b < nxt)
        cand_bias.extend(b[ok].tolist())
        cand_util.extend(csum[ends][ok].tolist())
    bias = np.asarray(cand_bias)
    util = np.asarray(cand_util)
    best = util.max()
    tied = np.flatnonzero(util >= best - tol)
    pick = tied[np.lexsort((bias[tied], np.abs(bias[tied])))[0]]
    gain = float(util[pick] - cur)
    if gain <= tol:
        return BiasSearchResult(current_bias, 0.0)
    return BiasSearchResult(float(bias[pick]), gain)


def sweep_optimal_bias(current_utility: float, pairs: Sequence[CandidatePair],
                       tie_epsilon: float = 1e-9, current_bias: float = 0.0,
                       tol: float = 1e-12) -> BiasSearchResult:
    """Best bias given candidate pairs; utility at bias b is sum{delta : s < b}.

    Prefers keeping ``current_bias`` unless the utility strictly improves;
    among equal optima the smallest ``|bias|`` wins, then the smaller bias.
    """
    # the sentinel only anchors utility 0 at NEG_INF, which _sweep always offers
    real = [p for p in pairs if p != SENTINEL]
    s = np.array([p.s for p in real], dtype=np.float64)
    d = np.array([p.delta for p in real], dtype=np.float64)
    return _sweep(s, d, current_utility, tie_epsilon, current_bias, tol)


def _search_for(state, relevance, metric, item, tie_epsilon):
    if state.depth < metric.k + 1:
        raise ValueError("state depth must be k + 1")
    return ItemSearch(state, relevance, metric, tie_epsilon).pairs(item)


def candidate_pairs_acc(item: int, state: TopKState, relevance: RelevanceSet,
                        tie_epsilon: float = 1e-9):
    """(current utility, pairs) for ACC@k with delta = (y_ui - y_u^(k)) / k."""
    return _search_for(state, relevance, MetricSpec("ACC", state.k), item, tie_epsilon)


def candidate_pairs_rank(item: int, state: TopKState, relevance: RelevanceSet,
                         metric: MetricSpec, tie_epsilon: float = 1e-9):
    """(current utility, pairs) with one pair per position whose relevance differs."""
    if metric.kind not in ("MAP", "NDCG"):
        raise ConfigError(f"metric: rank path needs MAP or NDCG, got {metric.kind}")
    return _search_for(state, relevance, metric, item, tie_epsilon)


# -- pruning and candidates --------------------------------------------------

def prune_zero_relevance(relevance: RelevanceSet, n_items: int | None = None) -> np.ndarray:
    """Items nobody found relevant; they can be excluded without ACC loss."""
    n_items = relevance.n_items if n_items is None else n_items
    freq = np.bincount(relevance.items, minlength=n_items)
    return np.flatnonzero(freq == 0)


def _top_by_frequency(freq: np.ndarray, limit: int | None) -> np.ndarray:
    idx = np.flatnonzero(freq > 0)
    idx = idx[np.lexsort((idx, -freq[idx]))]
    return idx if limit is None else idx[:limit]


def build_candidate_set(store: ScoreStore, relevance: RelevanceSet, config: OptimizerConfig,
                        pruned: np.ndarray | None = None, backend=None) -> np.ndarray:
    """Items to tune: often recommended at zero bias, or recently relevant.

    Ordered by recent relevance frequency (desc), then item index.
    """
    m = store.n_items
    recent = relevance.item_frequency()
    chosen = set(_top_by_frequency(recent, config.candidate_top_recent).tolist())
    top_pred = config.candidate_top_predicted
    if top_pred is None or top_pred > 0:
        users = relevance.users
        state = TopKState(store, zero_bias(m), config.metric.k, users=users, backend=backend)
        chosen.update(_top_by_frequency(prediction_counts(state, m), top_pred).tolist())
    if pruned is not None:
        chosen.difference_update(np.asarray(pruned).tolist())
    items = np.array(sorted(chosen), dtype=np.int64)
    return items[np.lexsort((items, -recent[items]))] if len(items) else items


# -- full learning -----------------------------------------------------------

@dataclass
class CycleStats:
    cycle: int
    items_changed: int
    gain: float
    objective: float


@dataclass
class LearnResult:
    bias: np.ndarray
    metric: MetricSpec
    objective_start: float
    objective: float
    cycles: list = field(default_factory=list)
    accepted_updates: int = 0
    status: str = "converged"
    candidates: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    pruned: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    n_users: int = 0
    warnings: list = field(default_factory=list)
    state: TopKState | None = None


UpdateHook = Callable[[int, float, float, TopKState], None]


def learn_biases(store: ScoreStore, relevance: RelevanceSet, config: OptimizerConfig,
                 on_update: UpdateHook | None = None, backend=None) -> LearnResult:
    """Maximize the configured metric's mean over users with relevant items.

    ``on_update(item, old_bias, new_bias, state)`` is called after each
    accepted change. The objective never decreases across accepted changes.
    """
    m = store.n_items
    if relevance.n_items != m or relevance.n_users != store.n_users:
        raise ConfigError("relevance and scores must share user and item index spaces")
    metric = config.metric
    k = metric.k
    if config.warm_start_bias is not None:
        bias = np.array(config.warm_start_bias, dtype=np.float64)
        if bias.shape != (m,):
            raise ConfigError(f"warm_start_bias: expected {m} entries, got {bias.shape}")
    else:
        bias = zero_bias(m)
    warnings = []
    users = relevance.users
    pruned = prune_zero_relevance(relevance, m) if config.prune else np.zeros(0, np.int64)
    if config.prune and metric.kind != "ACC":
        warnings.append(f"zero-relevance pruning applied under {metric}; "
                        "loss-freeness is only established for ACC")
    start_bias = bias.copy()
    bias[pruned] = NEG_INF
    candidates = build_candidate_set(store, relevance, config, pruned, backend=backend)
    if len(users) == 0 or len(candidates) == 0:
        _log.warning("empty candidate set; returning initial biases")
        return LearnResult(start_bias, metric, 0.0, 0.0, status="empty_candidates",
                           candidates=candidates, pruned=pruned, n_users=len(users),
                           warnings=warnings + ["empty candidate set"])

    state = TopKState(store, bias, k, users=users, relevance=relevance, depth=k + 1,
                      backend=backend)
    search = ItemSearch(state, relevance, metric, config.tie_epsilon)
    n = len(users)
    counts = relevance.counts()[users]

    def objective():
        vals = batch_metric(metric.kind, state.relevance_matrix(), counts, k)
        return math.fsum(vals.tolist()) / n

    start = objective()
    raw_total = 0.0
    scale = search.unit / n
    result = LearnResult(bias, metric, start, start, candidates=candidates, pruned=pruned,
                         n_users=n, warnings=warnings, state=state)
    status = "max_cycles"
    for cycle in range(1, config.max_cycles + 1):
        changed = 0
        cycle_gain = 0.0
        for item in candidates:
            item = int(item)
            res = search.search(item)
            if res.utility_gain <= 0.0:
                continue
            old = float(bias[item])
            state.apply_bias_update(item, old, res.bias)
            changed += 1
            cycle_gain += res.utility_gain
            if on_update is not None:
                on_update(item, old, res.bias, state)
        raw_total += cycle_gain
        result.accepted_updates += changed
        result.cycles.append(CycleStats(cycle, changed, cycle_gain * scale,
                                        start + raw_total * scale))
        _log.info("cycle %d: %d items changed, objective %.6f", cycle, changed,
                  start + raw_total * scale)
        if changed == 0:
            status = "converged"
            break
        if changed < config.min_items_changed_fraction * len(candidates):
            status = "early_stop"
            break
    result.status = status
    result.objective = objective()
    return result
