"""Ways of adapting a long-history model to recent trends.

LONG      base model on all history, no adjustment
BIAS      LONG plus biases learned on the recent window's purchases
TRUNCATE  LONG with items unseen in the recent window removed
DISTRDIFF per-user normalized LONG plus d_short - d_long
DECAY     base model refit with exponentially decayed counts
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from trendbias.core import (
    NEG_INF,
    ConfigError,
    IdMap,
    RelevanceSet,
    ScoreStore,
    TransactionLog,
    build_score_store,
    zero_bias,
)
from trendbias.data import TemporalSplit
from trendbias.metrics import MetricSpec
from trendbias.models import (
    DEFAULT_BETA,
    DEFAULT_CONTEXT,
    decay_weight,
    fit_category,
    fit_markov,
    fit_popularity,
    predict_category,
    predict_markov,
)
from trendbias.optimizer import LearnResult, OptimizerConfig, learn_biases

_log = logging.getLogger(__name__)

KINDS = ("LONG", "BIAS", "TRUNCATE", "DISTRDIFF", "DECAY")
BASES = ("markov", "category", "popularity")


class StrategyError(ValueError):
    pass


@dataclass(frozen=True)
class StrategySpec:
    kind: str = "LONG"
    base: str = "markov"
    recent_days: float = 3.0
    beta: float = DEFAULT_BETA
    context_size: int = DEFAULT_CONTEXT

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"strategy: unknown kind {self.kind!r}, expected one of {KINDS}")
        if self.base not in BASES:
            raise ConfigError(f"base: unknown model {self.base!r}, expected one of {BASES}")
        if self.recent_days <= 0:
            raise ConfigError(f"recent_days: must be > 0, got {self.recent_days}")
        if self.beta <= 0:
            raise ConfigError(f"beta: must be > 0, got {self.beta}")
        if self.context_size < 1:
            raise ConfigError(f"context_size: must be >= 1, got {self.context_size}")


@dataclass
class StrategyResult:
    kind: str
    store: ScoreStore
    bias: np.ndarray
    learn: LearnResult | None = None
    notes: list = field(default_factory=list)


class Experiment:
    """Shared state for running strategies on one temporal split.

    ``items`` spans every item in the split; ``users`` are the users scored
    for evaluation (by default everyone who buys in the test window).
    """

    def __init__(self, split: TemporalSplit, k: int = 10, capacity: int | None = None,
                 optimizer: OptimizerConfig | None = None, taxonomy: dict | None = None,
                 users=None, base: str = "markov", context_size: int = DEFAULT_CONTEXT):
        self.split = split
        self.k = k
        self.capacity = 5 * k if capacity is None else capacity
        if self.capacity < k:
            raise ConfigError(f"capacity: must be >= k ({k}), got {self.capacity}")
        self.optimizer = optimizer or OptimizerConfig(metric=MetricSpec("ACC", k))
        self.taxonomy = taxonomy or {}
        self.base = base
        self.context_size = context_size
        self.history = split.history()
        self.items = IdMap.from_ids(self.history.item_set() | split.test.item_set())
        self.users = IdMap.from_ids(split.test.user_set() if users is None else users)
        self._histories = _histories(self.history)
        self._cache = {}

    @property
    def reference_time(self) -> int:
        return self.split.split

    # -- base model --------------------------------------------------------

    def _fit(self, log: TransactionLog, weight_fn=None, reference_time=None):
        ref = self.reference_time if reference_time is None else reference_time
        if self.base == "markov":
            model = fit_markov(log, weight_fn=weight_fn, reference_time=ref)
        elif self.base == "category":
            # popularity over the last recent-window length before ref
            span = self.split.split - self.split.recent_start
            model = fit_category(log, self.taxonomy, (None, ref), (ref - span, ref))
        else:
            model = None
        pop = fit_popularity(log, weight_fn=weight_fn, reference_time=ref)
        return model, pop

    def _predict(self, fitted, user, history):
        model, pop = fitted
        n = self.capacity
        if self.base == "markov":
            out = predict_markov(model, history, n, self.context_size) if history else []
        elif self.base == "category":
            out = predict_category(model, user, n)
        else:
            out = []
        if not out:
            out = pop.predict(n)
        return out

    def long_model(self):
        if "long" not in self._cache:
            self._cache["long"] = self._fit(self.history)
        return self._cache["long"]

    def scores(self, fitted, users: IdMap, histories: dict) -> ScoreStore:
        preds = []
        for u in users:
            row = {}
            for item, s in self._predict(fitted, u, histories.get(u, [])):
                idx = self.items.get(item)
                if idx is not None:
                    row[idx] = s
            preds.append(row)
        return build_score_store(preds, self.capacity, len(self.items), self.k)

    def long_store(self) -> ScoreStore:
        if "long_store" not in self._cache:
            self._cache["long_store"] = self.scores(self.long_model(), self.users,
                                                    self._histories)
        return self._cache["long_store"]

    # -- relevance ---------------------------------------------------------

    def relevance(self, log: TransactionLog, users: IdMap) -> RelevanceSet:
        us, its = [], []
        for u, i in zip(log.users, log.items):
            ui = users.get(u)
            ii = self.items.get(i)
            if ui is not None and ii is not None:
                us.append(ui)
                its.append(ii)
        return RelevanceSet.from_pairs(us, its, len(users), len(self.items))

    def test_relevance(self) -> RelevanceSet:
        return self.relevance(self.split.test, self.users)

    def item_frequency(self, log: TransactionLog) -> np.ndarray:
        idx = [self.items.index(i) for i in log.items if i in self.items]
        return np.bincount(np.asarray(idx, dtype=np.int64), minlength=len(self.items))

    # -- strategies --------------------------------------------------------

    def run(self, spec: StrategySpec | str) -> StrategyResult:
        if isinstance(spec, str):
            spec = StrategySpec(spec, base=self.base)
        recent = self.split.recent
        if spec.kind in ("BIAS", "TRUNCATE", "DISTRDIFF") and len(recent) == 0:
            raise StrategyError(f"{spec.kind}: the recent window is empty")
        m = len(self.items)
        if spec.kind == "LONG":
            return StrategyResult("LONG", self.long_store(), zero_bias(m))
        if spec.kind == "TRUNCATE":
            bias = zero_bias(m)
            bias[self.item_frequency(recent) == 0] = NEG_INF
            return StrategyResult("TRUNCATE", self.long_store(), bias)
        if spec.kind == "DISTRDIFF":
            return self._distrdiff()
        if spec.kind == "DECAY":
            beta = spec.beta
            fitted = self._fit(self.history, weight_fn=lambda dt: decay_weight(dt, beta))
            return StrategyResult("DECAY", self.scores(fitted, self.users, self._histories),
                                  zero_bias(m))
        return self._bias()

    def bias_training_data(self):
        """(store, relevance, users) for learning biases on the recent window.

        Mirrors the test situation one window earlier: a base model fit on
        the data before the recent window scores the recent buyers from
        their earlier purchases, and their window purchases are relevance.
        """
        recent = self.split.recent
        users = IdMap.from_ids(recent.user_set())
        if "pre_recent" not in self._cache:
            self._cache["pre_recent"] = self._fit(self.split.train,
                                                  reference_time=self.split.recent_start)
        store = self.scores(self._cache["pre_recent"], users, _histories(self.split.train))
        return store, self.relevance(recent, users), users

    def _bias(self) -> StrategyResult:
        store, rel, _ = self.bias_training_data()
        res = learn_biases(store, rel, self.optimizer)
        notes = list(res.warnings)
        _log.info("BIAS: objective %.6f -> %.6f (%s)", res.objective_start, res.objective,
                  res.status)
        return StrategyResult("BIAS", self.long_store(), res.bias, learn=res, notes=notes)

    def _distrdiff(self) -> StrategyResult:
        store = self.long_store()
        norm = store.map_scores(_normalize_rows)
        d_short = _distribution(self.item_frequency(self.split.recent))
        d_long = _distribution(self.item_frequency(self.history))
        return StrategyResult("DISTRDIFF", norm, d_short - d_long)


def _normalize_rows(items, scores):
    total = scores.sum()
    return scores / total if total > 0 else scores


def _distribution(counts: np.ndarray) -> np.ndarray:
    total = counts.sum()
    return counts / total if total > 0 else counts.astype(np.float64)


def _histories(log: TransactionLog) -> dict:
    out = {}
    for u, i in zip(log.users, log.items):
        out.setdefault(u, []).append(i)
    return out


def run_strategy(spec: StrategySpec, split: TemporalSplit, users=None, k: int = 10,
                 capacity: int | None = None, optimizer: OptimizerConfig | None = None,
                 taxonomy: dict | None = None) -> StrategyResult:
    """Run one strategy on a split; see :class:`Experiment`."""
    exp = Experiment(split, k, capacity, optimizer, taxonomy, users, spec.base, spec.context_size)
    return exp.run(spec)
