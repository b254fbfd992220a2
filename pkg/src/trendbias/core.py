"""Domain types, deterministic top-k selection and incremental top-k state.

Every non-excluded item competes for each user's top-k with biased score
``f_ui + b_i``, where ``f_ui`` reads as 0 for items the user has no stored
score for. Ties are broken by the smaller item index. An item whose bias is
``NEG_INF`` is excluded from every list.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Mapping, Sequence

import numpy as np

from trendbias import kernels

NEG_INF = -1.0e18


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


def is_excluded(b) -> bool:
    return b <= NEG_INF


def zero_bias(n_items: int) -> np.ndarray:
    return np.zeros(n_items, dtype=np.float64)


# -- time --------------------------------------------------------------------

def parse_timestamp(text: str) -> int:
    """ISO-8601 instant to UTC epoch seconds; naive times are taken as UTC."""
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# -- transactions and ids ----------------------------------------------------

@dataclass(eq=False)
class TransactionLog:
    """Purchase events sorted by time (stable, so input order breaks ties)."""

    users: list
    items: list
    times: np.ndarray
    # lines skipped while parsing, if the log came from a file
    malformed: int = field(default=0, compare=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        if not (len(self.users) == len(self.items) == len(self.times)):
            raise ValueError("users, items and times must have equal length")
        if len(self.times) and np.any(np.diff(self.times) < 0):
            order = np.argsort(self.times, kind="stable")
            self.users = [self.users[i] for i in order]
            self.items = [self.items[i] for i in order]
            self.times = self.times[order]

    @classmethod
    def from_records(cls, records: Iterable[tuple]) -> "TransactionLog":
        users, items, times = [], [], []
        for user, item, ts in records:
            if not user or not item:
                raise ValueError("user_id and item_id must be non-empty")
            users.append(user)
            items.append(item)
            times.append(parse_timestamp(ts) if isinstance(ts, str) else int(ts))
        return cls(users, items, np.asarray(times, dtype=np.int64))

    @classmethod
    def empty(cls) -> "TransactionLog":
        return cls([], [], np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.users)

    def __eq__(self, other):
        if not isinstance(other, TransactionLog):
            return NotImplemented
        return (self.users == other.users and self.items == other.items
                and np.array_equal(self.times, other.times))

    def __iter__(self):
        return iter(zip(self.users, self.items, self.times.tolist()))

    def window(self, start=None, end=None) -> "TransactionLog":
        """Events with ``start <= t < end``; ``None`` leaves a side open."""
        lo = 0 if start is None else int(np.searchsorted(self.times, start, side="left"))
        hi = len(self) if end is None else int(np.searchsorted(self.times, end, side="left"))
        return TransactionLog(self.users[lo:hi], self.items[lo:hi], self.times[lo:hi])

    def concat(self, other: "TransactionLog") -> "TransactionLog":
        return TransactionLog(self.users + other.users, self.items + other.items,
                              np.concatenate([self.times, other.times]))

    def user_set(self):
        return set(self.users)

    def item_set(self):
        return set(self.items)


class IdMap:
    """Bijection between external ids and dense indices 0..n-1."""

    def __init__(self, ids: Iterable[str] = ()):
        self.backward: list[str] = []
        self.forward: dict[str, int] = {}
        for x in ids:
            self.add(x)

    @classmethod
    def from_ids(cls, ids: Iterable[str]) -> "IdMap":
        """Dense indices assigned in sorted order of the distinct ids."""
        return cls(sorted(set(ids)))

    def add(self, x: str) -> int:
        idx = self.forward.get(x)
        if idx is None:
            idx = len(self.backward)
            self.forward[x] = idx
            self.backward.append(x)
        return idx

    def index(self, x: str) -> int:
        return self.forward[x]

    def get(self, x: str, default=None):
        return self.forward.get(x, default)

    def __getitem__(self, idx: int) -> str:
        return self.backward[idx]

    def __contains__(self, x):
        return x in self.forward

    def __len__(self):
        return len(self.backward)

    def __iter__(self):
        return iter(self.backward)


# -- sparse stores -----------------------------------------------------------

def _csr(rows: np.ndarray, n_rows: int):
    counts = np.bincount(rows, minlength=n_rows) if len(rows) else np.zeros(n_rows, np.int64)
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr


class RelevanceSet:
    """Binary relevance y_ui stored as sorted item lists per user."""

    def __init__(self, indptr: np.ndarray, items: np.ndarray, n_items: int):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int32)
        self.n_items = int(n_items)

    @classmethod
    def from_pairs(cls, users, items, n_users: int, n_items: int) -> "RelevanceSet":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if len(users):
            key = np.unique(users * n_items + items)
            users, items = key // n_items, key % n_items
        return cls(_csr(users, n_users), items.astype(np.int32), n_items)

    @classmethod
    def from_lists(cls, lists: Sequence[Iterable[int]], n_items: int) -> "RelevanceSet":
        us, its = [], []
        for u, row in enumerate(lists):
            for i in row:
                us.append(u)
                its.append(i)
        return cls.from_pairs(us, its, len(lists), n_items)

    @property
    def n_users(self) -> int:
        return len(self.indptr) - 1

    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def count(self, u: int) -> int:
        return int(self.indptr[u + 1] - self.indptr[u])

    def row(self, u: int) -> np.ndarray:
        return self.items[self.indptr[u]:self.indptr[u + 1]]

    def contains(self, u: int, i: int) -> bool:
        row = self.row(u)
        p = int(np.searchsorted(row, i))
        return p < len(row) and row[p] == i

    @property
    def users(self) -> np.ndarray:
        """Users with at least one relevant item; the rest carry no signal."""
        return np.flatnonzero(self.counts() > 0)

    def item_frequency(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items)

    def slice_rows(self, rows: np.ndarray):
        return _slice_csr(self.indptr, (self.items,), rows)


class ScoreStore:
    """Per-user sparse top-N base scores; absent entries read as 0.

    Rows are sorted by (score desc, item asc) and hold at most ``capacity``
    entries.
    """

    def __init__(self, indptr, items, scores, n_items: int, capacity: int):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int32)
        self.scores = np.asarray(scores, dtype=np.float64)
        self.n_items = int(n_items)
        self.capacity = int(capacity)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("stored scores must be finite")

    @classmethod
    def from_triples(cls, users, items, scores, n_users: int, n_items: int,
                     capacity: int) -> "ScoreStore":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        scores = np.asarray(scores, dtype=np.float64)
        if len(scores) and not np.all(np.isfinite(scores)):
            raise ValueError("stored scores must be finite")
        order = np.lexsort((items, -scores, users))
        users, items, scores = users[order], items[order], scores[order]
        if len(users):
            # duplicate (user, item): the first after sorting is the highest
            key = users * n_items + items
            _, first = np.unique(key, return_index=True)
            keep = np.zeros(len(key), dtype=bool)
            keep[first] = True
            users, items, scores = users[keep], items[keep], scores[keep]
            start = np.searchsorted(users, users, side="left")
            rank = np.arange(len(users)) - start
            keep = rank < capacity
            users, items, scores = users[keep], items[keep], scores[keep]
        return cls(_csr(users, n_users), items.astype(np.int32), scores,
                   n_items, capacity)

    @property
    def n_users(self) -> int:
        return len(self.indptr) - 1

    def row(self, u: int):
        a, b = self.indptr[u], self.indptr[u + 1]
        return self.items[a:b], self.scores[a:b]

    def score(self, u: int, i: int) -> float:
        items, scores = self.row(u)
        hit = np.flatnonzero(items == i)
        return float(scores[hit[0]]) if len(hit) else 0.0

    def slice_rows(self, rows: np.ndarray):
        return _slice_csr(self.indptr, (self.items, self.scores), rows)

    def triples(self):
        users = np.repeat(np.arange(self.n_users), np.diff(self.indptr))
        return users, self.items, self.scores

    def map_scores(self, fn) -> "ScoreStore":
        """Same sparsity, scores transformed per row by ``fn(items, scores)``."""
        users, items, scores = self.triples()
        new = np.empty_like(scores)
        for u in range(self.n_users):
            a, b = self.indptr[u], self.indptr[u + 1]
            if b > a:
                new[a:b] = fn(items[a:b], scores[a:b])
        return ScoreStore.from_triples(users, items, new, self.n_users, self.n_items,
                                       self.capacity)


def _slice_csr(indptr, arrays, rows):
    rows = np.asarray(rows, dtype=np.int64)
    starts, stops = indptr[rows], indptr[rows + 1]
    lengths = stops - starts
    new_ptr = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum(lengths, out=new_ptr[1:])
    if new_ptr[-1]:
        idx = np.repeat(starts - new_ptr[:-1], lengths) + np.arange(new_ptr[-1])
    else:
        idx = np.zeros(0, dtype=np.int64)
    return (new_ptr,) + tuple(np.ascontiguousarray(a[idx]) for a in arrays)


def build_score_store(predictions: Sequence, capacity: int, n_items: int,
                      k: int | None = None) -> ScoreStore:
    """Keep each user's ``capacity`` best-scored items.

    ``predictions`` holds one entry per user: a mapping item -> score or an
    iterable of (item, score) pairs.
    """
    if k is not None and capacity < k:
        raise ConfigError(f"capacity: N={capacity} must be >= k={k}")
    us, its, ss = [], [], []
    for u, row in enumerate(predictions):
        pairs = row.items() if isinstance(row, Mapping) else row
        for i, s in pairs:
            us.append(u)
            its.append(i)
            ss.append(s)
    return ScoreStore.from_triples(us, its, ss, len(predictions), n_items, capacity)


def select_topk(user_scores, bias: np.ndarray, k: int) -> list[int]:
    """Top-k items of one user by biased score, from scratch.

    ``user_scores`` is a mapping or (item, score) pairs; items without a
    score read as 0. The universe is ``range(len(bias))``.
    """
    pairs = user_scores.items() if isinstance(user_scores, Mapping) else user_scores
    full = np.asarray(bias, dtype=np.float64).copy()
    for i, s in pairs:
        full[i] = s + bias[i]
    live = np.flatnonzero(np.asarray(bias) > NEG_INF)
    order = np.lexsort((live, -full[live]))
    return [int(x) for x in live[order[:k]]]


def bias_order(bias: np.ndarray) -> np.ndarray:
    live = np.flatnonzero(bias > NEG_INF)
    return live[np.lexsort((live, -bias[live]))].astype(np.int32)


# -- incremental top-k -------------------------------------------------------

@dataclass
class _Columns:
    indptr: np.ndarray
    users: np.ndarray
    values: np.ndarray


class TopKState:
    """Top lists of a set of users, kept consistent with a shared bias vector.

    ``depth`` slots are tracked per user (``k`` by default; the optimizer uses
    ``k + 1``). The bias array is held by reference and must only be changed
    through :meth:`apply_bias_update`.
    """

    def __init__(self, store: ScoreStore, bias: np.ndarray, k: int, users=None,
                 relevance: RelevanceSet | None = None, depth: int | None = None,
                 backend=None):
        if k < 1:
            raise ConfigError(f"k: must be >= 1, got {k}")
        self.k = int(k)
        self.depth = int(depth or k)
        self.kern = backend or kernels.impl
        self.n_items = store.n_items
        self.bias = bias
        self.users = (np.arange(store.n_users, dtype=np.int64) if users is None
                      else np.asarray(users, dtype=np.int64))
        n = len(self.users)
        self.s_indptr, self.s_items, self.s_scores = store.slice_rows(self.users)
        self.has_relevance = relevance is not None
        if relevance is None:
            self.r_indptr = np.zeros(n + 1, dtype=np.int64)
            self.r_items = np.zeros(0, dtype=np.int32)
        else:
            self.r_indptr, self.r_items = relevance.slice_rows(self.users)
        self.L_items = np.full((n, self.depth), -1, dtype=np.int32)
        self.L_scores = np.full((n, self.depth), NEG_INF, dtype=np.float64)
        self.L_rel = np.zeros((n, self.depth), dtype=np.int8)
        self.L_len = np.zeros(n, dtype=np.int32)
        self._mark = np.zeros(self.n_items, dtype=np.int32)
        self._cols: _Columns | None = None
        self.f_col = np.zeros(n, dtype=np.float64)
        self.has_col = np.zeros(n, dtype=np.int8)
        self.rebuild()

    def __len__(self):
        return len(self.users)

    def rebuild(self, rows=None):
        self.order = bias_order(self.bias)
        rows = (np.arange(len(self.users), dtype=np.int64) if rows is None
                else np.asarray(rows, dtype=np.int64))
        self.kern.topk_rebuild(rows, self.s_indptr, self.s_items, self.s_scores,
                               self.bias, self.order, self.r_indptr, self.r_items,
                               self.L_items, self.L_scores, self.L_rel, self.L_len,
                               self._mark)

    # item columns of the stored scores, built on first use
    def columns(self) -> _Columns:
        if self._cols is None:
            rows = np.repeat(np.arange(len(self.users), dtype=np.int64),
                             np.diff(self.s_indptr))
            order = np.lexsort((rows, self.s_items))
            items = self.s_items[order]
            indptr = np.zeros(self.n_items + 1, dtype=np.int64)
            np.cumsum(np.bincount(items, minlength=self.n_items), out=indptr[1:])
            self._cols = _Columns(indptr, rows[order], self.s_scores[order])
        return self._cols

    def load_column(self, item: int):
        """Scatter the item's stored scores into ``f_col``/``has_col``."""
        c = self.columns()
        a, b = c.indptr[item], c.indptr[item + 1]
        self.f_col[c.users[a:b]] = c.values[a:b]
        self.has_col[c.users[a:b]] = 1
        return c.users[a:b]

    def clear_column(self, rows):
        self.f_col[rows] = 0.0
        self.has_col[rows] = 0

    def apply_bias_update(self, item: int, old_bias: float, new_bias: float) -> int:
        """Set the item's bias and repair all lists; returns rebuilt-user count."""
        if self.bias[item] != old_bias:
            raise ValueError(f"item {item}: stale old_bias {old_bias} != {self.bias[item]}")
        self.bias[item] = new_bias
        self.order = bias_order(self.bias)
        rows = self.load_column(item)
        try:
            return self.kern.topk_update(
                np.int32(item), float(new_bias), self.f_col, self.has_col,
                self.s_indptr, self.s_items, self.s_scores, self.bias, self.order,
                self.r_indptr, self.r_items, self.L_items, self.L_scores, self.L_rel,
                self.L_len, self._mark)
        finally:
            self.clear_column(rows)

    def topk(self, row: int) -> list[int]:
        n = min(int(self.L_len[row]), self.k)
        return [int(x) for x in self.L_items[row, :n]]

    def kth_score(self, row: int) -> float:
        if self.L_len[row] < self.k:
            return -np.inf
        return float(self.L_scores[row, self.k - 1])

    def lists(self) -> np.ndarray:
        """(n_users, k) item matrix, padded with -1."""
        return self.L_items[:, :self.k].copy()

    def relevance_matrix(self) -> np.ndarray:
        return self.L_rel[:, :self.k].copy()


def apply_bias_update(state: TopKState, item: int, old_bias: float,
                      new_bias: float) -> TopKState:
    state.apply_bias_update(item, old_bias, new_bias)
    return state
