"""Base scorers: Markov co-purchase chain, category model and popularity.

Each model predicts per-user ``[(item_id, score), ...]`` lists, best first,
which ``core.build_score_store`` turns into a ScoreStore.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from trendbias.core import TransactionLog

DAY = 86400
DEFAULT_BETA = 60.0
DEFAULT_CONTEXT = 3
OTHER_CATEGORY = "__other__"

MODEL_VERSION = "trendbias-markov v1"


def decay_weight(delta_t: float, beta: float = DEFAULT_BETA) -> float:
    """exp(-delta_t / beta) for an age of ``delta_t`` days."""
    if not beta > 0:
        raise ValueError(f"beta: must be > 0, got {beta}")
    if delta_t < 0:
        raise ValueError(f"delta_t: must be >= 0, got {delta_t}")
    return math.exp(-delta_t / beta)


def _top(scores: dict, n: int, order_key=None):
    key = order_key or (lambda x: x)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], key(kv[0])))
    return ranked[:n]


def _by_user(log: TransactionLog):
    """user -> (items, times) in log order."""
    groups = defaultdict(lambda: ([], []))
    for u, i, t in zip(log.users, log.items, log.times.tolist()):
        g = groups[u]
        g[0].append(i)
        g[1].append(t)
    return groups


# -- Markov chain ------------------------------------------------------------

@dataclass
class MarkovModel:
    """User-level co-purchase counts over single-item and pair contexts.

    Keys use dense model indices: unigram cell ``j * m + i``, pair context
    ``j1 * m + j2`` with ``j1 < j2``, pair cell ``(j1 * m + j2) * m + i``.
    ``*_w`` hold the (possibly decayed) weights, ``*_n`` the user counts.
    """

    items: list
    ctx1_n: np.ndarray
    ctx1_w: np.ndarray
    uni_keys: np.ndarray
    uni_n: np.ndarray
    uni_w: np.ndarray
    ctx2_keys: np.ndarray
    ctx2_n: np.ndarray
    ctx2_w: np.ndarray
    pair_keys: np.ndarray
    pair_n: np.ndarray
    pair_w: np.ndarray
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index = {x: k for k, x in enumerate(self.items)}

    @property
    def m(self) -> int:
        return len(self.items)

    @property
    def n_transitions(self) -> int:
        return len(self.uni_keys) + len(self.pair_keys)

    @classmethod
    def empty(cls) -> "MarkovModel":
        z = np.zeros(0, dtype=np.int64)
        f = np.zeros(0)
        return cls([], z, f, z, z, f, z, z, f, z, z, f)

    def prob(self, successor, context) -> float:
        """P(successor | context) for one item or a pair of items."""
        m = self.m
        i = self.index.get(successor)
        ctx = [self.index.get(c) for c in ([context] if isinstance(context, str) else context)]
        if i is None or any(c is None for c in ctx):
            return 0.0
        if len(ctx) == 1:
            den = self.ctx1_w[ctx[0]]
            num = _lookup(self.uni_keys, self.uni_w, ctx[0] * m + i)
        else:
            a, b = sorted(ctx)
            den = _lookup(self.ctx2_keys, self.ctx2_w, a * m + b)
            num = _lookup(self.pair_keys, self.pair_w, (a * m + b) * m + i)
        return float(num / den) if den > 0 else 0.0

    def successors(self, context_key: int, pair: bool):
        """(successor indices, probabilities) for one context."""
        m = self.m
        if pair:
            den = _lookup(self.ctx2_keys, self.ctx2_w, context_key)
            keys, w = self.pair_keys, self.pair_w
        else:
            den = self.ctx1_w[context_key]
            keys, w = self.uni_keys, self.uni_w
        lo, hi = np.searchsorted(keys, [context_key * m, (context_key + 1) * m])
        if hi == lo or den <= 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        return keys[lo:hi] - context_key * m, w[lo:hi] / den


def _lookup(keys, values, key):
    pos = np.searchsorted(keys, key)
    if pos < len(keys) and keys[pos] == key:
        return values[pos]
    return 0.0


def _reduce(keys: list, weights: list):
    if not keys:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    k = np.concatenate(keys)
    w = np.concatenate(weights)
    uniq, inv = np.unique(k, return_inverse=True)
    return uniq, np.bincount(inv, minlength=len(uniq)), np.bincount(inv, w, minlength=len(uniq))


def fit_markov(log: TransactionLog, start=None, end=None,
               weight_fn: Callable[[float], float] | None = None,
               reference_time: int | None = None, pairs: bool = True) -> MarkovModel:
    """Count, per user, which items were bought after which contexts.

    A user adds at most one unit to any (context, successor) cell: j counts
    as a context for i when some purchase of j strictly precedes some
    purchase of i. Same-second purchases are not ordered. With ``weight_fn``
    a cell's unit becomes ``weight_fn(age of the user's last purchase of
    i)`` and a context's unit ``weight_fn(age of the user's last purchase
    in the window)``, ages in days to ``reference_time`` (default: ``end``,
    else the last event).
    """
    log = log.window(start, end)
    if len(log) == 0:
        return MarkovModel.empty()
    if reference_time is None:
        reference_time = int(end) if end is not None else int(log.times[-1])
    items = sorted(log.item_set())
    index = {x: k for k, x in enumerate(items)}
    m = len(items)

    def weight(t):
        if weight_fn is None:
            return 1.0
        return float(weight_fn(max(reference_time - t, 0) / DAY))

    ctx1_n = np.zeros(m, dtype=np.int64)
    ctx1_w = np.zeros(m)
    uk, uw, ck, cw, pk, pw = [], [], [], [], [], []
    for u_items, u_times in _by_user(log).values():
        first, last = {}, {}
        for x, t in zip(u_items, u_times):
            j = index[x]
            first.setdefault(j, t)
            last[j] = t
        ids = np.fromiter(first, dtype=np.int64)
        f = np.array([first[j] for j in ids], dtype=np.int64)
        lt = np.array([last[j] for j in ids], dtype=np.int64)
        w_ctx = weight(int(lt.max()))
        ctx1_n[ids] += 1
        ctx1_w[ids] += w_ctx
        d = len(ids)
        if pairs and d >= 2:
            a, b = np.triu_indices(d, 1)
            lo, hi = np.minimum(ids[a], ids[b]), np.maximum(ids[a], ids[b])
            ck.append(lo * m + hi)
            cw.append(np.full(len(lo), w_ctx))
        for q in range(d):
            ok = f < lt[q]
            ok[q] = False
            ctx = ids[ok]
            if len(ctx) == 0:
                continue
            i = ids[q]
            wi = weight(int(lt[q]))
            uk.append(ctx * m + i)
            uw.append(np.full(len(ctx), wi))
            if pairs and len(ctx) >= 2:
                a, b = np.triu_indices(len(ctx), 1)
                lo = np.minimum(ctx[a], ctx[b])
                hi = np.maximum(ctx[a], ctx[b])
                pk.append((lo * m + hi) * m + i)
                pw.append(np.full(len(lo), wi))
    uni_keys, uni_n, uni_w = _reduce(uk, uw)
    ctx2_keys, ctx2_n, ctx2_w = _reduce(ck, cw)
    pair_keys, pair_n, pair_w = _reduce(pk, pw)
    return MarkovModel(items, ctx1_n, ctx1_w, uni_keys, uni_n, uni_w,
                       ctx2_keys, ctx2_n, ctx2_w, pair_keys, pair_n, pair_w)


def recent_context(history: Iterable[str], size: int = DEFAULT_CONTEXT) -> list:
    """Last ``size`` distinct items of a chronological history, newest first."""
    out = []
    for x in reversed(list(history)):
        if x not in out:
            out.append(x)
            if len(out) == size:
                break
    return out


def predict_markov(model: MarkovModel, history: Iterable[str], n: int,
                   context_size: int = DEFAULT_CONTEXT, combine: str = "max"):
    """Top ``n`` successors of the user's recent items.

    Every recent item and every pair of recent items is a context; an
    item's score combines its probabilities over contexts (``max`` or
    ``sum``). Items in the context are not recommended.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if combine not in ("max", "sum"):
        raise ValueError(f"combine: expected 'max' or 'sum', got {combine!r}")
    m = model.m
    ctx = [model.index[x] for x in recent_context(history, context_size) if x in model.index]
    if not ctx:
        return []
    acc = np.zeros(m)
    seen = np.zeros(m, dtype=bool)
    keys = [(j, False) for j in ctx]
    for a in range(len(ctx)):
        for b in range(a + 1, len(ctx)):
            lo, hi = sorted((ctx[a], ctx[b]))
            keys.append((lo * m + hi, True))
    for key, pair in keys:
        succ, p = model.successors(key, pair)
        if combine == "max":
            np.maximum.at(acc, succ, p)
        else:
            np.add.at(acc, succ, p)
        seen[succ] = True
    seen[ctx] = False
    cand = np.flatnonzero(seen & (acc > 0))
    order = np.lexsort((cand, -acc[cand]))[:n]
    return [(model.items[i], float(acc[i])) for i in cand[order]]


def dump_markov(model: MarkovModel, path) -> None:
    """Versioned TSV: kind, context, context2, successor, count, weight."""
    m = model.m
    it = model.items
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {MODEL_VERSION}\n")
        fh.write("# kind\tcontext\tcontext2\tsuccessor\tcount\tweight\n")
        for j in range(m):
            if model.ctx1_n[j]:
                fh.write(f"C1\t{it[j]}\t\t\t{int(model.ctx1_n[j])}\t{float(model.ctx1_w[j])!r}\n")
        for key, c, w in zip(model.ctx2_keys.tolist(), model.ctx2_n.tolist(),
                             model.ctx2_w.tolist()):
            fh.write(f"C2\t{it[key // m]}\t{it[key % m]}\t\t{c}\t{w!r}\n")
        for key, c, w in zip(model.uni_keys.tolist(), model.uni_n.tolist(),
                             model.uni_w.tolist()):
            fh.write(f"T1\t{it[key // m]}\t\t{it[key % m]}\t{c}\t{w!r}\n")
        for key, c, w in zip(model.pair_keys.tolist(), model.pair_n.tolist(),
                             model.pair_w.tolist()):
            ctx, i = divmod(key, m)
            fh.write(f"T2\t{it[ctx // m]}\t{it[ctx % m]}\t{it[i]}\t{c}\t{w!r}\n")


def load_markov(path) -> MarkovModel:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != f"# {MODEL_VERSION}":
            raise ValueError(f"{path}: unsupported model format {header!r}")
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            kind, c1, c2, succ, count, weight = line.rstrip("\n").split("\t")
            rows.append((kind, c1, c2, succ, int(count), float(weight)))
    items = sorted({x for r in rows for x in r[1:4] if x})
    idx = {x: k for k, x in enumerate(items)}
    m = len(items)
    ctx1_n = np.zeros(m, dtype=np.int64)
    ctx1_w = np.zeros(m)
    parts = {"C2": ([], [], []), "T1": ([], [], []), "T2": ([], [], [])}
    for kind, c1, c2, succ, count, weight in rows:
        if kind == "C1":
            ctx1_n[idx[c1]] = count
            ctx1_w[idx[c1]] = weight
            continue
        if kind == "C2":
            key = idx[c1] * m + idx[c2]
        elif kind == "T1":
            key = idx[c1] * m + idx[succ]
        elif kind == "T2":
            key = (idx[c1] * m + idx[c2]) * m + idx[succ]
        else:
            raise ValueError(f"{path}: unknown row kind {kind!r}")
        k_, n_, w_ = parts[kind]
        k_.append(key)
        n_.append(count)
        w_.append(weight)

    def arrays(kind):
        k_, n_, w_ = parts[kind]
        order = np.argsort(np.asarray(k_, dtype=np.int64), kind="stable")
        return (np.asarray(k_, dtype=np.int64)[order], np.asarray(n_, dtype=np.int64)[order],
                np.asarray(w_, dtype=np.float64)[order])

    return MarkovModel(items, ctx1_n, ctx1_w, *arrays("T1"), *arrays("C2"), *arrays("T2"))


# -- popularity --------------------------------------------------------------

@dataclass
class PopularityModel:
    scores: dict

    def predict(self, n: int):
        return _top(self.scores, n)


def fit_popularity(log: TransactionLog, start=None, end=None,
                   weight_fn: Callable[[float], float] | None = None,
                   reference_time: int | None = None) -> PopularityModel:
    """Purchase share per item in the window, optionally decayed by age."""
    log = log.window(start, end)
    if len(log) == 0:
        return PopularityModel({})
    if reference_time is None:
        reference_time = int(end) if end is not None else int(log.times[-1])
    totals = defaultdict(float)
    for i, t in zip(log.items, log.times.tolist()):
        w = 1.0 if weight_fn is None else float(weight_fn(max(reference_time - t, 0) / DAY))
        totals[i] += w
    z = math.fsum(totals.values())
    return PopularityModel({i: w / z for i, w in totals.items()})


# -- category model ----------------------------------------------------------

@dataclass
class CategoryModel:
    taxonomy: dict
    interest: dict  # user -> {category: prob}
    item_given_category: dict  # category -> {item: prob}
    fallback_interest: dict

    def category(self, item):
        return self.taxonomy.get(item, OTHER_CATEGORY)


def _normalize(counts: dict) -> dict:
    z = math.fsum(counts.values())
    return {k: v / z for k, v in counts.items()} if z > 0 else {}


def fit_category(log: TransactionLog, taxonomy: dict, interest_window=(None, None),
                 popularity_window=(None, None)) -> CategoryModel:
    """User category interest from one window, item share within category from another."""
    cat = lambda i: taxonomy.get(i, OTHER_CATEGORY)  # noqa: E731
    hist = log.window(*interest_window)
    interest = defaultdict(lambda: defaultdict(float))
    for u, i in zip(hist.users, hist.items):
        interest[u][cat(i)] += 1.0
    recent = log.window(*popularity_window)
    within = defaultdict(lambda: defaultdict(float))
    for i in recent.items:
        within[cat(i)][i] += 1.0
    cats = sorted(within)
    fallback = {c: 1.0 / len(cats) for c in cats} if cats else {}
    return CategoryModel(
        dict(taxonomy),
        {u: _normalize(c) for u, c in interest.items()},
        {c: _normalize(items) for c, items in within.items()},
        fallback,
    )


def predict_category(model: CategoryModel, user, n: int):
    """score(i) = P(i | cat(i)) * P(cat(i) | user), top ``n`` with score > 0."""
    interest = model.interest.get(user) or model.fallback_interest
    scores = {}
    for c, pc in interest.items():
        for i, pi in model.item_given_category.get(c, {}).items():
            if pi * pc > 0:
                scores[i] = pi * pc
    return _top(scores, n)


def read_taxonomy(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ValueError(f"{path}: malformed taxonomy line {line!r}")
            out[parts[0]] = parts[1]
    return out


def write_taxonomy(taxonomy: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in sorted(taxonomy):
            fh.write(f"{item}\t{taxonomy[item]}\n")
