import math

import numpy as np
import pytest

from trendbias import _pykernels, core, metrics

try:
    from trendbias import _ckernels
except ImportError:  # pragma: no cover - build without compiler
    _ckernels = None

BACKENDS = [_pykernels] + ([_ckernels] if _ckernels is not None else [])


@pytest.fixture(params=BACKENDS, ids=lambda b: b.__name__.rsplit(".", 1)[-1])
def backend(request):
    return request.param


def random_instance(rng, n_max=50, m_max=20, k_max=5, rel_max=4, score_levels=None):
    """Random sparse scores and relevance on a small universe."""
    n = int(rng.integers(2, n_max + 1))
    m = int(rng.integers(2, m_max + 1))
    k = int(rng.integers(1, k_max + 1))
    us, its, ss = [], [], []
    for u in range(n):
        for i in rng.choice(m, size=int(rng.integers(0, m + 1)), replace=False):
            us.append(u)
            its.append(int(i))
            if score_levels is None:
                ss.append(float(rng.random()))
            else:
                ss.append(float(rng.choice(score_levels)))
    store = core.ScoreStore.from_triples(us, its, ss, n, m, capacity=5 * k)
    ru, ri = [], []
    for u in range(n):
        for i in rng.choice(m, size=int(rng.integers(0, min(rel_max, m) + 1)), replace=False):
            ru.append(u)
            ri.append(int(i))
    if not ru:
        ru, ri = [0], [0]
    rel = core.RelevanceSet.from_pairs(ru, ri, n, m)
    return store, rel, k


def user_pairs(store, u):
    items, scores = store.row(u)
    return list(zip(items.tolist(), scores.tolist()))


def brute_lists(store, bias, k, users):
    return [core.select_topk(user_pairs(store, u), bias, k) for u in users]


def brute_objective(store, rel, bias, kind, k):
    """Mean metric over relevant users, recomputed from scratch."""
    vals = []
    for u in rel.users:
        top = core.select_topk(user_pairs(store, u), bias, k)
        y = [1 if rel.contains(u, i) else 0 for i in top]
        vals.append(metrics.metric_at_k(kind, y, k, rel.count(u)))
    return math.fsum(vals) / len(vals)


def brute_hits(store, rel, bias, k):
    total = 0
    for u in rel.users:
        top = core.select_topk(user_pairs(store, u), bias, k)
        total += sum(1 for i in top if rel.contains(u, i))
    return total


def brute_thresholds(store, rel, bias, item):
    """Every bias at which ``item`` changes place against another item."""
    out = set()
    for u in rel.users:
        f = dict(user_pairs(store, u))
        fi = f.get(item, 0.0)
        for j in range(store.n_items):
            if j != item and bias[j] > core.NEG_INF:
                out.add(f.get(j, 0.0) + bias[j] - fi)
    return sorted(out)


def brute_item_best(store, rel, bias, item, kind, k, eps=1e-9):
    """Max objective over {NEG_INF, below all thresholds} and every s + eps."""
    s = brute_thresholds(store, rel, bias, item)
    cands = [core.NEG_INF] + [t + eps for t in s] + [(s[0] - 1.0) if s else 0.0]
    trial = np.array(bias, dtype=np.float64)
    best = -1.0
    for b in cands:
        trial[item] = b
        best = max(best, brute_objective(store, rel, trial, kind, k))
    return best


def single_user_state(k, y_item, y_kth, backend=None):
    """k incumbents above item k; the k-th incumbent has relevance y_kth.

    Item k + 1 is relevant and scored far below, so the user always counts.
    """
    m = k + 2
    scores = {p: 1.0 - 0.01 * p for p in range(k)}
    scores[k] = 0.5
    scores[k + 1] = 0.05
    store = core.build_score_store([scores], capacity=5 * k, n_items=m)
    rel_items = [k + 1] + ([k] if y_item else []) + ([k - 1] if y_kth else [])
    rel = core.RelevanceSet.from_lists([rel_items], m)
    state = core.TopKState(store, np.zeros(m), k, relevance=rel, depth=k + 1, backend=backend)
    return state, rel


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE, key=lambda c: (int(str(c).rstrip("abc")), str(c))):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
