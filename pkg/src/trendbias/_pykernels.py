"""Pure-Python kernels; same signatures and results as ``_ckernels``.

State layout shared by both backends (``n`` local users, ``m`` items,
``depth`` slots per user):

* ``L_items`` int32 (n, depth), ``L_scores`` float64 (n, depth),
  ``L_rel`` int8 (n, depth), ``L_len`` int32 (n,) -- each user's best
  ``depth`` items by (biased score desc, item asc).
* ``s_indptr``/``s_items``/``s_scores`` -- the users' stored raw scores (CSR).
* ``r_indptr``/``r_items`` -- sorted relevant items per user (CSR).
* ``order`` -- non-excluded items sorted by (bias desc, item asc); this is
  also the ranking of every item a user has no stored score for.
"""

import math

NEG_INF = -1.0e18

ACC = 0
MAP = 1
NDCG = 2


def _beats(sa, ja, sb, jb):
    return sa > sb or (sa == sb and ja < jb)


def _is_relevant(r_indptr, r_items, u, item):
    lo = r_indptr[u]
    hi = r_indptr[u + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        v = r_items[mid]
        if v < item:
            lo = mid + 1
        elif v > item:
            hi = mid
        else:
            return 1
    return 0


def _insert(L_items, L_scores, L_rel, L_len, u, item, score, rel):
    """Insert into user ``u``'s list, dropping the last entry when full."""
    depth = L_items.shape[1]
    n = L_len[u]
    p = n
    while p > 0 and _beats(score, item, L_scores[u, p - 1], L_items[u, p - 1]):
        p -= 1
    if p >= depth:
        return
    last = n if n < depth else depth - 1
    q = last
    while q > p:
        L_items[u, q] = L_items[u, q - 1]
        L_scores[u, q] = L_scores[u, q - 1]
        L_rel[u, q] = L_rel[u, q - 1]
        q -= 1
    L_items[u, p] = item
    L_scores[u, p] = score
    L_rel[u, p] = rel
    if n < depth:
        L_len[u] = n + 1


def _remove(L_items, L_scores, L_rel, L_len, u, pos):
    n = L_len[u]
    for q in range(pos, n - 1):
        L_items[u, q] = L_items[u, q + 1]
        L_scores[u, q] = L_scores[u, q + 1]
        L_rel[u, q] = L_rel[u, q + 1]
    L_items[u, n - 1] = -1
    L_scores[u, n - 1] = NEG_INF
    L_rel[u, n - 1] = 0
    L_len[u] = n - 1


def _rebuild_one(u, s_indptr, s_items, s_scores, bias, order,
                 r_indptr, r_items, L_items, L_scores, L_rel, L_len, mark):
    depth = L_items.shape[1]
    L_len[u] = 0
    for q in range(depth):
        L_items[u, q] = -1
        L_scores[u, q] = NEG_INF
        L_rel[u, q] = 0
    start = s_indptr[u]
    stop = s_indptr[u + 1]
    for e in range(start, stop):
        j = s_items[e]
        b = bias[j]
        if b <= NEG_INF:
            continue
        mark[j] = 1
        sc = s_scores[e] + b
        if L_len[u] == depth and not _beats(sc, j, L_scores[u, depth - 1], L_items[u, depth - 1]):
            continue
        _insert(L_items, L_scores, L_rel, L_len, u, j, sc,
                _is_relevant(r_indptr, r_items, u, j))
    for t in range(order.shape[0]):
        j = order[t]
        if mark[j]:
            continue
        sc = bias[j]
        if L_len[u] == depth and not _beats(sc, j, L_scores[u, depth - 1], L_items[u, depth - 1]):
            break
        _insert(L_items, L_scores, L_rel, L_len, u, j, sc,
                _is_relevant(r_indptr, r_items, u, j))
    for e in range(start, stop):
        mark[s_items[e]] = 0


def topk_rebuild(users, s_indptr, s_items, s_scores, bias, order,
                 r_indptr, r_items, L_items, L_scores, L_rel, L_len, mark):
    """Recompute the lists of ``users`` from scratch."""
    for t in range(users.shape[0]):
        _rebuild_one(int(users[t]), s_indptr, s_items, s_scores, bias, order,
                     r_indptr, r_items, L_items, L_scores, L_rel, L_len, mark)


def topk_update(item, new_bias, f_col, has_col, s_indptr, s_items, s_scores,
                bias, order, r_indptr, r_items, L_items, L_scores, L_rel, L_len,
                mark):
    """Repair every list after ``item``'s bias changed to ``new_bias``.

    ``bias`` and ``order`` must already reflect the new value. ``f_col`` and
    ``has_col`` hold the item's stored raw score per user. Returns the number
    of users that needed a full rebuild.
    """
    depth = L_items.shape[1]
    n = L_len.shape[0]
    excluded = new_bias <= NEG_INF
    rebuilt = 0
    for u in range(n):
        f = f_col[u] if has_col[u] else 0.0
        score = f + new_bias
        length = L_len[u]
        full = length == depth
        pos = -1
        for q in range(length):
            if L_items[u, q] == item:
                pos = q
                break
        if pos >= 0:
            _remove(L_items, L_scores, L_rel, L_len, u, pos)
            if excluded:
                if full:
                    _rebuild_one(u, s_indptr, s_items, s_scores, bias, order,
                                 r_indptr, r_items, L_items, L_scores, L_rel, L_len, mark)
                    rebuilt += 1
            elif not full:
                _insert(L_items, L_scores, L_rel, L_len, u, item, score,
                        _is_relevant(r_indptr, r_items, u, item))
            else:
                last = L_len[u] - 1
                if last >= 0 and _beats(score, item, L_scores[u, last], L_items[u, last]):
                    _insert(L_items, L_scores, L_rel, L_len, u, item, score,
                            _is_relevant(r_indptr, r_items, u, item))
                else:
                    _rebuild_one(u, s_indptr, s_items, s_scores, bias, order,
                                 r_indptr, r_items, L_items, L_scores, L_rel, L_len, mark)
                    rebuilt += 1
        elif not excluded:
            if not full or _beats(score, item, L_scores[u, depth - 1], L_items[u, depth - 1]):
                _insert(L_items, L_scores, L_rel, L_len, u, item, score,
                        _is_relevant(r_indptr, r_items, u, item))
    return rebuilt


def item_pairs(item, metric, k, f_col, has_col, y_col, norm,
               L_items, L_scores, L_rel, L_len, s_out, d_out):
    """Candidate (threshold, delta) pairs of ``item`` over all users.

    Thresholds are absolute biases: the other item at position p has biased
    score g, so ``item`` passes it once its bias exceeds ``g - f``. Positions
    past the end of a short list count as irrelevant items scored -inf. ACC
    deltas are in hit units (+-1); MAP/NDCG deltas are divided by ``norm``.
    Returns (pair count, utility of the item's current placement).
    """
    n = L_len.shape[0]
    c = 0
    cur = 0.0
    for u in range(n):
        length = L_len[u]
        pos = -1
        for q in range(length):
            if L_items[u, q] == item:
                pos = q
                break
        n_oth = length - 1 if pos >= 0 else length
        if n_oth > k:
            n_oth = k
        f = f_col[u] if has_col[u] else 0.0
        yi = y_col[u]
        if metric == ACC:
            if n_oth >= k:
                idx = k if 0 <= pos < k else k - 1
                g = L_scores[u, idx]
                yk = L_rel[u, idx]
            else:
                g = -math.inf
                yk = 0
            if yi != yk:
                d = float(yi - yk)
                s_out[c] = g - f
                d_out[c] = d
                c += 1
                if 0 <= pos < k:
                    cur += d
            continue
        prefix = 0
        q = 0
        for p in range(1, k + 1):
            if p <= n_oth:
                if q == pos:
                    q += 1
                g = L_scores[u, q]
                yp = L_rel[u, q]
                q += 1
            else:
                g = -math.inf
                yp = 0
            if yi != yp:
                if metric == MAP:
                    step = 1.0 / p - (1.0 / (p + 1) if p < k else 0.0)
                    d = (yi - yp) * (1 + prefix) * step / norm[u]
                else:
                    step = 1.0 / math.log(1.0 + p) - (1.0 / math.log(2.0 + p) if p < k else 0.0)
                    d = (yi - yp) * step / norm[u]
                s_out[c] = g - f
                d_out[c] = d
                c += 1
                if 0 <= pos < k and p >= pos + 1:
                    cur += d
            prefix += yp
    return c, cur
