# cython: language_level=3
"""Compiled kernels; see ``_pykernels`` for the state layout and semantics."""

from libc.math cimport log, INFINITY

cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int32_t i32
ctypedef cnp.int64_t i64
ctypedef cnp.int8_t i8

cdef double NEG_INF = -1.0e18
cdef int ACC = 0
cdef int MAP = 1


cdef inline bint _beats(double sa, i32 ja, double sb, i32 jb) nogil:
    return sa > sb or (sa == sb and ja < jb)


cdef inline i8 _is_relevant(const i64[:] r_indptr, const i32[:] r_items,
                            Py_ssize_t u, i32 item) nogil:
    cdef i64 lo = r_indptr[u]
    cdef i64 hi = r_indptr[u + 1]
    cdef i64 mid
    cdef i32 v
    while lo < hi:
        mid = (lo + hi) >> 1
        v = r_items[mid]
        if v < item:
            lo = mid + 1
        elif v > item:
            hi = mid
        else:
            return 1
    return 0


cdef inline void _insert(i32[:, :] L_items, double[:, :] L_scores, i8[:, :] L_rel,
                         i32[:] L_len, Py_ssize_t u, i32 item, double score,
                         i8 rel) nogil:
    cdef Py_ssize_t depth = L_items.shape[1]
    cdef Py_ssize_t n = L_len[u]
    cdef Py_ssize_t p = n
    cdef Py_ssize_t q, last
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
        L_len[u] = <i32>(n + 1)


cdef inline void _remove(i32[:, :] L_items, double[:, :] L_scores, i8[:, :] L_rel,
                         i32[:] L_len, Py_ssize_t u, Py_ssize_t pos) nogil:
    cdef Py_ssize_t n = L_len[u]
    cdef Py_ssize_t q
    for q in range(pos, n - 1):
        L_items[u, q] = L_items[u, q + 1]
        L_scores[u, q] = L_scores[u, q + 1]
        L_rel[u, q] = L_rel[u, q + 1]
    L_items[u, n - 1] = -1
    L_scores[u, n - 1] = NEG_INF
    L_rel[u, n - 1] = 0
    L_len[u] = <i32>(n - 1)


cdef void _rebuild_one(Py_ssize_t u, const i64[:] s_indptr, const i32[:] s_items,
                       const double[:] s_scores, const double[:] bias,
                       const i32[:] order, const i64[:] r_indptr,
                       const i32[:] r_items, i32[:, :] L_items,
                       double[:, :] L_scores, i8[:, :] L_rel, i32[:] L_len,
                       i32[:] mark) nogil:
    cdef Py_ssize_t depth = L_items.shape[1]
    cdef Py_ssize_t q, t
    cdef i64 e, start, stop
    cdef i32 j
    cdef double b, sc
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


def topk_rebuild(const i64[:] users, const i64[:] s_indptr, const i32[:] s_items,
                 const double[:] s_scores, const double[:] bias, const i32[:] order,
                 const i64[:] r_indptr, const i32[:] r_items, i32[:, :] L_items,
                 double[:, :] L_scores, i8[:, :] L_rel, i32[:] L_len, i32[:] mark):
    cdef Py_ssize_t t
    with nogil:
        for t in range(users.shape[0]):
            _rebuild_one(users[t], s_indptr, s_items, s_scores, bias, order,
                         r_indptr, r_items, L_items, L_scores, L_rel, L_len, mark)


def topk_update(i32 item, double new_bias, const double[:] f_col,
                const i8[:] has_col, const i64[:] s_indptr, const i32[:] s_items,
                const double[:] s_scores, const double[:] bias, const i32[:] order,
                const i64[:] r_indptr, const i32[:] r_items, i32[:, :] L_items,
                double[:, :] L_scores, i8[:, :] L_rel, i32[:] L_len, i32[:] mark):
    cdef Py_ssize_t depth = L_items.shape[1]
    cdef Py_ssize_t n = L_len.shape[0]
    cdef bint excluded = new_bias <= NEG_INF
    cdef Py_ssize_t u, q, pos, length, last
    cdef bint full
    cdef double f, score
    cdef long rebuilt = 0
    with nogil:
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


def item_pairs(i32 item, int metric, int k, const double[:] f_col,
               const i8[:] has_col, const i8[:] y_col, const double[:] norm,
               const i32[:, :] L_items, const double[:, :] L_scores,
               const i8[:, :] L_rel, const i32[:] L_len, double[:] s_out,
               double[:] d_out):
    cdef Py_ssize_t n = L_len.shape[0]
    cdef Py_ssize_t u, q, pos, length, n_oth, idx, p
    cdef Py_ssize_t c = 0
    cdef double cur = 0.0
    cdef double f, g, d, step
    cdef int yi, yk, yp, prefix
    with nogil:
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
                    idx = k if (pos >= 0 and pos < k) else k - 1
                    g = L_scores[u, idx]
                    yk = L_rel[u, idx]
                else:
                    g = -INFINITY
                    yk = 0
                if yi != yk:
                    d = <double>(yi - yk)
                    s_out[c] = g - f
                    d_out[c] = d
                    c += 1
                    if pos >= 0 and pos < k:
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
                    g = -INFINITY
                    yp = 0
                if yi != yp:
                    if metric == MAP:
                        step = 1.0 / p - (1.0 / (p + 1) if p < k else 0.0)
                        d = (yi - yp) * (1 + prefix) * step / norm[u]
                    else:
                        step = 1.0 / log(1.0 + p) - (1.0 / log(2.0 + p) if p < k else 0.0)
                        d = (yi - yp) * step / norm[u]
                    s_out[c] = g - f
                    d_out[c] = d
                    c += 1
                    if pos >= 0 and pos < k and p >= pos + 1:
                        cur += d
                prefix += yp
    return c, cur
