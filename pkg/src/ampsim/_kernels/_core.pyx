# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

Every function here has a line-for-line twin in ``_fallback.py``; the two
must produce identical results for identical inputs.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport NAN, fabs

cdef double RESUM = 1e-4

cnp.import_array()


def rolling_weighted_mean(const long long[:] seg_hours, const double[:] price,
                          const double[:] qty, const long long[:] query_hours,
                          long long window):
    cdef Py_ssize_t n = seg_hours.shape[0]
    cdef Py_ssize_t m = query_hours.shape[0]
    cdef Py_ssize_t lo = 0, hi = 0, k, i
    cdef long long t
    cdef double s_pq = 0.0, s_q = 0.0, mag_pq = 0.0, mag_q = 0.0, pq
    cdef bint removed
    out = np.empty(m, dtype=np.float64)
    cdef double[:] res = out
    with nogil:
        for k in range(m):
            t = query_hours[k]
            while hi < n and seg_hours[hi] < t:
                pq = price[hi] * qty[hi]
                s_pq += pq
                s_q += qty[hi]
                mag_pq += fabs(pq)
                mag_q += qty[hi]
                hi += 1
            removed = False
            while lo < hi and seg_hours[lo] < t - window:
                s_pq -= price[lo] * qty[lo]
                s_q -= qty[lo]
                lo += 1
                removed = True
            if removed and (s_q < RESUM * mag_q or fabs(s_pq) < RESUM * mag_pq):
                # running sums lost too many digits to cancellation: start afresh
                s_pq = 0.0
                s_q = 0.0
                mag_pq = 0.0
                for i in range(lo, hi):
                    pq = price[i] * qty[i]
                    s_pq += pq
                    s_q += qty[i]
                    mag_pq += fabs(pq)
                mag_q = s_q
            if lo == hi or not s_q > 0.0:
                res[k] = NAN
            else:
                res[k] = s_pq / s_q
    return out


def merit_order_dispatch(const double[:] qty, const long long[:] order, double load):
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t i, j
    cdef long long marginal = -1
    cdef double remaining = load
    cdef double slack = 1e-12 * load
    cdef double q
    out = np.zeros(qty.shape[0], dtype=np.float64)
    cdef double[:] acc = out
    with nogil:
        for i in range(n):
            j = order[i]
            q = qty[j]
            if q <= 0.0:
                continue
            if q >= remaining - slack:
                acc[j] = q if q < remaining else remaining
                marginal = j
                break
            acc[j] = q
            remaining -= q
    return out, marginal


def enumerate_min_cover(const double[:] cost, const double[:] qty, double load):
    cdef Py_ssize_t n = cost.shape[0]
    cdef unsigned long long total, k, best = 0
    cdef Py_ssize_t i
    cdef double c, q, best_cost = 0.0
    cdef bint found = False
    if n > 62:
        raise ValueError("exhaustive enumeration supports at most 62 segments")
    total = (<unsigned long long>1) << n
    with nogil:
        for k in range(1, total):
            c = 0.0
            q = 0.0
            for i in range(n):
                if (k >> i) & 1:
                    c += cost[i]
                    q += qty[i]
            if q >= load and (not found or c < best_cost):
                best_cost = c
                best = k
                found = True
    mask = np.zeros(n, dtype=bool)
    if found:
        for i in range(n):
            if (best >> i) & 1:
                mask[i] = True
    return mask, best_cost, bool(found)


cdef struct _BnB:
    const double* price
    const double* qty
    Py_ssize_t n
    double need
    double best
    bint found
    char* cur
    char* best_sel


cdef double _bound(_BnB* s, Py_ssize_t i, double got) noexcept nogil:
    cdef double missing = s.need - got
    cdef double extra = 0.0
    while i < s.n and missing > 0.0:
        if s.qty[i] >= missing:
            extra += s.price[i] * missing
            missing = 0.0
        else:
            extra += s.price[i] * s.qty[i]
            missing -= s.qty[i]
        i += 1
    if missing > 0.0:
        return -1.0
    return extra


cdef void _search(_BnB* s, Py_ssize_t i, double cost, double got) noexcept nogil:
    cdef double extra
    cdef Py_ssize_t j
    if got >= s.need:
        if not s.found or cost < s.best:
            s.best = cost
            s.found = True
            for j in range(s.n):
                s.best_sel[j] = s.cur[j]
        return
    if i >= s.n:
        return
    extra = _bound(s, i, got)
    if extra < 0.0:
        return
    if s.found and cost + extra >= s.best:
        return
    s.cur[i] = 1
    _search(s, i + 1, cost + s.price[i] * s.qty[i], got + s.qty[i])
    s.cur[i] = 0
    _search(s, i + 1, cost, got)


def branch_and_bound_cover(const double[:] price, const double[:] qty, double need):
    """Exact min-cost cover over positive-price segments sorted by price."""
    cdef Py_ssize_t n = price.shape[0]
    cdef _BnB s
    cur = np.zeros(n, dtype=np.int8)
    sel = np.zeros(n, dtype=np.int8)
    cdef char[:] cur_v = cur
    cdef char[:] sel_v = sel
    p = np.ascontiguousarray(price)
    q = np.ascontiguousarray(qty)
    cdef const double[:] pv = p
    cdef const double[:] qv = q
    if need <= 0.0:
        return sel.astype(bool), 0.0, True
    if n == 0:
        return sel.astype(bool), 0.0, False
    s.price = &pv[0]
    s.qty = &qv[0]
    s.n = n
    s.need = need
    s.best = 0.0
    s.found = False
    s.cur = &cur_v[0]
    s.best_sel = &sel_v[0]
    with nogil:
        _search(&s, 0, 0.0, 0.0)
    return sel.astype(bool), s.best, bool(s.found)
