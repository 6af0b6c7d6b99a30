"""Pure-Python twins of the compiled kernels in ``_core.pyx``.

Floating-point operations are performed in the same order as the compiled
versions so that both backends return bit-identical results.
"""

import sys

import numpy as np

# relative size below which running window sums are recomputed from scratch
RESUM = 1e-4
# relative shortfall forgiven on the marginal step (summation round-off)
DISPATCH_SLACK = 1e-12

_CHUNK_BITS = 16


def rolling_weighted_mean(seg_hours, price, qty, query_hours, window):
    seg_hours = np.asarray(seg_hours, dtype=np.int64).tolist()
    price = np.asarray(price, dtype=np.float64).tolist()
    qty = np.asarray(qty, dtype=np.float64).tolist()
    query_hours = np.asarray(query_hours, dtype=np.int64).tolist()
    n = len(seg_hours)
    out = np.empty(len(query_hours), dtype=np.float64)
    lo = hi = 0
    s_pq = s_q = mag_pq = mag_q = 0.0
    for k, t in enumerate(query_hours):
        while hi < n and seg_hours[hi] < t:
            pq = price[hi] * qty[hi]
            s_pq += pq
            s_q += qty[hi]
            mag_pq += abs(pq)
            mag_q += qty[hi]
            hi += 1
        removed = False
        while lo < hi and seg_hours[lo] < t - window:
            s_pq -= price[lo] * qty[lo]
            s_q -= qty[lo]
            lo += 1
            removed = True
        if removed and (s_q < RESUM * mag_q or abs(s_pq) < RESUM * mag_pq):
            s_pq = s_q = mag_pq = 0.0
            for i in range(lo, hi):
                pq = price[i] * qty[i]
                s_pq += pq
                s_q += qty[i]
                mag_pq += abs(pq)
            mag_q = s_q
        if lo == hi or not s_q > 0.0:
            out[k] = np.nan
        else:
            out[k] = s_pq / s_q
    return out


def merit_order_dispatch(qty, order, load):
    qty_l = np.asarray(qty, dtype=np.float64).tolist()
    out = np.zeros(len(qty_l), dtype=np.float64)
    marginal = -1
    remaining = float(load)
    slack = DISPATCH_SLACK * remaining
    for j in np.asarray(order, dtype=np.int64).tolist():
        q = qty_l[j]
        if q <= 0.0:
            continue
        if q >= remaining - slack:
            out[j] = min(q, remaining)
            marginal = j
            break
        out[j] = q
        remaining -= q
    return out, marginal


def enumerate_min_cover(cost, qty, load):
    cost = np.asarray(cost, dtype=np.float64)
    qty = np.asarray(qty, dtype=np.float64)
    n = cost.shape[0]
    if n > 62:
        raise ValueError("exhaustive enumeration supports at most 62 segments")
    total = 1 << n
    best, best_cost, found = 0, 0.0, False
    step = 1 << _CHUNK_BITS
    for start in range(1, total, step):
        k = np.arange(start, min(start + step, total), dtype=np.uint64)
        c = np.zeros(k.shape[0])
        q = np.zeros(k.shape[0])
        for i in range(n):
            bit = ((k >> np.uint64(i)) & np.uint64(1)).astype(bool)
            c = c + np.where(bit, cost[i], 0.0)
            q = q + np.where(bit, qty[i], 0.0)
        ok = np.flatnonzero(q >= load)
        if ok.size == 0:
            continue
        j = ok[np.argmin(c[ok])]
        if not found or c[j] < best_cost:
            best, best_cost, found = int(k[j]), float(c[j]), True
    mask = np.array([(best >> i) & 1 == 1 for i in range(n)], dtype=bool) if found else np.zeros(n, dtype=bool)
    return mask, best_cost, found


def branch_and_bound_cover(price, qty, need):
    """Exact min-cost cover over positive-price segments sorted by price."""
    price = np.asarray(price, dtype=np.float64).tolist()
    qty = np.asarray(qty, dtype=np.float64).tolist()
    n = len(price)
    if need <= 0.0:
        return np.zeros(n, dtype=bool), 0.0, True
    if n == 0:
        return np.zeros(n, dtype=bool), 0.0, False
    cur = [0] * n
    state = {"best": 0.0, "found": False, "sel": [0] * n}

    def bound(i, got):
        missing = need - got
        extra = 0.0
        while i < n and missing > 0.0:
            if qty[i] >= missing:
                extra += price[i] * missing
                missing = 0.0
            else:
                extra += price[i] * qty[i]
                missing -= qty[i]
            i += 1
        return -1.0 if missing > 0.0 else extra

    def search(i, cost, got):
        if got >= need:
            if not state["found"] or cost < state["best"]:
                state["best"], state["found"], state["sel"] = cost, True, list(cur)
            return
        if i >= n:
            return
        extra = bound(i, got)
        if extra < 0.0:
            return
        if state["found"] and cost + extra >= state["best"]:
            return
        cur[i] = 1
        search(i + 1, cost + price[i] * qty[i], got + qty[i])
        cur[i] = 0
        search(i + 1, cost, got)

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 4 * n + 100))
    try:
        search(0, 0.0, 0.0)
    finally:
        sys.setrecursionlimit(limit)
    return np.array(state["sel"], dtype=bool), state["best"], state["found"]
