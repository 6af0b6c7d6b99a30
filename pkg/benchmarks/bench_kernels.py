"""Time the compiled kernels against the pure-Python fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run on the same inputs with both backends; the script checks
that the outputs agree before printing the best-of-``repeat`` wall time.
"""

import argparse
import sys
import timeit

import numpy as np

from ampsim._kernels import _fallback

try:
    from ampsim._kernels import _core
except ImportError:
    _core = None


def rolling_case(rng, n_hours=24 * 400, per_hour=8, n_queries=24 * 365, window=24 * 90):
    hours = np.repeat(np.arange(n_hours, dtype=np.int64), per_hour)
    price = rng.uniform(0, 800, hours.size)
    qty = rng.uniform(0, 50, hours.size)
    queries = np.arange(n_hours - n_queries, n_hours, dtype=np.int64)
    return (hours, price, qty, queries, window)


def dispatch_case(rng, n=5000):
    qty = rng.uniform(1, 100, n)
    order = np.argsort(rng.uniform(0, 200, n), kind="stable").astype(np.int64)
    return (qty, order, 0.9 * qty.sum())


def enumerate_case(rng, n=16):
    price = rng.uniform(0, 200, n)
    qty = rng.uniform(1, 20, n)
    return (price * qty, qty, 0.5 * qty.sum())


def bnb_case(rng, n=30):
    price = np.sort(rng.uniform(0, 200, n))
    qty = rng.uniform(1, 20, n)
    return (price, qty, 0.55 * qty.sum())


CASES = {
    "rolling_weighted_mean": rolling_case,
    "merit_order_dispatch": dispatch_case,
    "enumerate_min_cover": enumerate_case,
    "branch_and_bound_cover": bnb_case,
}


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b), equal_nan=np.asarray(a).dtype.kind == "f")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _core is None:
        print("compiled core not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<24} {'python [s]':>12} {'cython [s]':>12} {'speedup':>9}")
    for name, make in CASES.items():
        inputs = make(rng)
        slow, fast = getattr(_fallback, name), getattr(_core, name)
        if not _same(slow(*inputs), fast(*inputs)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t_py = min(timeit.repeat(lambda: slow(*inputs), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: fast(*inputs), number=1, repeat=args.repeat))
        print(f"{name:<24} {t_py:>12.5f} {t_cy:>12.5f} {t_py / t_cy:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
