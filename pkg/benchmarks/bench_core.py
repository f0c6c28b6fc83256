"""Compiled core vs numpy fallback on the cell-Galerkin kernels.

    python benchmarks/bench_core.py [--cells 256 1024] [--repeat 3]

Prints the best wall time per kernel and backend, the speedup, and the
largest absolute difference between the two results.
"""
import argparse
import math
import time

import numpy as np

from dyadic_t1 import _pycore

try:
    from dyadic_t1 import _core
except ImportError:
    _core = None


def _best(fn, repeat):
    best, out = math.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, np.asarray(out)


def cases(n):
    w = 1.0 / 32
    x0 = -n * w / 2
    nodes, weights = np.polynomial.legendre.leggauss(8)
    cut = 2.0 * math.sqrt(46.0 * math.log(10.0))
    return {
        "hilbert_cells": lambda m: m.hilbert_cells(x0, x0, w, n, n),
        "compact_cells": lambda m: m.compact_cells(x0, x0, w, n, n, 2.0, 4.0, 1.0,
                                                   nodes, weights, cut),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--cells", type=int, nargs="+", default=[256, 1024])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _core is None:
        print("compiled core not available; build with `python setup.py build_ext --inplace`")
    print(f"{'kernel':<15} {'cells':>6} {'python[s]':>10} {'cython[s]':>10} {'speedup':>8} {'max|diff|':>10}")
    for n in args.cells:
        for name, fn in cases(n).items():
            tp, rp = _best(lambda: fn(_pycore), args.repeat)
            if _core is None:
                print(f"{name:<15} {n:>6} {tp:>10.4f} {'-':>10} {'-':>8} {'-':>10}")
                continue
            tc, rc = _best(lambda: fn(_core), args.repeat)
            diff = float(np.max(np.abs(rp - rc)))
            print(f"{name:<15} {n:>6} {tp:>10.4f} {tc:>10.4f} {tp / tc:>8.1f} {diff:>10.2e}")


if __name__ == "__main__":
    main()
