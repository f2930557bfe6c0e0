"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per (kernel, shape) with the best time of each backend,
the speedup, and whether the two results agree (bitwise for matmul).
"""

import argparse
import time

import numpy as np

from fpgrow import _fallback
from fpgrow.linalg import Rng

try:
    from fpgrow import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not built; nothing to compare")
        return
    r = Rng(0)
    print(f"{'kernel':<8} {'shape':<18} {'compiled':>10} {'python':>10} {'speedup':>8}  agree")
    for m, k, n in [(32, 32, 32), (64, 128, 64), (128, 256, 128)]:
        a = r.child(f"a{m}").normal((m, k))
        b = r.child(f"b{m}").normal((k, n))
        tc, oc = best_of(lambda: _kernels.matmul_fixed(a, b), args.repeat)
        tp, op = best_of(lambda: _fallback.matmul_fixed(a, b), args.repeat)
        print(f"{'matmul':<8} {f'{m}x{k}x{n}':<18} {tc:10.5f} {tp:10.5f} {tp / tc:8.1f}  {np.array_equal(oc, op)}")
    for rows, cols in [(16, 64), (32, 128), (64, 256)]:
        u = r.child(f"u{rows}").normal((rows, cols))
        tol = np.finfo(float).eps * cols
        tc, (sc, _) = best_of(lambda: _kernels.jacobi_column_norms(u.copy(), tol, 80), args.repeat)
        tp, (sp, _) = best_of(lambda: _fallback.jacobi_column_norms(u.copy(), tol, 80), args.repeat)
        agree = np.allclose(np.sort(sc), np.sort(sp), rtol=1e-12, atol=0)
        print(f"{'jacobi':<8} {f'{rows}x{cols}':<18} {tc:10.5f} {tp:10.5f} {tp / tc:8.1f}  {agree}")


if __name__ == "__main__":
    main()
