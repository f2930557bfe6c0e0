"""Dense matrix helpers, seeded RNG and singular-value machinery.

Matrices are plain 2-D numpy arrays. The two hot routines (fixed-order
matmul and one-sided Jacobi) come from the compiled ``_kernels`` extension
when it is importable, otherwise from the numpy ``_fallback`` module. Set
``FPGROW_PURE_PYTHON=1`` to force the fallback.
"""

import math
import os
import zlib

import numpy as np

from .errors import DimensionError, NumericError, ZeroMatrixError

if os.environ.get("FPGROW_PURE_PYTHON", "") not in ("", "0"):
    from . import _fallback as _impl

    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        from . import _fallback as _impl

        BACKEND = "python"

EFFECTIVE_RANK_FORMULA = "exp(-sum(p_i*ln(p_i))), p_i = s_i/sum(s)"

_EPS = np.finfo(np.float64).eps


def as_matrix(m, name="matrix"):
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b):
    """Deterministic float64 product with a fixed inner summation order.

    Every entry is accumulated as ``((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``
    so the result is bit-stable and equal to the naive triple loop.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return _impl.matmul_fixed(a, b)


def hconcat(parts):
    parts = [as_matrix(p) for p in parts]
    if not parts:
        raise DimensionError("hconcat needs at least one block")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"hconcat row counts differ: {sorted(rows)}")
    return np.concatenate(parts, axis=1)


def vstack(parts):
    parts = [as_matrix(p) for p in parts]
    if not parts:
        raise DimensionError("vstack needs at least one block")
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"vstack column counts differ: {sorted(cols)}")
    return np.concatenate(parts, axis=0)


def singular_values(m, tol=None, max_sweeps=80):
    """Singular values in descending order via one-sided Jacobi rotations."""
    a = as_matrix(m)
    if a.size == 0:
        raise DimensionError("singular_values of an empty matrix")
    a = a.astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError("singular_values: matrix has non-finite entries")
    # rotate the shorter side so there are min(rows, cols) vectors
    u = np.ascontiguousarray(a.T if a.shape[0] >= a.shape[1] else a)
    if tol is None:
        tol = _EPS * max(u.shape[1], 1)
    norms, _ = _impl.jacobi_column_norms(u, float(tol), int(max_sweeps))
    return np.sort(norms)[::-1].copy()


def effective_rank(m):
    """Entropy effective rank of ``m``'s spectrum (scale invariant)."""
    s = singular_values(m)
    return effective_rank_from_singular_values(s)


def effective_rank_from_singular_values(s):
    s = np.asarray(s, dtype=np.float64)
    total = s.sum()
    if not total > 0.0:
        raise ZeroMatrixError("effective_rank of an all-zero matrix")
    p = s[s > 0.0] / total
    return float(math.exp(-float(np.sum(p * np.log(p)))))


class Rng:
    """Seeded, splittable random stream built on numpy's Philox counter generator.

    Children are derived by name or integer path, never by drawing from the
    parent, so the order in which children are requested does not matter.
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, key):
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        return Rng(self.seed, self.path + (int(key),))

    def normal(self, shape, scale=1.0, dtype=np.float64):
        return (self.gen.standard_normal(shape) * scale).astype(dtype)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)

    def bytes(self, n):
        return self.gen.bytes(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
