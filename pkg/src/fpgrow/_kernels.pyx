# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Must stay numerically interchangeable with _fallback."""

from libc.math cimport sqrt, fabs, copysign

import numpy as np
cimport numpy as cnp

cnp.import_array()


def matmul_fixed(const double[:, ::1] a, const double[:, ::1] b):
    """Row-major product, accumulating over the inner index in ascending order."""
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for k in range(kk):
                    acc = acc + a[i, k] * b[k, j]
                o[i, j] = acc
    return out


def jacobi_column_norms(double[:, ::1] u, double tol, int max_sweeps):
    """One-sided Jacobi on the rows of ``u`` (rows are the matrix columns).

    Rotates ``u`` in place until every pair of rows is orthogonal to ``tol``
    relative precision and returns ``(norms, sweeps)``.
    """
    cdef Py_ssize_t n = u.shape[0], m = u.shape[1]
    cdef Py_ssize_t p, q, i
    cdef double alpha, beta, gamma, zeta, t, c, s, up, uq
    cdef int sweep = 0
    cdef bint rotated = True
    with nogil:
        while rotated and sweep < max_sweeps:
            rotated = False
            sweep += 1
            for p in range(n - 1):
                for q in range(p + 1, n):
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for i in range(m):
                        alpha = alpha + u[p, i] * u[p, i]
                        beta = beta + u[q, i] * u[q, i]
                        gamma = gamma + u[p, i] * u[q, i]
                    if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha) * sqrt(beta):
                        continue
                    rotated = True
                    zeta = (beta - alpha) / (2.0 * gamma)
                    if fabs(zeta) > 1e150:
                        t = 0.5 / zeta
                    else:
                        t = copysign(1.0, zeta) / (fabs(zeta) + sqrt(1.0 + zeta * zeta))
                    c = 1.0 / sqrt(1.0 + t * t)
                    s = c * t
                    for i in range(m):
                        up = u[p, i]
                        uq = u[q, i]
                        u[p, i] = c * up - s * uq
                        u[q, i] = s * up + c * uq
    norms = np.empty(n, dtype=np.float64)
    cdef double[::1] nv = norms
    for p in range(n):
        alpha = 0.0
        for i in range(m):
            alpha = alpha + u[p, i] * u[p, i]
        nv[p] = sqrt(alpha)
    return norms, sweep
