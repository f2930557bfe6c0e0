"""Pure numpy versions of the compiled kernels, same algorithms and loop order."""

import math

import numpy as np


def matmul_fixed(a, b):
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    # one rank-1 update per inner index keeps the per-entry summation order
    # identical to the scalar loop: ((0 + a0*b0) + a1*b1) + ...
    for k in range(kk):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def jacobi_column_norms(u, tol, max_sweeps):
    n = u.shape[0]
    sweep = 0
    rotated = True
    while rotated and sweep < max_sweeps:
        rotated = False
        sweep += 1
        for p in range(n - 1):
            up = u[p]
            for q in range(p + 1, n):
                uq = u[q]
                alpha = float(up @ up)
                beta = float(uq @ uq)
                gamma = float(up @ uq)
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha) * math.sqrt(beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta
                else:
                    t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * up - s * uq
                uq[:] = s * up + c * uq
                up[:] = new_p
    return np.sqrt(np.einsum("ij,ij->i", u, u)), sweep
