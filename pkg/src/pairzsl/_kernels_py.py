"""Pure-Python (NumPy) fallback for the compiled reduction kernels.

Accumulation order is the contract shared with ``_kernels.pyx``: every
reduction adds terms in ascending index order, so both backends produce
bit-identical results. ``cumsum`` is used for the row/column reductions
because NumPy computes it as a strict sequential scan.
"""

import numpy as np


def _as_c2d(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b):
    """Matrix product; out[i, j] accumulates a[i, k] * b[k, j] in ascending k."""
    a = _as_c2d(a)
    b = _as_c2d(b)
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    if m == 0 or n == 0 or kk == 0:
        return out
    tmp = np.empty((m, n), dtype=np.float64)
    for k in range(kk):
        np.multiply(a[:, k, None], b[k, :], out=tmp)
        np.add(out, tmp, out=out)
    return out


def colsum(x):
    """Column sums of a 2-D matrix, accumulated over rows in ascending order."""
    x = _as_c2d(x)
    m, n = x.shape
    if m == 0 or n == 0:
        return np.zeros(n, dtype=np.float64)
    return x.cumsum(axis=0)[-1].copy()


def rowsum(x):
    """Row sums of a 2-D matrix, accumulated over columns in ascending order."""
    x = _as_c2d(x)
    m, n = x.shape
    if m == 0 or n == 0:
        return np.zeros(m, dtype=np.float64)
    return x.cumsum(axis=1)[:, -1].copy()
