"""Dense matrix primitives shared by every other module.

A "matrix" throughout the package is a C-contiguous 2-D float64 ndarray;
vectors are 1-D float64 ndarrays. All reductions route through
:mod:`pairzsl.backend`, which fixes the accumulation order (ascending index)
so results are reproducible bit for bit across runs and across the compiled
and pure-Python backends.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import backend
from .errors import NonFiniteError, ShapeError


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array; reject other ranks."""
    out = np.ascontiguousarray(x, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {out.shape}")
    return out


def check_finite(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{name} contains NaN or infinite entries")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with deterministic left-to-right accumulation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return backend.matmul(a, b)


def vec_sum(v: np.ndarray) -> float:
    """Sum of a 1-D vector, accumulated left to right."""
    v = np.ascontiguousarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"vec_sum needs a 1-D vector, got shape {v.shape}")
    return float(backend.rowsum(v.reshape(1, -1))[0])


def row_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and biased variance (divide by m) of a batch."""
    x = as_matrix(x, "row_stats input")
    m = x.shape[0]
    if m < 1:
        raise ShapeError("row_stats requires at least one row")
    mean = backend.colsum(x) / m
    centered = x - mean
    var = backend.colsum(centered * centered) / m
    return mean, var


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable elementwise logistic function."""
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "sigmoid input")
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "relu input")
    return np.maximum(x, 0.0)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    x = as_matrix(x, "softmax input")
    check_finite(x, "softmax input")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = backend.rowsum(e)
    return e / denom[:, None]


def concat_cols(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise concatenation [a : b]; row counts must match."""
    a = as_matrix(a, "concat_cols left")
    b = as_matrix(b, "concat_cols right")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(
            f"concat_cols row mismatch: {a.shape[0]} vs {b.shape[0]}"
        )
    return np.hstack([a, b])


def bilinear_equivalence(
    x: np.ndarray, a: np.ndarray, w: np.ndarray
) -> tuple[float, float]:
    """Evaluate the bilinear score two ways.

    Returns (lhs, rhs) where lhs contracts x against (w @ a) and rhs is the
    dot product of the outer product x (x) a, flattened row-major, with the
    row-major flattening of w. The two are mathematically identical; callers
    assert closeness within floating-point tolerance.
    """
    x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1)
    w = as_matrix(w, "bilinear weight")
    d, r = w.shape
    if x.shape[0] != d or a.shape[0] != r:
        raise ShapeError(
            f"bilinear shape mismatch: x has {x.shape[0]}, a has {a.shape[0]}, "
            f"w is {w.shape}"
        )
    wa = backend.matmul(w, a.reshape(-1, 1))[:, 0]
    lhs = vec_sum(x * wa)
    u = w.reshape(-1)
    outer = (x[:, None] * a[None, :]).reshape(-1)
    rhs = vec_sum(outer * u)
    return lhs, rhs


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, entry by entry."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        f_plus = float(f(x))
        x[idx] = orig - h
        f_minus = float(f(x))
        x[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(
                f"finite_diff_grad: non-finite evaluation at entry {idx}"
            )
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
        it.iternext()
    return grad
