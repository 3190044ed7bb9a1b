# cython: language_level=3
# cython: boundscheck=False
# cython: wraparound=False
# cython: cdivision=True
"""Compiled reduction kernels with a fixed, documented summation order.

Every reduction accumulates left to right (ascending index), so results are
bit-for-bit reproducible run to run and identical to the pure-Python backend
in :mod:`pairzsl._kernels_py`. Keep the two files in lockstep: the accumulation
order is a contract, not an implementation detail.
"""

import numpy as np


def matmul(a, b):
    """Matrix product; out[i, j] accumulates a[i, k] * b[k, j] in ascending k."""
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t m = av.shape[0]
    cdef Py_ssize_t kk = av.shape[1]
    cdef Py_ssize_t n = bv.shape[1]
    out_arr = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, k, j
    cdef double aik
    for i in range(m):
        for k in range(kk):
            aik = av[i, k]
            for j in range(n):
                out[i, j] = out[i, j] + aik * bv[k, j]
    return out_arr


def colsum(x):
    """Column sums of a 2-D matrix, accumulated over rows in ascending order."""
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t m = xv.shape[0]
    cdef Py_ssize_t n = xv.shape[1]
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    for i in range(m):
        for j in range(n):
            out[j] = out[j] + xv[i, j]
    return out_arr


def rowsum(x):
    """Row sums of a 2-D matrix, accumulated over columns in ascending order."""
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t m = xv.shape[0]
    cdef Py_ssize_t n = xv.shape[1]
    out_arr = np.zeros(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc = acc + xv[i, j]
        out[i] = acc
    return out_arr
