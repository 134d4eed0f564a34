# cython: language_level=3
"""Compiled f64 kernels with a fixed reduction order.

matmul: out[i, j] accumulated over k in increasing order ((i, k, j) loop
nest, j innermost for contiguous access). row_sums: left to right.
Compiled with -ffp-contract=off so mul+add stay two IEEE operations,
bitwise-identical to the numpy fallback in _kernels_py.
"""

import numpy as np

cimport cython


@cython.boundscheck(False)
@cython.wraparound(False)
def matmul(const double[:, :] a, const double[:, :] b):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t k = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    out_arr = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double aik
    for i in range(m):
        for p in range(k):
            aik = a[i, p]
            for j in range(n):
                out[i, j] = out[i, j] + aik * b[p, j]
    return out_arr


@cython.boundscheck(False)
@cython.wraparound(False)
def row_sums(const double[:, :] a):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t n = a.shape[1]
    out_arr = np.zeros(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc = acc + a[i, j]
        out[i] = acc
    return out_arr
