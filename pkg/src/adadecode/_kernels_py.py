"""Pure-numpy fallback kernels.

Reproduces the compiled kernels' per-element IEEE operation sequence
exactly: matmul accumulates out[i, j] over k in increasing order (one
multiply, one add per term), row_sums accumulates left to right. Both
backends therefore return bitwise-identical arrays.
"""

import numpy as np


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for p in range(k):
        out += a[:, p : p + 1] * b[p]
    return out


def row_sums(a: np.ndarray) -> np.ndarray:
    out = np.zeros(a.shape[0], dtype=np.float64)
    for j in range(a.shape[1]):
        out += a[:, j]
    return out
