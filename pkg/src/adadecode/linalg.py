"""Deterministic dense linear algebra and probability primitives.

Matrices are C-contiguous float64 2-D ndarrays; probability vectors are
1-D float64 ndarrays with nonnegative entries summing to 1 within 1e-9.
Every reduction runs in a fixed documented order (see backend), so results
are reproducible across runs and independent of batching.
"""

from __future__ import annotations

import numpy as np

from . import backend
from .errors import ConvergenceError, RankDeficiencyError, ShapeError, SupportError
from .rng import Rng

_SVD_TOL = 1e-12
_SVD_MAX_SWEEPS = 100


def as_matrix(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return np.ascontiguousarray(a)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with row-major inner-loop summation order.

    out[i, j] accumulates a[i, k] * b[k, j] over increasing k, one IEEE
    multiply and add per term; deterministic and batching-independent.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = backend.matmul(a, b)
    if not np.isfinite(out).all():
        raise FloatingPointError("matmul produced non-finite entries")
    return out


def ordered_sum(x: np.ndarray) -> float:
    """Left-to-right sum of a 1-D array."""
    x = np.asarray(x, dtype=np.float64)
    return float(backend.row_sums(x[None, :])[0]) if x.size else 0.0


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax; output is a valid probability vector."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ShapeError("softmax of an empty vector")
    if not np.isfinite(logits).all():
        raise FloatingPointError("softmax input contains non-finite entries")
    e = np.exp(logits - logits.max())
    return e / ordered_sum(e)


def check_prob_vector(p: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ShapeError("probability vector must be 1-D and nonempty")
    if (p < 0).any():
        raise ValueError("probability vector has negative entries")
    total = ordered_sum(p)
    if abs(total - 1.0) > atol:
        raise ValueError(f"probability vector sums to {total!r}, not 1")
    return p


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """sum p_i * ln(p_i / q_i) with the 0 * ln(0/x) = 0 convention.

    Raises SupportError naming the first index where q is zero but p is not
    (the divergence would be infinite there).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    bad = (q == 0.0) & (p > 0.0)
    if bad.any():
        idx = int(np.argmax(bad))
        raise SupportError(f"q has zero mass at index {idx} where p is positive")
    terms = np.zeros_like(p)
    mask = p > 0.0
    terms[mask] = p[mask] * np.log(p[mask] / q[mask])
    return ordered_sum(terms)


def singular_values(m: np.ndarray) -> np.ndarray:
    """Singular values in nonincreasing order via one-sided Jacobi rotations.

    Iterates plane rotations on column pairs until every pair is orthogonal
    to relative tolerance 1e-12, at most 100 sweeps; raises ConvergenceError
    if the budget is exhausted.
    """
    m = as_matrix(m)
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError("singular_values of an empty matrix")
    a = m.copy() if m.shape[0] >= m.shape[1] else np.ascontiguousarray(m.T)
    n = a.shape[1]
    for _ in range(_SVD_MAX_SWEEPS):
        off = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = a[:, p]
                aq = a[:, q]
                alpha = float(ap @ ap)
                beta = float(aq @ aq)
                gamma = float(ap @ aq)
                if abs(gamma) <= _SVD_TOL * np.sqrt(alpha * beta):
                    continue
                off += 1
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                new_q = s * ap + c * aq
                a[:, p] = new_p
                a[:, q] = new_q
        if off == 0:
            values = np.sqrt(np.sum(a * a, axis=0))
            return np.sort(values)[::-1].copy()
    raise ConvergenceError(f"Jacobi SVD did not converge in {_SVD_MAX_SWEEPS} sweeps")


def cholesky_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for symmetric positive-definite a."""
    a = as_matrix(a)
    b = as_matrix(b)
    n = a.shape[0]
    if a.shape[1] != n or b.shape[0] != n:
        raise ShapeError(f"cholesky_solve shape mismatch: {a.shape} vs {b.shape}")
    chol = np.zeros_like(a)
    for i in range(n):
        for j in range(i + 1):
            acc = a[i, j] - ordered_sum(chol[i, :j] * chol[j, :j])
            if i == j:
                if acc <= 0.0:
                    raise RankDeficiencyError(
                        f"matrix is not positive definite (pivot {acc!r} at {i})"
                    )
                chol[i, i] = np.sqrt(acc)
            else:
                chol[i, j] = acc / chol[j, j]
    # forward then backward substitution, column blocks of b at once
    y = np.zeros_like(b)
    for i in range(n):
        y[i] = (b[i] - backend.matmul(chol[i : i + 1, :i], y[:i])) / chol[i, i]
    x = np.zeros_like(b)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - backend.matmul(chol[i + 1 :, i][None, :], x[i + 1 :])) / chol[i, i]
    return x


def sample_categorical(dist: np.ndarray, rng: Rng | None = None, greedy: bool = False) -> int:
    """Draw a token id from a probability vector.

    Greedy mode returns the argmax with ties broken toward the lowest id and
    consumes no randomness; otherwise inverse-CDF sampling consumes exactly
    one uniform draw. Zero-probability ids are never returned.
    """
    dist = check_prob_vector(dist)
    if greedy:
        return int(np.argmax(dist))
    if rng is None:
        raise ValueError("categorical sampling requires an rng")
    u = rng.uniform() * ordered_sum(dist)
    idx = int(np.searchsorted(np.cumsum(dist), u, side="right"))
    if idx >= dist.size:
        idx = int(np.max(np.nonzero(dist > 0.0)[0]))
    return idx
