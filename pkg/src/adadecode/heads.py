"""Intermediate LM heads: a d-by-d transform composed with the final head.

Each exit layer owns a learnable transform T so that its vocabulary
distribution is softmax((norm(h) @ T^t) @ E*^t), computed as two small
products without ever materializing the full per-layer head E* @ T. The
transform is initialized to the identity, which reproduces "apply the
original head to intermediate features" as the untrained baseline.

Also houses the decomposition utilities: reconstructing the transform that
expresses any full head in terms of the final one, and the rank report
that certifies the final head has full column rank (which is what makes
the decomposition lossless).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import RankDeficiencyError, ShapeError
from .linalg import cholesky_solve, matmul, singular_values
from .model import TransformerModel, rms_norm_rows, _softmax_row

RANK_TOLERANCE = 1e-10


@dataclass
class IntermediateHead:
    exit_layer: int  # 1-based; must be < num_layers
    transform: np.ndarray  # (d, d)

    def __post_init__(self):
        t = np.asarray(self.transform, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ShapeError(f"head transform must be square, got {t.shape}")
        if not np.isfinite(t).all():
            raise FloatingPointError("head transform has non-finite entries")
        self.transform = t


@dataclass
class HeadSet:
    heads: list[IntermediateHead]

    def __post_init__(self):
        layers = [h.exit_layer for h in self.heads]
        if sorted(set(layers)) != layers:
            raise ValueError(f"exit layers must be strictly increasing, got {layers}")
        self._by_layer = {h.exit_layer: h for h in self.heads}

    def exit_layers(self) -> list[int]:
        return [h.exit_layer for h in self.heads]

    def head_at(self, layer: int) -> IntermediateHead | None:
        return self._by_layer.get(layer)

    def draft_distribution(
        self, model: TransformerModel, layer: int, hidden: np.ndarray, position: int
    ) -> np.ndarray | None:
        """Early-prediction distribution at `layer`, or None if no head there.

        `position` is unused here but part of the hook signature so test
        doubles can script per-position behaviour.
        """
        head = self._by_layer.get(layer)
        if head is None:
            return None
        return head_distribution(model, head, hidden)

    def num_trainable(self) -> int:
        return sum(h.transform.size for h in self.heads)


def identity_heads(model: TransformerModel, exit_layers) -> HeadSet:
    """Untrained heads (identity transforms) at the given 1-based layers."""
    d = model.config.hidden_dim
    bad = [l for l in exit_layers if not (1 <= l < model.config.num_layers)]
    if bad:
        raise ValueError(f"exit layers must lie in [1, L-1], got {bad}")
    return HeadSet([IntermediateHead(int(l), np.eye(d)) for l in sorted(exit_layers)])


def head_distribution(
    model: TransformerModel, head: IntermediateHead, hidden: np.ndarray
) -> np.ndarray:
    """softmax((norm(hidden) @ T^t) @ E*^t) as two small products."""
    hidden = np.asarray(hidden, dtype=np.float64).reshape(1, -1)
    g = rms_norm_rows(hidden, model.final_gain)
    u = backend.matmul(g, np.ascontiguousarray(head.transform.T))
    logits = backend.matmul(u, model.lm_head_t)[0]
    return _softmax_row(logits)


@dataclass
class DistillSample:
    hidden: np.ndarray  # (d,) exit-layer features, frozen
    target: np.ndarray  # (V,) final-layer distribution


def _stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    if len(samples) == 0:
        raise ValueError("empty distillation batch")
    hid = np.stack([s.hidden for s in samples])
    tgt = np.stack([s.target for s in samples])
    return hid, tgt


def head_kl_losses(
    samples, head: IntermediateHead, model: TransformerModel
) -> np.ndarray:
    """Per-sample KL(target || head distribution)."""
    hid, tgt = _stack_samples(samples)
    g = rms_norm_rows(hid, model.final_gain)
    u = backend.matmul(g, np.ascontiguousarray(head.transform.T))
    logits = backend.matmul(u, model.lm_head_t)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    log_q = logits - m - np.log(backend.row_sums(e))[:, None]
    ent = np.where(tgt > 0.0, tgt * np.log(np.where(tgt > 0.0, tgt, 1.0)), 0.0)
    return backend.row_sums(ent - tgt * log_q)


def mean_kl_loss(samples, head: IntermediateHead, model: TransformerModel) -> float:
    return float(np.mean(head_kl_losses(samples, head, model)))


def kl_gradient(samples, head: IntermediateHead, model: TransformerModel) -> np.ndarray:
    """Exact gradient of the mean KL loss with respect to the transform.

    Per sample the logit gradient is (q - target); it back-propagates
    through the final head and the feature product, giving
    outer(E*^t (q - target), norm(hidden)) averaged over the batch.
    """
    hid, tgt = _stack_samples(samples)
    n = hid.shape[0]
    g = rms_norm_rows(hid, model.final_gain)
    u = backend.matmul(g, np.ascontiguousarray(head.transform.T))
    logits = backend.matmul(u, model.lm_head_t)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    q = e / backend.row_sums(e)[:, None]
    dlogits = (q - tgt) / n
    du = backend.matmul(dlogits, model.lm_head)  # (n, d)
    return backend.matmul(np.ascontiguousarray(du.T), g)  # (d, d)


def reconstruct_transform(e_star: np.ndarray, e_target: np.ndarray) -> np.ndarray:
    """Transform T with E* @ T = projection of the target head onto col(E*).

    Solves (E*^t E*) T = E*^t e_target. When e_target lies in E*'s column
    space (guaranteed if E* has full column rank) the reconstruction is
    exact. Requires full column rank, checked via singular values.
    """
    e_star = np.asarray(e_star, dtype=np.float64)
    e_target = np.asarray(e_target, dtype=np.float64)
    if e_star.shape != e_target.shape:
        raise ShapeError(f"head shapes differ: {e_star.shape} vs {e_target.shape}")
    smallest = float(singular_values(e_star)[-1])
    if smallest <= RANK_TOLERANCE:
        raise RankDeficiencyError(
            f"final head is rank-deficient: smallest singular value {smallest!r}"
        )
    gram = matmul(np.ascontiguousarray(e_star.T), e_star)
    rhs = matmul(np.ascontiguousarray(e_star.T), e_target)
    return cholesky_solve(gram, rhs)


@dataclass(frozen=True)
class RankReport:
    shape: tuple[int, int]
    num_singular_values: int
    num_nonzero: int
    smallest: float


def rank_report(e_star: np.ndarray, tolerance: float = RANK_TOLERANCE) -> RankReport:
    """Shape, singular value count, nonzero count, and smallest value."""
    e_star = np.asarray(e_star, dtype=np.float64)
    values = singular_values(e_star)
    return RankReport(
        shape=(e_star.shape[0], e_star.shape[1]),
        num_singular_values=int(values.size),
        num_nonzero=int(np.sum(values > tolerance)),
        smallest=float(values[-1]),
    )
