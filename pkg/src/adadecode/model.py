"""Frozen toy decoder-only transformer.

Pre-norm blocks (RMS-style normalization), multi-head causal attention
with a per-layer KV cache, SiLU MLP, sinusoidal absolute positions, and a
final LM head. All math routes through the fixed-order kernels, and the
per-position attention reduction always runs over exactly the positions
visible to that query, so processing a contiguous batch of positions is
bitwise identical to processing them one at a time. That property is what
lets deferred layer work piggyback on later tokens without changing any
output.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import PromptError, ShapeError
from .linalg import ordered_sum
from .rng import MODEL_INIT_STREAM, Rng

NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    hidden_dim: int = 64
    num_attn_heads: int = 4
    vocab_size: int = 256
    max_positions: int = 512
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")
        if self.hidden_dim % self.num_attn_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_attn_heads")
        if self.vocab_size < self.hidden_dim:
            raise ValueError("vocab_size must be >= hidden_dim (full-rank head)")
        if self.max_positions < 1 or self.mlp_ratio < 1:
            raise ValueError("max_positions and mlp_ratio must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_attn_heads


@dataclass
class LayerWeights:
    wq: np.ndarray  # (d, d), applied as x @ wq
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray  # (d, mlp_ratio*d)
    w_down: np.ndarray  # (mlp_ratio*d, d)
    attn_gain: np.ndarray  # (d,)
    mlp_gain: np.ndarray  # (d,)

    def tensors(self) -> list[np.ndarray]:
        return [self.wq, self.wk, self.wv, self.wo, self.w_up, self.w_down,
                self.attn_gain, self.mlp_gain]


@dataclass
class TransformerModel:
    config: ModelConfig
    token_embedding: np.ndarray  # (V, d)
    layers: list[LayerWeights]
    final_gain: np.ndarray  # (d,)
    lm_head: np.ndarray  # (V, d); rows are per-token output embeddings

    @property
    def lm_head_t(self) -> np.ndarray:
        """Contiguous transpose of the LM head for fast logit products."""
        return np.ascontiguousarray(self.lm_head.T)

    def tensors(self) -> list[np.ndarray]:
        """All weight tensors in the canonical (serialization) order."""
        out = [self.token_embedding]
        for lw in self.layers:
            out.extend(lw.tensors())
        out.append(self.final_gain)
        out.append(self.lm_head)
        return out

    def freeze(self) -> "TransformerModel":
        for t in self.tensors():
            t.setflags(write=False)
        return self


@dataclass
class LayerActivation:
    position: int
    token: int
    hidden: np.ndarray  # (d,)


@dataclass
class ActivationBatch:
    positions: np.ndarray  # (B,) int64, strictly increasing
    tokens: np.ndarray  # (B,) int64
    hidden: np.ndarray  # (B, d)

    def __len__(self) -> int:
        return len(self.positions)


def model_fingerprint(model: TransformerModel) -> str:
    """SHA-256 over all weight tensors; detects any mutation."""
    h = hashlib.sha256()
    for t in model.tensors():
        h.update(np.ascontiguousarray(t).tobytes())
    return h.hexdigest()


def init_random_model(config: ModelConfig, rng: Rng) -> TransformerModel:
    """i.i.d. Gaussian weights scaled by 1/sqrt(d); norm gains start at 1."""
    local = rng.split(MODEL_INIT_STREAM) if rng.stream != MODEL_INIT_STREAM else rng
    d = config.hidden_dim
    scale = 1.0 / np.sqrt(d)

    def draw(rows: int, cols: int) -> np.ndarray:
        return local.normal_array(rows * cols, scale=scale).reshape(rows, cols)

    emb = draw(config.vocab_size, d)
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                wq=draw(d, d),
                wk=draw(d, d),
                wv=draw(d, d),
                wo=draw(d, d),
                w_up=draw(d, config.mlp_ratio * d),
                w_down=draw(config.mlp_ratio * d, d),
                attn_gain=np.ones(d),
                mlp_gain=np.ones(d),
            )
        )
    final_gain = np.ones(d)
    lm_head = draw(config.vocab_size, d)
    return TransformerModel(config, emb, layers, final_gain, lm_head).freeze()


def positional_encoding(positions: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal absolute encoding rows for the given positions."""
    positions = np.asarray(positions, dtype=np.float64)[:, None]
    half = np.arange(d // 2, dtype=np.float64)
    freqs = np.power(10000.0, -2.0 * half / d)[None, :]
    angles = positions * freqs
    out = np.empty((positions.shape[0], d))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def embed(model: TransformerModel, tokens, start_position: int) -> ActivationBatch:
    """Token embedding plus positional encoding for a contiguous span."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        raise PromptError("cannot embed an empty token sequence")
    if (tokens < 0).any() or (tokens >= model.config.vocab_size).any():
        raise PromptError("token id out of vocabulary")
    if start_position < 0 or start_position + tokens.size > model.config.max_positions:
        raise PromptError(
            f"positions [{start_position}, {start_position + tokens.size}) exceed "
            f"max_positions={model.config.max_positions}"
        )
    positions = np.arange(start_position, start_position + tokens.size, dtype=np.int64)
    hidden = model.token_embedding[tokens] + positional_encoding(positions, model.config.hidden_dim)
    return ActivationBatch(positions=positions, tokens=tokens.copy(), hidden=hidden)


def rms_norm_rows(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Per-row RMS normalization with a learned gain."""
    d = x.shape[1]
    ms = backend.row_sums(x * x) / d
    inv = 1.0 / np.sqrt(ms + NORM_EPS)
    return x * inv[:, None] * gain[None, :]


def _softmax_row(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max())
    return e / ordered_sum(e)


def layer_forward(
    model: TransformerModel,
    layer: int,
    batch: ActivationBatch,
    past_k: np.ndarray,
    past_v: np.ndarray,
) -> tuple[ActivationBatch, np.ndarray, np.ndarray]:
    """One pre-norm block over a contiguous batch of positions.

    `layer` is 1-based. `past_k`/`past_v` must cover exactly positions
    [0, batch.positions[0]); a gap raises CacheGapError since attention
    over an incomplete cache would silently corrupt future tokens. Returns
    the next-layer activations and the batch's K/V rows for caching.

    Each query attends to cached positions plus the earlier part of its
    own batch (causal), and its attention reduction runs left to right
    over exactly the visible positions, so the result for every position
    is bitwise identical however the sequence was split into batches.
    """
    from .errors import CacheGapError

    cfg = model.config
    if not (1 <= layer <= cfg.num_layers):
        raise ShapeError(f"layer {layer} out of range 1..{cfg.num_layers}")
    pos = batch.positions
    if len(pos) == 0:
        raise ShapeError("layer_forward on an empty batch")
    if np.any(np.diff(pos) != 1):
        raise CacheGapError(f"batch positions not contiguous: {pos.tolist()}")
    if past_k.shape[0] != pos[0]:
        raise CacheGapError(
            f"KV cache at layer {layer} covers {past_k.shape[0]} positions "
            f"but batch starts at position {int(pos[0])}"
        )

    lw = model.layers[layer - 1]
    x = batch.hidden
    b = len(pos)
    d = cfg.hidden_dim
    dh = cfg.head_dim
    inv_scale = 1.0 / np.sqrt(dh)

    xn = rms_norm_rows(x, lw.attn_gain)
    q = backend.matmul(xn, lw.wq)
    k_new = backend.matmul(xn, lw.wk)
    v_new = backend.matmul(xn, lw.wv)
    k_all = np.concatenate([past_k, k_new], axis=0)
    v_all = np.concatenate([past_v, v_new], axis=0)

    ctx = np.empty((b, d))
    for h in range(cfg.num_attn_heads):
        cols = slice(h * dh, (h + 1) * dh)
        kh = np.ascontiguousarray(k_all[:, cols])
        vh = v_all[:, cols]
        qh = q[:, cols]
        for i in range(b):
            vis = int(pos[i]) + 1
            scores = backend.matmul(kh[:vis], qh[i : i + 1].T)[:, 0] * inv_scale
            weights = _softmax_row(scores)
            ctx[i, cols] = backend.matmul(weights[None, :], vh[:vis])[0]
    attn_out = backend.matmul(ctx, lw.wo)
    x = x + attn_out

    x2 = rms_norm_rows(x, lw.mlp_gain)
    up = backend.matmul(x2, lw.w_up)
    act = up / (1.0 + np.exp(-up))  # SiLU
    x = x + backend.matmul(act, lw.w_down)

    out = ActivationBatch(positions=pos.copy(), tokens=batch.tokens.copy(), hidden=x)
    return out, k_new, v_new


def final_distribution(model: TransformerModel, h_star: np.ndarray) -> np.ndarray:
    """Next-token distribution from a last-layer hidden state."""
    h_star = np.asarray(h_star, dtype=np.float64).reshape(1, -1)
    if not np.isfinite(h_star).all():
        raise FloatingPointError("final_distribution input is not finite")
    hn = rms_norm_rows(h_star, model.final_gain)
    logits = backend.matmul(hn, model.lm_head_t)[0]
    return _softmax_row(logits)


def full_forward_hiddens(
    model: TransformerModel, tokens, record_layers: tuple[int, ...] = ()
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Run a whole sequence through all layers as one batch.

    Returns the last-layer hidden matrix and, for each requested 1-based
    layer, that layer's output hidden matrix. By the batching invariance
    these match an incremental decode of the same tokens bitwise.
    """
    batch = embed(model, tokens, 0)
    recorded: dict[int, np.ndarray] = {}
    empty_k = np.zeros((0, model.config.hidden_dim))
    for layer in range(1, model.config.num_layers + 1):
        batch, _, _ = layer_forward(model, layer, batch, empty_k, empty_k)
        if layer in record_layers:
            recorded[layer] = batch.hidden.copy()
    return batch.hidden, recorded
