"""Next-token pretraining of the toy transformer.

Manual forward/backward over the same block math the decoder uses (full
causal attention over whole sequences, so training is batched rather than
incremental). The backward pass is exact: acceptance tests compare every
parameter's gradient against central finite differences.

pretrain_base performs plain per-sequence gradient descent (one update per
sequence, order reshuffled each epoch from the supplied rng) on a private
copy of the model; the input model is never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import DivergenceError, PromptError
from .model import (
    NORM_EPS,
    LayerWeights,
    TransformerModel,
    embed,
)
from .rng import Rng, TRAIN_STREAM


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return backend.matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))


def _rms_fwd(x: np.ndarray, gain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = x.shape[1]
    inv = 1.0 / np.sqrt(backend.row_sums(x * x) / d + NORM_EPS)
    return x * inv[:, None] * gain[None, :], inv


def _rms_bwd(
    dy: np.ndarray, x: np.ndarray, gain: np.ndarray, inv: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (dx, dgain) for y = x * inv_rms(x) * gain."""
    d = x.shape[1]
    dgain = backend.row_sums((dy * x * inv[:, None]).T)
    gdy = dy * gain[None, :]
    proj = backend.row_sums(gdy * x)  # per-row sum of gdy.x
    dx = gdy * inv[:, None] - x * (proj * inv**3 / d)[:, None]
    return dx, dgain


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / backend.row_sums(e)[:, None]


@dataclass
class _LayerTape:
    x_in: np.ndarray
    xn: np.ndarray
    inv1: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn_weights: list[np.ndarray]  # per head (T, T)
    ctx: np.ndarray
    x_mid: np.ndarray
    x2n: np.ndarray
    inv2: np.ndarray
    up: np.ndarray
    act: np.ndarray


@dataclass
class _Tape:
    tokens: np.ndarray
    x0: np.ndarray
    layers: list[_LayerTape]
    x_final: np.ndarray
    hn: np.ndarray
    inv_f: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def _forward(model: TransformerModel, tokens: np.ndarray) -> _Tape:
    cfg = model.config
    dh = cfg.head_dim
    inv_scale = 1.0 / np.sqrt(dh)
    t = len(tokens)
    x = embed(model, tokens, 0).hidden
    x0 = x
    mask = np.triu(np.full((t, t), -np.inf), k=1)

    tapes = []
    for lw in model.layers:
        xn, inv1 = _rms_fwd(x, lw.attn_gain)
        q = _mm(xn, lw.wq)
        k = _mm(xn, lw.wk)
        v = _mm(xn, lw.wv)
        ctx = np.empty_like(x)
        weights = []
        for h in range(cfg.num_attn_heads):
            cols = slice(h * dh, (h + 1) * dh)
            qh = np.ascontiguousarray(q[:, cols])
            kh = np.ascontiguousarray(k[:, cols])
            scores = _mm(qh, kh.T) * inv_scale + mask
            a = _softmax_rows(scores)
            ctx[:, cols] = _mm(a, v[:, cols])
            weights.append(a)
        x_mid = x + _mm(ctx, lw.wo)
        x2n, inv2 = _rms_fwd(x_mid, lw.mlp_gain)
        up = _mm(x2n, lw.w_up)
        with np.errstate(over="ignore"):  # exp saturates to a correct 0
            act = up / (1.0 + np.exp(-up))
        x_out = x_mid + _mm(act, lw.w_down)
        tapes.append(
            _LayerTape(x, xn, inv1, q, k, v, weights, ctx, x_mid, x2n, inv2, up, act)
        )
        x = x_out

    hn, inv_f = _rms_fwd(x, model.final_gain)
    logits = _mm(hn, model.lm_head_t)
    probs = _softmax_rows(logits)
    return _Tape(np.asarray(tokens), x0, tapes, x, hn, inv_f, logits, probs)


def sequence_loss(model: TransformerModel, tokens) -> float:
    """Mean next-token cross-entropy over one sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < 2:
        raise PromptError("need at least two tokens for a next-token loss")
    tape = _forward(model, tokens)
    targets = tokens[1:]
    rows = np.arange(len(tokens) - 1)
    with np.errstate(divide="ignore"):  # p=0 yields inf loss, caught upstream
        return float(-np.mean(np.log(tape.probs[rows, targets])))


def corpus_loss(model: TransformerModel, corpus) -> float:
    """Mean next-token cross-entropy over all positions of all sequences."""
    total = 0.0
    count = 0
    for seq in corpus:
        seq = np.asarray(seq, dtype=np.int64)
        if len(seq) < 2:
            continue
        tape = _forward(model, seq)
        rows = np.arange(len(seq) - 1)
        with np.errstate(divide="ignore"):
            total += float(-np.sum(np.log(tape.probs[rows, seq[1:]])))
        count += len(seq) - 1
    if count == 0:
        raise PromptError("corpus has no sequence with >= 2 tokens")
    return total / count


@dataclass
class ParamGrads:
    token_embedding: np.ndarray
    layers: list[dict[str, np.ndarray]]
    final_gain: np.ndarray
    lm_head: np.ndarray


def loss_and_grads(model: TransformerModel, tokens) -> tuple[float, ParamGrads]:
    """Mean cross-entropy over one sequence and its exact parameter gradients."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < 2:
        raise PromptError("need at least two tokens for a next-token loss")
    cfg = model.config
    dh = cfg.head_dim
    inv_scale = 1.0 / np.sqrt(dh)
    tape = _forward(model, tokens)

    t = len(tokens)
    n_pred = t - 1
    rows = np.arange(n_pred)
    targets = tokens[1:]
    with np.errstate(divide="ignore"):
        loss = float(-np.mean(np.log(tape.probs[rows, targets])))

    dlogits = np.zeros_like(tape.logits)
    dlogits[rows] = tape.probs[rows]
    dlogits[rows, targets] -= 1.0
    dlogits /= n_pred

    d_lm_head = _mm(dlogits.T, tape.hn)
    dhn = _mm(dlogits, model.lm_head)
    dx, d_final_gain = _rms_bwd(dhn, tape.x_final, model.final_gain, tape.inv_f)

    layer_grads: list[dict[str, np.ndarray]] = [None] * cfg.num_layers  # type: ignore
    for li in range(cfg.num_layers - 1, -1, -1):
        lw = model.layers[li]
        lt = tape.layers[li]

        # x_out = x_mid + silu(x2n @ w_up) @ w_down
        dmlp = dx
        da = _mm(dmlp, lw.w_down.T)
        dw_down = _mm(lt.act.T, dmlp)
        with np.errstate(over="ignore"):
            sig = 1.0 / (1.0 + np.exp(-lt.up))
        du = da * sig * (1.0 + lt.up * (1.0 - sig))
        dx2n = _mm(du, lw.w_up.T)
        dw_up = _mm(lt.x2n.T, du)
        dx_mid, dg2 = _rms_bwd(dx2n, lt.x_mid, lw.mlp_gain, lt.inv2)
        dx_mid = dx_mid + dx

        # x_mid = x_in + (heads ctx) @ wo
        dattn = dx_mid
        dctx = _mm(dattn, lw.wo.T)
        dwo = _mm(lt.ctx.T, dattn)
        dq = np.empty_like(lt.q)
        dk = np.empty_like(lt.k)
        dv = np.empty_like(lt.v)
        for h in range(cfg.num_attn_heads):
            cols = slice(h * dh, (h + 1) * dh)
            a = lt.attn_weights[h]
            vh = np.ascontiguousarray(lt.v[:, cols])
            dctxh = np.ascontiguousarray(dctx[:, cols])
            da_w = _mm(dctxh, vh.T)
            dv[:, cols] = _mm(a.T, dctxh)
            ds = a * (da_w - backend.row_sums(da_w * a)[:, None])
            kh = np.ascontiguousarray(lt.k[:, cols])
            qh = np.ascontiguousarray(lt.q[:, cols])
            dq[:, cols] = _mm(ds, kh) * inv_scale
            dk[:, cols] = _mm(ds.T, qh) * inv_scale
        dxn = _mm(dq, lw.wq.T) + _mm(dk, lw.wk.T) + _mm(dv, lw.wv.T)
        dwq = _mm(lt.xn.T, dq)
        dwk = _mm(lt.xn.T, dk)
        dwv = _mm(lt.xn.T, dv)
        dx_in, dg1 = _rms_bwd(dxn, lt.x_in, lw.attn_gain, lt.inv1)
        dx = dx_in + dx_mid

        layer_grads[li] = {
            "wq": dwq, "wk": dwk, "wv": dwv, "wo": dwo,
            "w_up": dw_up, "w_down": dw_down,
            "attn_gain": dg1, "mlp_gain": dg2,
        }

    demb = np.zeros_like(model.token_embedding)
    np.add.at(demb, tape.tokens, dx)
    return loss, ParamGrads(demb, layer_grads, d_final_gain, d_lm_head)


def _mutable_copy(model: TransformerModel) -> TransformerModel:
    layers = [
        LayerWeights(**{k: np.array(getattr(lw, k)) for k in
                        ("wq", "wk", "wv", "wo", "w_up", "w_down", "attn_gain", "mlp_gain")})
        for lw in model.layers
    ]
    return TransformerModel(
        config=model.config,
        token_embedding=np.array(model.token_embedding),
        layers=layers,
        final_gain=np.array(model.final_gain),
        lm_head=np.array(model.lm_head),
    )


def pretrain_base(
    model: TransformerModel,
    corpus,
    epochs: int,
    learning_rate: float,
    rng: Rng,
) -> TransformerModel:
    """Train all base weights by per-sequence gradient descent.

    Returns a new frozen model; raises DivergenceError (suggesting a lower
    learning rate) if any step produces a non-finite loss.
    """
    seqs = [np.asarray(s, dtype=np.int64) for s in corpus]
    if not seqs:
        raise PromptError("corpus is empty")
    for s in seqs:
        if len(s) > model.config.max_positions:
            raise PromptError("corpus sequence exceeds max_positions")
    order_rng = rng.split(TRAIN_STREAM) if rng.stream != TRAIN_STREAM else rng
    work = _mutable_copy(model)
    for _ in range(epochs):
        for idx in order_rng.shuffled(len(seqs)):
            seq = seqs[idx]
            if len(seq) < 2:
                continue
            loss, grads = loss_and_grads(work, seq)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"training loss became {loss}; lower the learning rate "
                    f"(currently {learning_rate})"
                )
            work.token_embedding -= learning_rate * grads.token_embedding
            for lw, g in zip(work.layers, grads.layers):
                for name, grad in g.items():
                    arr = getattr(lw, name)
                    arr -= learning_rate * grad
            work.final_gain -= learning_rate * grads.final_gain
            work.lm_head -= learning_rate * grads.lm_head
    return work.freeze()
