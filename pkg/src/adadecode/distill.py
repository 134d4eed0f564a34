"""Head training on frozen features.

Greedy rollouts from corpus prefixes provide on-policy training pairs: the
hidden state at each exit layer and the final-layer distribution at every
generated position. Heads then minimize mean KL(final || head) by
full-batch gradient descent from identity initialization, halving the
learning rate (and reverting the step) whenever the loss would increase,
so the per-epoch loss trace is nonincreasing by construction. The base
model is never touched.
"""

from __future__ import annotations

import numpy as np

from .decode import DecodeConfig, vanilla_generate
from .errors import DivergenceError, PromptError
from .heads import (
    DistillSample,
    HeadSet,
    IntermediateHead,
    identity_heads,
    kl_gradient,
    mean_kl_loss,
)
from .model import TransformerModel, final_distribution, full_forward_hiddens
from .rng import Rng

DEFAULT_PROMPT_LEN = 16
DEFAULT_ROLLOUT_TOKENS = 32


def collect_distill_data(
    model: TransformerModel,
    corpus,
    exit_layers,
    prompt_len: int = DEFAULT_PROMPT_LEN,
    max_new: int = DEFAULT_ROLLOUT_TOKENS,
) -> dict[int, list[DistillSample]]:
    """Greedy on-policy rollouts recorded at each exit layer.

    Every processed position of every rollout contributes one sample per
    exit layer: (hidden state at that layer, final distribution). Hidden
    states are harvested by re-running the finished sequence as one batch,
    which is bitwise identical to the incremental decode.
    """
    exit_layers = sorted(int(l) for l in exit_layers)
    bad = [l for l in exit_layers if not (1 <= l < model.config.num_layers)]
    if bad:
        raise ValueError(f"exit layers must lie in [1, L-1], got {bad}")
    cfg = DecodeConfig(max_new_tokens=max_new, sampler="greedy")
    samples: dict[int, list[DistillSample]] = {l: [] for l in exit_layers}
    total = 0
    for seq in corpus:
        seq = list(seq)
        if len(seq) < prompt_len:
            continue
        prompt = seq[:prompt_len]
        out = vanilla_generate(model, prompt, cfg)
        if not out.tokens:
            continue
        full = prompt + out.tokens
        finals, recorded = full_forward_hiddens(model, full, tuple(exit_layers))
        # positions processed during decoding: prompt_len-1 .. end-2
        # (the last emitted token is never processed)
        for pos in range(prompt_len - 1, len(full) - 1):
            target = final_distribution(model, finals[pos])
            for layer in exit_layers:
                samples[layer].append(
                    DistillSample(hidden=recorded[layer][pos].copy(), target=target)
                )
            total += 1
    if total == 0:
        raise PromptError(
            f"no rollout produced tokens (need corpus sequences of length >= {prompt_len})"
        )
    return samples


def train_heads(
    model: TransformerModel,
    corpus,
    exit_layers,
    epochs: int,
    learning_rate: float,
    rng: Rng,
    prompt_len: int = DEFAULT_PROMPT_LEN,
    max_new: int = DEFAULT_ROLLOUT_TOKENS,
) -> tuple[HeadSet, dict[int, list[float]]]:
    """Distill intermediate heads; returns (heads, per-layer loss trace).

    Trace entry 0 is the identity-initialized loss; one entry per epoch
    follows. The final loss never exceeds the initial one. `rng` is
    accepted for interface stability; full-batch descent draws nothing.
    """
    del rng  # deterministic full-batch training
    data = collect_distill_data(model, corpus, exit_layers, prompt_len, max_new)
    heads = identity_heads(model, exit_layers)
    traces: dict[int, list[float]] = {}
    trained = []
    for head in heads.heads:
        samples = data[head.exit_layer]
        t = head.transform.copy()
        lr = learning_rate
        cur = IntermediateHead(head.exit_layer, t)
        loss = mean_kl_loss(samples, cur, model)
        trace = [loss]
        for _ in range(epochs):
            grad = kl_gradient(samples, cur, model)
            candidate = IntermediateHead(head.exit_layer, cur.transform - lr * grad)
            new_loss = mean_kl_loss(samples, candidate, model)
            if not np.isfinite(new_loss):
                raise DivergenceError(
                    f"head KL loss became {new_loss}; lower the learning rate"
                )
            if new_loss > loss:
                lr *= 0.5  # revert and retry more cautiously next epoch
            else:
                cur = candidate
                loss = new_loss
            trace.append(loss)
        trained.append(cur)
        traces[cur.exit_layer] = trace
    return HeadSet(trained), traces
