"""Metrics, synthetic corpora, and the gamma-sweep harness.

The corpus generator builds an order-1 Markov chain in which a `skew`
fraction of states have one dominant successor (probability 0.9, the rest
uniform) and the remaining states are uniform. A model pretrained on such
a corpus assigns high confidence to the dominant transitions, which is
what gives intermediate heads something to exit early on.

Speedup is reported two ways: wall-clock tokens/second (hardware
dependent) and the invocation ratio, the accelerated decoder's layer-call
count over vanilla's N*L (deterministic and hardware free). Only the
latter is bound by tests.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .decode import (
    DecodeConfig,
    DecodeStats,
    adadecode_generate,
    vanilla_generate,
)
from .heads import HeadSet
from .model import TransformerModel, final_distribution, full_forward_hiddens
from .rng import CORPUS_STREAM, Rng

DOMINANT_PROB = 0.9
# Default gamma grid: a coarse ramp plus the two operating points that
# matter in practice (0.75 default threshold, 0.85 low-rejection point).
DEFAULT_GAMMAS = (0.0, 0.2, 0.4, 0.6, 0.75, 0.8, 0.85, 1.0)

SWEEP_CSV_HEADER = "gamma,throughput_tps,invocation_ratio,early_rate,reject_rate,consistency"
SWEEP_CSV_METADATA = (
    "# early_rate = early_predictions / tokens_emitted; "
    "reject_rate = rejections / max(1, early_predictions); "
    "invocation_ratio = accelerated layer calls / vanilla layer calls"
)
HEATMAP_CSV_HEADER = "position,layer,probability"


@dataclass
class Corpus:
    sequences: list[list[int]]
    vocab: int
    seed: int
    skew: float
    markov_order: int = 1

    def __iter__(self):
        return iter(self.sequences)

    def __len__(self):
        return len(self.sequences)


def gen_corpus(vocab: int, num_sequences: int, length: int, skew: float, rng: Rng) -> Corpus:
    """Order-1 Markov sequences over token ids [1, vocab).

    Token id 0 is reserved as EOS and never generated, so rollouts on a
    model trained on this corpus rarely stop early. A `skew` fraction of
    states get a dominant successor with probability 0.9; other states
    transition uniformly. Deterministic given the rng's seed.
    """
    if vocab < 2:
        raise ValueError("vocab must be >= 2")
    if not (0.0 <= skew <= 1.0):
        raise ValueError("skew must lie in [0, 1]")
    local = rng.split(CORPUS_STREAM) if rng.stream != CORPUS_STREAM else rng
    states = vocab - 1  # ids 1..vocab-1
    num_skewed = int(round(skew * states))
    skewed = set(local.shuffled(states)[:num_skewed])  # state index = id - 1

    cumulative = np.empty((states, states))
    uniform_row = np.full(states, 1.0 / states)
    for s in range(states):
        if s in skewed:
            dominant = local.integer(states)
            row = np.full(states, (1.0 - DOMINANT_PROB) / (states - 1))
            row[dominant] = DOMINANT_PROB
        else:
            row = uniform_row
        cumulative[s] = np.cumsum(row)

    sequences = []
    for _ in range(num_sequences):
        tok = local.integer(states)
        seq = [tok + 1]
        for _ in range(length - 1):
            u = local.uniform()
            tok = min(int(np.searchsorted(cumulative[tok], u, side="right")), states - 1)
            seq.append(tok + 1)
        sequences.append(seq)
    return Corpus(sequences=sequences, vocab=vocab, seed=rng.seed, skew=skew)


@dataclass
class SweepRow:
    gamma: float
    throughput_tps: float
    invocation_ratio: float
    early_rate: float
    reject_rate: float
    consistency: float


def throughput(stats: DecodeStats) -> float:
    """Tokens per second; rejects zero/negative durations."""
    if stats.wall_seconds <= 0.0:
        raise ValueError("wall_seconds must be positive to compute throughput")
    return stats.tokens_emitted / stats.wall_seconds


def _aggregate(outputs) -> DecodeStats:
    agg = DecodeStats()
    for out in outputs:
        agg.layer_invocations += out.stats.layer_invocations
        agg.early_predictions += out.stats.early_predictions
        agg.rejections += out.stats.rejections
        agg.tokens_emitted += out.stats.tokens_emitted
        agg.wall_seconds += out.stats.wall_seconds
        agg.prefill_invocations += out.stats.prefill_invocations
    return agg


def run_sweep(
    model: TransformerModel,
    heads: HeadSet,
    prompts,
    gammas,
    config: DecodeConfig,
) -> list[SweepRow]:
    """One row per gamma: rates, invocation ratio, throughput, consistency.

    Vanilla decoding is gamma-independent, so it runs once and its outputs
    are reused for every row's ratio and consistency columns.
    """
    gammas = [float(g) for g in gammas]
    if any(not (0.0 <= g <= 1.0) for g in gammas):
        raise ValueError("gammas must lie in [0, 1]")
    prompts = [list(p) for p in prompts]
    base_cfg = DecodeConfig(
        gamma=config.gamma, max_pending=config.max_pending,
        max_new_tokens=config.max_new_tokens, sampler=config.sampler,
        seed=config.seed, verify=config.verify,
    )
    vanilla_outs = [vanilla_generate(model, p, base_cfg) for p in prompts]
    vanilla_stats = _aggregate(vanilla_outs)

    rows = []
    for gamma in gammas:
        cfg = DecodeConfig(
            gamma=gamma, max_pending=base_cfg.max_pending,
            max_new_tokens=base_cfg.max_new_tokens, sampler=base_cfg.sampler,
            seed=base_cfg.seed, verify=base_cfg.verify,
        )
        outs = [adadecode_generate(model, heads, p, cfg) for p in prompts]
        agg = _aggregate(outs)
        matches = sum(o.tokens == v.tokens for o, v in zip(outs, vanilla_outs))
        rows.append(
            SweepRow(
                gamma=gamma,
                throughput_tps=throughput(agg),
                invocation_ratio=agg.layer_invocations / vanilla_stats.layer_invocations,
                early_rate=agg.early_predictions / max(1, agg.tokens_emitted),
                reject_rate=agg.rejections / max(1, agg.early_predictions),
                consistency=matches / len(prompts),
            )
        )
    return rows


def sweep_to_csv(rows) -> str:
    lines = [SWEEP_CSV_METADATA, SWEEP_CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.gamma:.6f},{r.throughput_tps:.3f},{r.invocation_ratio:.6f},"
            f"{r.early_rate:.6f},{r.reject_rate:.6f},{r.consistency:.6f}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class HeatmapCell:
    position: int
    layer: int
    probability: float


def measure_confidence_heatmap(
    model: TransformerModel,
    heads: HeadSet,
    prompt,
    max_new: int,
    raw_final_head: bool = False,
) -> list[HeatmapCell]:
    """Per generated position, each head's probability of the emitted token.

    Runs greedy vanilla decoding, then reads, at every exit layer plus the
    final layer, the probability assigned to the token that decoding
    actually emitted at that position. With raw_final_head=True the exit
    layers instead apply the final head directly to unnormalized
    intermediate features, the poorly calibrated baseline that trained
    heads are measured against.
    """
    from . import backend
    from .model import _softmax_row

    out = vanilla_generate(model, prompt, DecodeConfig(max_new_tokens=max_new, sampler="greedy"))
    if not out.tokens:
        raise ValueError("prompt produced no tokens")
    full = list(prompt) + out.tokens
    layers = heads.exit_layers()
    finals, recorded = full_forward_hiddens(model, full, tuple(layers))
    cells = []
    start = len(prompt)
    for pos in range(start, len(full)):
        token = full[pos]
        trigger = pos - 1
        for layer in layers:
            hidden = recorded[layer][trigger]
            if raw_final_head:
                logits = backend.matmul(hidden[None, :], model.lm_head_t)[0]
                q = _softmax_row(logits)
            else:
                q = heads.draft_distribution(model, layer, hidden, trigger)
            cells.append(HeatmapCell(pos, layer, float(q[token])))
        p_star = final_distribution(model, finals[trigger])
        cells.append(HeatmapCell(pos, model.config.num_layers, float(p_star[token])))
    return cells


def heatmap_to_csv(cells) -> str:
    lines = [HEATMAP_CSV_HEADER]
    for c in cells:
        lines.append(f"{c.position},{c.layer},{c.probability:.6f}")
    return "\n".join(lines) + "\n"


def stats_text(stats: DecodeStats) -> str:
    """One key=value line per DecodeStats field."""
    parts = []
    for key, value in asdict(stats).items():
        if isinstance(value, float):
            parts.append(f"{key}={value:.6f}")
        else:
            parts.append(f"{key}={value}")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Default trained workload: the fixture used by benchmarks and regression
# tests. Sizes keep pretraining to tens of seconds while leaving the
# teacher confident enough for heads to exit early on dominant transitions.
# ---------------------------------------------------------------------------

DEFAULT_EXIT_LAYERS = (2, 4, 6)
DEFAULT_PROMPT_LEN = 16
DEFAULT_NUM_PROMPTS = 64
DEFAULT_MAX_NEW = 128


@dataclass
class Workload:
    model: TransformerModel
    heads: HeadSet
    prompts: list[list[int]]
    corpus: Corpus
    head_traces: dict[int, list[float]] = field(default_factory=dict)


def default_workload(
    seed: int = 0,
    pretrain_epochs: int = 28,
    pretrain_lr: float = 0.5,
    head_epochs: int = 60,
    head_lr: float = 8.0,
    num_train: int = 24,
    seq_len: int = 48,
    skew: float = 0.7,
) -> Workload:
    """Pretrained toy model + distilled heads + held-out prompts."""
    from .distill import train_heads
    from .model import ModelConfig, init_random_model
    from .training import pretrain_base

    rng = Rng(seed)
    corpus = gen_corpus(256, num_train + DEFAULT_NUM_PROMPTS, seq_len, skew, rng)
    train_seqs = Corpus(
        sequences=corpus.sequences[:num_train],
        vocab=corpus.vocab, seed=corpus.seed, skew=corpus.skew,
    )
    prompts = [s[:DEFAULT_PROMPT_LEN] for s in corpus.sequences[num_train:]]
    model = init_random_model(ModelConfig(), rng)
    model = pretrain_base(model, train_seqs, pretrain_epochs, pretrain_lr, rng)
    heads, traces = train_heads(
        model, train_seqs, DEFAULT_EXIT_LAYERS, head_epochs, head_lr, rng
    )
    return Workload(model=model, heads=heads, prompts=prompts, corpus=train_seqs,
                    head_traces=traces)
