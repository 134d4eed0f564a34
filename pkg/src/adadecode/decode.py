"""Decoders.

`vanilla_generate` is the strictly sequential reference: every token runs
through all layers before the next token is sampled from the final
distribution.

`adadecode_generate` accelerates it without changing the output. While a
token ascends the layers, any layer owning a trained head may emit the
next token early if the head's confidence clears the gate; the current
token's remaining layers are deferred to the pending ledger and computed
later, batched into the same layer calls as subsequent tokens. Whenever a
token reaches the final layer, every outstanding early prediction is
checked against the true final distribution by modified rejection
sampling: accept a draft t drawn from head distribution q with probability
min(1, p*(t)/q(t)); on rejection, resample from the normalized positive
residual max(0, p* - q), roll the caches back from the rejected position
(inclusive: its rows were computed under the wrong token identity), and
resume from the replacement. The scheme leaves the marginal distribution
of every emitted token exactly p*, and under greedy sampling the output
matches vanilla token for token, bitwise, because batched layer math
equals sequential layer math exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import PromptError
from .heads import HeadSet
from .kvcache import DraftRecord, KvStore, PendingLedger, rollback
from .linalg import check_prob_vector, ordered_sum, sample_categorical
from .model import (
    ActivationBatch,
    LayerActivation,
    TransformerModel,
    embed,
    final_distribution,
    layer_forward,
)
from .rng import DECODE_STREAM, Rng

EOS_TOKEN = 0

GREEDY = "greedy"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class DecodeConfig:
    gamma: float = 0.75
    max_pending: int = 5
    max_new_tokens: int = 512
    sampler: str = GREEDY
    seed: int = 0
    verify: bool = True  # diagnostic only; disabling forfeits output parity

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.max_pending < 0:
            raise ValueError("max_pending must be >= 0")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.sampler not in (GREEDY, CATEGORICAL):
            raise ValueError(f"unknown sampler {self.sampler!r}")


@dataclass
class DecodeStats:
    layer_invocations: int = 0
    early_predictions: int = 0
    rejections: int = 0
    tokens_emitted: int = 0
    wall_seconds: float = 0.0
    prefill_invocations: int = 0


@dataclass
class ExitTraceEntry:
    position: int
    exit_layer: int
    accepted: bool


@dataclass
class DecodeOutput:
    tokens: list[int]
    stats: DecodeStats
    trace: list[ExitTraceEntry] = field(default_factory=list)


def early_exit_check(
    dist: np.ndarray, gamma: float, sampler: str, rng: Rng
) -> tuple[int, np.ndarray] | None:
    """Sample a candidate token; return (token, dist) iff dist[token] > gamma.

    The inequality is strict, so gamma=1 can never fire. When no entry can
    clear the gate the draw is skipped entirely, which keeps a gate that
    cannot fire from consuming randomness (outcome-equivalent, and it makes
    gamma=1 decoding draw-for-draw identical to vanilla).
    """
    dist = np.asarray(dist, dtype=np.float64)
    if float(dist.max()) <= gamma:
        return None
    token = sample_categorical(dist, rng, greedy=(sampler == GREEDY))
    if float(dist[token]) > gamma:
        return token, dist
    return None


def acceptance_probability(q: np.ndarray, p_star: np.ndarray, token: int) -> float:
    """min(1, p*(token) / q(token)); requires q(token) > 0."""
    qt = float(q[token])
    if qt <= 0.0:
        raise ValueError(f"draft token {token} has zero proposal probability")
    return min(1.0, float(p_star[token]) / qt)


def residual_distribution(q: np.ndarray, p_star: np.ndarray) -> np.ndarray:
    """Normalize(max(0, p* - q)): the replacement distribution on rejection."""
    r = np.maximum(0.0, p_star - q)
    z = ordered_sum(r)
    # A rejection with an identically-zero residual would require p* = q,
    # but then the acceptance probability was 1 and no rejection happens.
    assert z > 0.0, "zero residual on rejection: p* and q coincide"
    return r / z


def verify_draft(
    q: np.ndarray, p_star: np.ndarray, draft: int, sampler: str, rng: Rng
) -> tuple[bool, int]:
    """Accept or replace one early-predicted token.

    Greedy mode accepts iff the draft is the argmax of p* (lowest index on
    ties) and otherwise returns that argmax. Stochastic mode accepts with
    probability min(1, p*/q) and on rejection samples the normalized
    positive residual, which makes the output marginal exactly p*.
    """
    p_star = check_prob_vector(p_star)
    if sampler == GREEDY:
        top = int(np.argmax(p_star))
        return (draft == top), (draft if draft == top else top)
    if rng.uniform() < acceptance_probability(q, p_star, draft):
        return True, draft
    return False, sample_categorical(residual_distribution(q, p_star), rng)


def _validate_prompt(model: TransformerModel, prompt) -> list[int]:
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise PromptError("prompt is empty")
    if any(t < 0 or t >= model.config.vocab_size for t in prompt):
        raise PromptError("prompt token out of vocabulary")
    if len(prompt) > model.config.max_positions:
        raise PromptError(
            f"prompt length {len(prompt)} exceeds max_positions="
            f"{model.config.max_positions}"
        )
    return prompt


class _Session:
    """Single-writer state bundle for one decode: caches, ledger, rng, stats."""

    def __init__(self, model: TransformerModel, heads, config: DecodeConfig, prompt):
        self.model = model
        self.heads = heads
        self.config = config
        self.store = KvStore(model.config)
        self.ledger = PendingLedger(model.config.num_layers, config.max_pending)
        self.rng = Rng(config.seed, DECODE_STREAM)
        self.stats = DecodeStats()
        self.trace: list[ExitTraceEntry] = []
        self.seq: list[int] = list(prompt)
        self.prompt_len = len(prompt)
        self.drafts: list[DraftRecord] = []
        self.final_hidden: dict[int, np.ndarray] = {}
        capacity = model.config.max_positions - self.prompt_len + 1
        self.budget = min(config.max_new_tokens, capacity)

    # -- shared plumbing ---------------------------------------------------

    def emitted(self) -> int:
        return len(self.seq) - self.prompt_len

    def sample(self, dist: np.ndarray) -> int:
        return sample_categorical(dist, self.rng, greedy=(self.config.sampler == GREEDY))

    def embed_single(self, token: int, position: int) -> np.ndarray:
        return embed(self.model, [token], position).hidden[0]

    def run_layer(self, layer: int, batch: ActivationBatch, prefill: bool = False):
        past_k, past_v = self.store.visible(layer)
        out, k_new, v_new = layer_forward(self.model, layer, batch, past_k, past_v)
        self.store.commit(layer, out.positions, k_new, v_new)
        if prefill:
            self.stats.prefill_invocations += 1
        else:
            self.stats.layer_invocations += 1
        return out

    def prefill(self):
        if self.prompt_len < 2:
            return
        batch = embed(self.model, self.seq[: self.prompt_len - 1], 0)
        for layer in range(1, self.model.config.num_layers + 1):
            batch = self.run_layer(layer, batch, prefill=True)

    def finalize(self, wall_start: float) -> DecodeOutput:
        tokens = self.seq[self.prompt_len :]
        if EOS_TOKEN in tokens:
            tokens = tokens[: tokens.index(EOS_TOKEN) + 1]
        self.stats.tokens_emitted = len(tokens)
        self.stats.wall_seconds = time.perf_counter() - wall_start
        return DecodeOutput(tokens=tokens, stats=self.stats, trace=self.trace)


def vanilla_generate(model: TransformerModel, prompt, config: DecodeConfig) -> DecodeOutput:
    """Reference decoder: prefill, then one token per full pass through all layers."""
    t0 = time.perf_counter()
    prompt = _validate_prompt(model, prompt)
    s = _Session(model, None, config, prompt)
    s.prefill()

    cur_pos = s.prompt_len - 1
    cur_hidden = s.embed_single(s.seq[cur_pos], cur_pos)
    while True:
        batch = ActivationBatch(
            positions=np.array([cur_pos], dtype=np.int64),
            tokens=np.array([s.seq[cur_pos]], dtype=np.int64),
            hidden=cur_hidden[None, :],
        )
        for layer in range(1, model.config.num_layers + 1):
            batch = s.run_layer(layer, batch)
        dist = final_distribution(model, batch.hidden[0])
        token = s.sample(dist)
        s.seq.append(token)
        s.trace.append(ExitTraceEntry(cur_pos + 1, model.config.num_layers, True))
        if token == EOS_TOKEN or s.emitted() >= s.budget:
            return s.finalize(t0)
        cur_pos += 1
        cur_hidden = s.embed_single(token, cur_pos)


class _Rejection(Exception):
    """Internal control flow: a draft was rejected and replaced."""

    def __init__(self, position: int, replacement: int):
        self.position = position
        self.replacement = replacement


def _verify_outstanding(s: _Session) -> int | None:
    """Verify drafts in position order.

    Returns the position of a confirmed EOS (caller must stop), or None.
    Raises _Rejection after rolling back when a draft fails: the caller
    resumes from the replacement token.
    """
    L = s.model.config.num_layers
    for draft in list(s.drafts):
        pos = draft.trigger_position + 1
        p_star = final_distribution(s.model, s.final_hidden[draft.trigger_position])
        if s.config.verify:
            accepted, out_tok = verify_draft(
                draft.dist, p_star, draft.token, s.config.sampler, s.rng
            )
        else:
            accepted, out_tok = True, draft.token
        if accepted:
            s.trace.append(ExitTraceEntry(pos, draft.exit_layer, True))
            s.drafts.remove(draft)
            if out_tok == EOS_TOKEN:
                s.drafts.clear()
                return pos
        else:
            s.stats.rejections += 1
            s.trace.append(ExitTraceEntry(pos, draft.exit_layer, False))
            rollback(s.store, s.ledger, pos)
            for p in [p for p in s.final_hidden if p >= pos]:
                del s.final_hidden[p]
            del s.seq[pos:]
            s.seq.append(out_tok)
            s.drafts.clear()
            s.trace.append(ExitTraceEntry(pos, L, True))
            raise _Rejection(pos, out_tok)
    return None


def _drain_pending(s: _Session):
    """Complete all deferred layers without a current token (final flush)."""
    while len(s.ledger) > 0:
        layer = s.ledger.min_ready_layer()
        batch, entries = s.ledger.take_batch(layer, None)
        out = s.run_layer(layer, batch)
        for i, entry in enumerate(entries):
            if s.ledger.advance(entry, out.hidden[i]):
                s.final_hidden[entry.position] = out.hidden[i]


def adadecode_generate(
    model: TransformerModel, heads: HeadSet, prompt, config: DecodeConfig
) -> DecodeOutput:
    """Accelerated decoder with early prediction, deferral, and verification."""
    out, _ = _generate_with_session(model, heads, prompt, config)
    return out


def _generate_with_session(
    model: TransformerModel, heads, prompt, config: DecodeConfig
) -> tuple[DecodeOutput, _Session]:
    t0 = time.perf_counter()
    prompt = _validate_prompt(model, prompt)
    s = _Session(model, heads, config, prompt)
    s.prefill()
    L = model.config.num_layers

    cur_pos = s.prompt_len - 1
    cur_hidden = s.embed_single(s.seq[cur_pos], cur_pos)
    while True:
        drafted: int | None = None
        for layer in range(1, L + 1):
            current = LayerActivation(cur_pos, s.seq[cur_pos], cur_hidden)
            batch, entries = s.ledger.take_batch(layer, current)
            out = s.run_layer(layer, batch)
            for i, entry in enumerate(entries):
                if s.ledger.advance(entry, out.hidden[i]):
                    s.final_hidden[entry.position] = out.hidden[i]
            cur_hidden = out.hidden[-1]
            if layer == L:
                s.final_hidden[cur_pos] = cur_hidden
                break
            if heads is None or len(s.ledger) >= config.max_pending:
                continue
            dist = heads.draft_distribution(model, layer, cur_hidden, cur_pos)
            if dist is None:
                continue
            hit = early_exit_check(dist, config.gamma, config.sampler, s.rng)
            if hit is None:
                continue
            drafted, q = hit
            s.stats.early_predictions += 1
            s.ledger.enqueue(cur_pos, s.seq[cur_pos], layer, cur_hidden)
            s.drafts.append(DraftRecord(drafted, cur_pos, layer, q))
            s.seq.append(drafted)  # optimistic; retracted on rejection
            break

        if drafted is not None:
            if drafted != EOS_TOKEN and s.emitted() < s.budget:
                cur_pos += 1
                cur_hidden = s.embed_single(drafted, cur_pos)
                continue
            # forced flush: the budget is spent or an EOS draft must be settled
            _drain_pending(s)
            try:
                eos_pos = _verify_outstanding(s)
            except _Rejection as rej:
                if rej.replacement == EOS_TOKEN or s.emitted() >= s.budget:
                    return s.finalize(t0), s
                cur_pos = rej.position
                cur_hidden = s.embed_single(rej.replacement, cur_pos)
                continue
            return s.finalize(t0), s
        else:
            # the current token reached the top; settle drafts, then sample
            try:
                eos_pos = _verify_outstanding(s)
            except _Rejection as rej:
                if rej.replacement == EOS_TOKEN or s.emitted() >= s.budget:
                    return s.finalize(t0), s
                cur_pos = rej.position
                cur_hidden = s.embed_single(rej.replacement, cur_pos)
                continue
            if eos_pos is not None:
                return s.finalize(t0), s
            dist = final_distribution(model, cur_hidden)
            token = s.sample(dist)
            s.seq.append(token)
            s.trace.append(ExitTraceEntry(cur_pos + 1, L, True))
            if token == EOS_TOKEN or s.emitted() >= s.budget:
                return s.finalize(t0), s
            cur_pos += 1
            cur_hidden = s.embed_single(token, cur_pos)


def consistency_ratio(
    model: TransformerModel, heads: HeadSet, prompts, config: DecodeConfig
) -> float:
    """Fraction of prompts whose accelerated output matches vanilla exactly.

    Comparison is under greedy decoding (string match on token sequences);
    the supplied config's sampler is overridden.
    """
    prompts = list(prompts)
    if not prompts:
        raise ValueError("need at least one prompt")
    greedy_cfg = _as_greedy(config)
    matches = 0
    for prompt in prompts:
        ref = vanilla_generate(model, prompt, greedy_cfg)
        acc = adadecode_generate(model, heads, prompt, greedy_cfg)
        if ref.tokens == acc.tokens:
            matches += 1
    return matches / len(prompts)


def _as_greedy(config: DecodeConfig) -> DecodeConfig:
    if config.sampler == GREEDY:
        return config
    return DecodeConfig(
        gamma=config.gamma,
        max_pending=config.max_pending,
        max_new_tokens=config.max_new_tokens,
        sampler=GREEDY,
        seed=config.seed,
        verify=config.verify,
    )
