"""Command-line entry point.

Subcommands wire corpus generation, pretraining, head distillation,
generation, benchmarking, parity checking, and the LM-head rank report to
files on disk. Every subcommand is deterministic given its flags (all
randomness flows through --seed). Exit codes: 0 success, 1 runtime or I/O
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys

from .bench import (
    DEFAULT_GAMMAS,
    _aggregate,
    gen_corpus,
    heatmap_to_csv,
    measure_confidence_heatmap,
    run_sweep,
    stats_text,
    sweep_to_csv,
    throughput,
)
from .containers import (
    atomic_write_text,
    read_heads,
    read_model,
    read_sequences,
    write_corpus,
    write_heads,
    write_model,
)
from .decode import DecodeConfig, adadecode_generate, vanilla_generate
from .distill import train_heads
from .heads import rank_report
from .model import ModelConfig, init_random_model
from .rng import Rng
from .training import corpus_loss, pretrain_base


class _UsageError(Exception):
    pass


def _decode_config(args, sampler: str | None = None) -> DecodeConfig:
    return DecodeConfig(
        gamma=args.gamma,
        max_pending=args.max_pending,
        max_new_tokens=args.max_new,
        sampler=sampler or getattr(args, "sampler", "greedy"),
        seed=args.seed,
    )


def cmd_gen_corpus(args) -> int:
    if args.vocab < 2:
        raise _UsageError("--vocab must be >= 2")
    if not (0.0 <= args.skew <= 1.0):
        raise _UsageError("--skew must lie in [0, 1]")
    if args.n < 1 or args.len < 1:
        raise _UsageError("--n and --len must be >= 1")
    corpus = gen_corpus(args.vocab, args.n, args.len, args.skew, Rng(args.seed))
    write_corpus(args.out, corpus)
    print(f"wrote {len(corpus)} sequences to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    sequences = read_sequences(args.corpus)
    config = ModelConfig(
        num_layers=args.layers,
        hidden_dim=args.dim,
        num_attn_heads=args.attn_heads,
        vocab_size=args.vocab,
        max_positions=args.max_positions,
        mlp_ratio=args.mlp_ratio,
    )
    if any(t < 0 or t >= config.vocab_size for seq in sequences for t in seq):
        raise _UsageError("corpus token out of vocabulary for this model config")
    rng = Rng(args.seed)
    model = init_random_model(config, rng)
    model = pretrain_base(model, sequences, args.epochs, args.lr, rng)
    write_model(args.out, model)
    print(f"final_loss={corpus_loss(model, sequences):.6f}")
    print(f"wrote model to {args.out}")
    return 0


def cmd_train_heads(args) -> int:
    model = read_model(args.model)
    sequences = read_sequences(args.corpus)
    try:
        exit_layers = [int(x) for x in args.exit_layers.split(",") if x.strip()]
    except ValueError as e:
        raise _UsageError(f"--exit-layers must be comma-separated integers: {e}") from e
    if not exit_layers:
        raise _UsageError("--exit-layers is empty")
    heads, traces = train_heads(
        model, sequences, exit_layers, args.epochs, args.lr, Rng(args.seed)
    )
    write_heads(args.out, heads)
    lines = ["epoch,exit_layer,kl_loss"]
    for layer, trace in sorted(traces.items()):
        for epoch, value in enumerate(trace):
            lines.append(f"{epoch},{layer},{value:.9f}")
        print(f"exit_layer={layer} final_kl={trace[-1]:.6f}")
    if args.trace_out:
        atomic_write_text(args.trace_out, "\n".join(lines) + "\n")
    print(f"wrote heads to {args.out}")
    return 0


def _load_prompts(args, model) -> list[list[int]]:
    prompts = read_sequences(args.prompt_file)
    if any(t < 0 or t >= model.config.vocab_size for p in prompts for t in p):
        raise _UsageError("prompt token out of vocabulary")
    return prompts


def cmd_generate(args) -> int:
    model = read_model(args.model)
    prompts = _load_prompts(args, model)
    if args.prompt_index < 0 or args.prompt_index >= len(prompts):
        raise _UsageError(f"--prompt-index out of range (file has {len(prompts)} prompts)")
    prompt = prompts[args.prompt_index]
    config = _decode_config(args)
    if args.mode == "adadecode":
        if not args.heads:
            raise _UsageError("--mode adadecode requires --heads")
        heads = read_heads(args.heads)
        out = adadecode_generate(model, heads, prompt, config)
    else:
        out = vanilla_generate(model, prompt, config)
    print(" ".join(str(t) for t in out.tokens))
    sys.stdout.write(stats_text(out.stats))
    return 0


def cmd_bench(args) -> int:
    model = read_model(args.model)
    heads = read_heads(args.heads)
    prompts = _load_prompts(args, model)
    config = _decode_config(args)
    vanilla_outs = [vanilla_generate(model, p, config) for p in prompts]
    accel_outs = [adadecode_generate(model, heads, p, config) for p in prompts]
    van_stats = _aggregate(vanilla_outs)
    acc_stats = _aggregate(accel_outs)
    ratio = acc_stats.layer_invocations / max(1, van_stats.layer_invocations)
    print(f"vanilla_throughput_tps={throughput(van_stats):.3f}")
    print(f"adadecode_throughput_tps={throughput(acc_stats):.3f}")
    print(f"invocation_ratio={ratio:.6f}")
    if args.stats_out:
        atomic_write_text(args.stats_out, stats_text(acc_stats))
    if args.heatmap_out:
        cells = measure_confidence_heatmap(model, heads, prompts[0], args.max_new)
        atomic_write_text(args.heatmap_out, heatmap_to_csv(cells))
    return 0


def cmd_sweep(args) -> int:
    model = read_model(args.model)
    heads = read_heads(args.heads)
    prompts = _load_prompts(args, model)
    try:
        gammas = [float(x) for x in args.gammas.split(",") if x.strip()]
    except ValueError as e:
        raise _UsageError(f"--gammas must be comma-separated reals: {e}") from e
    if any(not (0.0 <= g <= 1.0) for g in gammas):
        raise _UsageError("--gammas values must lie in [0, 1]")
    config = _decode_config(args)
    rows = run_sweep(model, heads, prompts, gammas, config)
    atomic_write_text(args.out, sweep_to_csv(rows))
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def cmd_parity(args) -> int:
    model = read_model(args.model)
    heads = read_heads(args.heads)
    prompts = _load_prompts(args, model)
    config = _decode_config(args, sampler="greedy")
    diverged = []
    for i, prompt in enumerate(prompts):
        ref = vanilla_generate(model, prompt, config)
        acc = adadecode_generate(model, heads, prompt, config)
        if ref.tokens != acc.tokens:
            diverged.append(i)
    ratio = 1.0 - len(diverged) / len(prompts)
    print(f"consistency={ratio:.6f}")
    for i in diverged:
        print(f"diverged_prompt={i}")
    return 0


def cmd_rank_check(args) -> int:
    model = read_model(args.model)
    report = rank_report(model.lm_head)
    print(f"shape={report.shape[0]}x{report.shape[1]}")
    print(f"singular_values={report.num_singular_values}")
    print(f"non_zero_singular_values={report.num_nonzero}")
    print(f"smallest_singular_value={report.smallest:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adadecode",
        description="Deterministic early-exit transformer decoding toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic Markov corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--n", type=int, default=200, help="number of sequences")
    p.add_argument("--len", type=int, default=128, help="tokens per sequence")
    p.add_argument("--skew", type=float, default=0.7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="train a toy model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--attn-heads", type=int, default=4)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--max-positions", type=int, default=512)
    p.add_argument("--mlp-ratio", type=int, default=4)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.5)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-heads", help="distill intermediate LM heads")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--exit-layers", default="2,4,6")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace-out", default=None, help="KL loss trace CSV path")
    p.set_defaults(func=cmd_train_heads)

    p = sub.add_parser("generate", help="decode one prompt")
    p.add_argument("--model", required=True)
    p.add_argument("--heads", default=None)
    p.add_argument("--prompt-file", required=True)
    p.add_argument("--prompt-index", type=int, default=0)
    p.add_argument("--mode", choices=["vanilla", "adadecode"], default="vanilla")
    p.add_argument("--gamma", type=float, default=0.75)
    p.add_argument("--max-pending", type=int, default=5)
    p.add_argument("--max-new", type=int, default=512)
    p.add_argument("--sampler", choices=["greedy", "categorical"], default="greedy")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="vanilla vs accelerated stats on a prompt set")
    p.add_argument("--model", required=True)
    p.add_argument("--heads", required=True)
    p.add_argument("--prompt-file", required=True)
    p.add_argument("--gamma", type=float, default=0.75)
    p.add_argument("--max-pending", type=int, default=5)
    p.add_argument("--max-new", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stats-out", default=None, help="accelerated stats key=value file")
    p.add_argument("--heatmap-out", default=None, help="confidence heatmap CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="gamma sweep to CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--heads", required=True)
    p.add_argument("--prompt-file", required=True)
    p.add_argument("--gammas", default=",".join(str(g) for g in DEFAULT_GAMMAS))
    p.add_argument("--gamma", type=float, default=0.75)
    p.add_argument("--max-pending", type=int, default=5)
    p.add_argument("--max-new", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("parity", help="consistency ratio over a prompt set")
    p.add_argument("--model", required=True)
    p.add_argument("--heads", required=True)
    p.add_argument("--prompt-file", required=True)
    p.add_argument("--gamma", type=float, default=0.75)
    p.add_argument("--max-pending", type=int, default=5)
    p.add_argument("--max-new", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_parity)

    p = sub.add_parser("rank-check", help="rank report for the model's LM head")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_rank_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        return 1
    except Exception as e:  # runtime/I-O failures map to exit 1
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
