"""On-disk formats.

Model container ("ADKW", little-endian):
    magic 4 bytes, u32 version=1,
    u32 num_layers, hidden_dim, num_attn_heads, vocab_size, max_positions,
    mlp_ratio, then every tensor in canonical order (token embedding; per
    layer wq, wk, wv, wo, w_up, w_down, attn_gain, mlp_gain; final gain;
    lm head), each as u32 rows, u32 cols, rows*cols float64 row-major.
    Gain vectors are stored as 1-by-d matrices.

Heads container ("ADKH", little-endian):
    magic 4 bytes, u32 version=1, u32 head count, then per head
    u32 exit_layer, u32 d, d*d float64 row-major.

Corpus / prompt files: UTF-8 text, one sequence per line of space-separated
decimal token ids.

All writes are atomic (temp file in the target directory, then rename), so
an interrupted run never leaves a truncated container. Parse errors raise
ContainerFormatError carrying the offending byte offset.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .bench import Corpus
from .errors import ContainerFormatError
from .heads import HeadSet, IntermediateHead
from .model import LayerWeights, ModelConfig, TransformerModel

MODEL_MAGIC = b"ADKW"
HEADS_MAGIC = b"ADKH"
VERSION = 1


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def fail(self, message: str):
        raise ContainerFormatError(message, self.offset)

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            self.fail(f"unexpected end of file (wanted {n} more bytes)")
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def matrix(self) -> np.ndarray:
        at = self.offset
        rows = self.u32()
        cols = self.u32()
        if rows == 0 or cols == 0 or rows * cols > 1 << 28:
            self.offset = at
            self.fail(f"implausible tensor shape {rows}x{cols}")
        raw = self.take(rows * cols * 8)
        m = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
        if not np.isfinite(m).all():
            self.offset = at
            self.fail("tensor contains non-finite entries")
        return m

    def done(self):
        if self.offset != len(self.data):
            self.fail(f"{len(self.data) - self.offset} trailing bytes")


def _pack_matrix(m: np.ndarray) -> bytes:
    m = np.ascontiguousarray(np.atleast_2d(np.asarray(m, dtype=np.float64)))
    return struct.pack("<II", m.shape[0], m.shape[1]) + m.astype("<f8").tobytes()


def write_model(path, model: TransformerModel):
    cfg = model.config
    parts = [
        MODEL_MAGIC,
        struct.pack(
            "<IIIIIII",
            VERSION,
            cfg.num_layers,
            cfg.hidden_dim,
            cfg.num_attn_heads,
            cfg.vocab_size,
            cfg.max_positions,
            cfg.mlp_ratio,
        ),
    ]
    for tensor in model.tensors():
        parts.append(_pack_matrix(tensor))
    atomic_write_bytes(path, b"".join(parts))


def read_model(path) -> TransformerModel:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MODEL_MAGIC:
        r.offset = 0
        r.fail(f"bad magic, expected {MODEL_MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        r.offset -= 4
        r.fail(f"unsupported version {version}")
    try:
        cfg = ModelConfig(
            num_layers=r.u32(),
            hidden_dim=r.u32(),
            num_attn_heads=r.u32(),
            vocab_size=r.u32(),
            max_positions=r.u32(),
            mlp_ratio=r.u32(),
        )
    except ValueError as e:
        raise ContainerFormatError(f"invalid model config: {e}", 8) from e
    d = cfg.hidden_dim

    def expect(m: np.ndarray, rows: int, cols: int, what: str, at: int) -> np.ndarray:
        if m.shape != (rows, cols):
            raise ContainerFormatError(
                f"{what} has shape {m.shape}, expected {(rows, cols)}", at
            )
        return m

    at = r.offset
    emb = expect(r.matrix(), cfg.vocab_size, d, "token embedding", at)
    layers = []
    for i in range(cfg.num_layers):
        vals = {}
        for name, rows, cols in (
            ("wq", d, d), ("wk", d, d), ("wv", d, d), ("wo", d, d),
            ("w_up", d, cfg.mlp_ratio * d), ("w_down", cfg.mlp_ratio * d, d),
            ("attn_gain", 1, d), ("mlp_gain", 1, d),
        ):
            at = r.offset
            vals[name] = expect(r.matrix(), rows, cols, f"layer {i + 1} {name}", at)
        vals["attn_gain"] = vals["attn_gain"][0]
        vals["mlp_gain"] = vals["mlp_gain"][0]
        layers.append(LayerWeights(**vals))
    at = r.offset
    final_gain = expect(r.matrix(), 1, d, "final gain", at)[0]
    at = r.offset
    lm_head = expect(r.matrix(), cfg.vocab_size, d, "lm head", at)
    r.done()
    return TransformerModel(cfg, emb, layers, final_gain, lm_head).freeze()


def write_heads(path, heads: HeadSet):
    parts = [HEADS_MAGIC, struct.pack("<II", VERSION, len(heads.heads))]
    for head in heads.heads:
        d = head.transform.shape[0]
        parts.append(struct.pack("<II", head.exit_layer, d))
        parts.append(np.ascontiguousarray(head.transform).astype("<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_heads(path) -> HeadSet:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != HEADS_MAGIC:
        r.offset = 0
        r.fail(f"bad magic, expected {HEADS_MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        r.offset -= 4
        r.fail(f"unsupported version {version}")
    count = r.u32()
    heads = []
    for _ in range(count):
        at = r.offset
        exit_layer = r.u32()
        d = r.u32()
        if d == 0 or d > 1 << 14:
            r.offset = at + 4
            r.fail(f"implausible head dimension {d}")
        raw = r.take(d * d * 8)
        t = np.frombuffer(raw, dtype="<f8").reshape(d, d).astype(np.float64)
        if not np.isfinite(t).all():
            r.offset = at + 8
            r.fail("head transform contains non-finite entries")
        heads.append(IntermediateHead(exit_layer, t))
    r.done()
    try:
        return HeadSet(heads)
    except ValueError as e:
        raise ContainerFormatError(f"invalid head set: {e}", 8) from e


def write_corpus(path, corpus: Corpus):
    lines = [" ".join(str(t) for t in seq) for seq in corpus.sequences]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_sequences(path) -> list[list[int]]:
    """Parse a corpus/prompt text file: one space-separated sequence per line."""
    seqs = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            seqs.append([int(tok) for tok in line.split()])
        except ValueError as e:
            raise ValueError(f"{path}:{ln}: not a token-id line: {e}") from e
    if not seqs:
        raise ValueError(f"{path}: no sequences found")
    return seqs
