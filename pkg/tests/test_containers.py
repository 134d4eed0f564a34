import numpy as np
import pytest

from adadecode.bench import gen_corpus
from adadecode.containers import (
    read_heads,
    read_model,
    read_sequences,
    write_corpus,
    write_heads,
    write_model,
)
from adadecode.errors import ContainerFormatError
from adadecode.heads import HeadSet, IntermediateHead
from adadecode.model import ModelConfig, init_random_model, model_fingerprint
from adadecode.rng import Rng

CFG = ModelConfig(num_layers=3, hidden_dim=16, num_attn_heads=2,
                  vocab_size=32, max_positions=48)


def test_model_round_trip_bitwise(tmp_path):
    model = init_random_model(CFG, Rng(1))
    path = tmp_path / "m.adkw"
    write_model(path, model)
    loaded = read_model(path)
    assert model_fingerprint(loaded) == model_fingerprint(model)
    assert loaded.config == model.config


def test_heads_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    heads = HeadSet([
        IntermediateHead(1, rng.standard_normal((16, 16))),
        IntermediateHead(2, rng.standard_normal((16, 16))),
    ])
    path = tmp_path / "h.adkh"
    write_heads(path, heads)
    loaded = read_heads(path)
    assert loaded.exit_layers() == [1, 2]
    for a, b in zip(heads.heads, loaded.heads):
        assert np.array_equal(a.transform, b.transform)


def test_write_is_atomic_overwrite(tmp_path):
    model = init_random_model(CFG, Rng(2))
    path = tmp_path / "m.adkw"
    write_model(path, model)
    first = path.read_bytes()
    write_model(path, model)
    assert path.read_bytes() == first
    assert list(tmp_path.iterdir()) == [path]  # no temp file litter


def test_bad_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "bad.adkw"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ContainerFormatError, match="byte offset 0") as exc:
        read_model(path)
    assert exc.value.offset == 0


def test_truncated_model_reports_offset(tmp_path):
    model = init_random_model(CFG, Rng(3))
    path = tmp_path / "m.adkw"
    write_model(path, model)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(ContainerFormatError, match="byte offset"):
        read_model(path)


def test_non_finite_tensor_rejected(tmp_path):
    model = init_random_model(CFG, Rng(4))
    path = tmp_path / "m.adkw"
    write_model(path, model)
    data = bytearray(path.read_bytes())
    # first tensor payload starts after 4 magic + 7*4 header + 8 shape bytes
    start = 4 + 28 + 8
    data[start : start + 8] = np.array([np.nan]).tobytes()
    path.write_bytes(bytes(data))
    with pytest.raises(ContainerFormatError, match="non-finite"):
        read_model(path)


def test_heads_bad_magic_offset(tmp_path):
    path = tmp_path / "h.adkh"
    path.write_bytes(b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00")
    with pytest.raises(ContainerFormatError) as exc:
        read_heads(path)
    assert exc.value.offset == 0


def test_corpus_round_trip(tmp_path):
    corpus = gen_corpus(32, 5, 12, 0.5, Rng(9))
    path = tmp_path / "c.txt"
    write_corpus(path, corpus)
    seqs = read_sequences(path)
    assert seqs == corpus.sequences


def test_sequences_reject_garbage(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("1 2 3\n4 five 6\n")
    with pytest.raises(ValueError, match=":2:"):
        read_sequences(path)


def test_empty_sequences_rejected(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("\n\n")
    with pytest.raises(ValueError, match="no sequences"):
        read_sequences(path)
