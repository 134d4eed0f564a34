import numpy as np
import pytest

from adadecode.errors import DivergenceError
from adadecode.model import ModelConfig, init_random_model, model_fingerprint
from adadecode.rng import Rng
from adadecode.training import (
    _mutable_copy,
    corpus_loss,
    loss_and_grads,
    pretrain_base,
    sequence_loss,
)

GRAD_CFG = ModelConfig(num_layers=2, hidden_dim=8, num_attn_heads=2,
                       vocab_size=32, max_positions=64)


def central_difference(model, tokens, tensor, idx, h=1e-5):
    orig = tensor[idx]
    tensor[idx] = orig + h
    up = sequence_loss(model, tokens)
    tensor[idx] = orig - h
    down = sequence_loss(model, tokens)
    tensor[idx] = orig
    return (up - down) / (2 * h)


def test_gradients_match_finite_differences():
    model = init_random_model(GRAD_CFG, Rng(21))
    tokens = [5, 9, 1, 30, 12, 7, 7, 2]
    _, grads = loss_and_grads(model, tokens)
    work = _mutable_copy(model)
    probes = np.random.default_rng(0)

    checks = [
        (work.lm_head, grads.lm_head),
        (work.final_gain, grads.final_gain),
        (work.layers[0].wq, grads.layers[0]["wq"]),
        (work.layers[0].wk, grads.layers[0]["wk"]),
        (work.layers[1].wv, grads.layers[1]["wv"]),
        (work.layers[1].wo, grads.layers[1]["wo"]),
        (work.layers[0].w_up, grads.layers[0]["w_up"]),
        (work.layers[1].w_down, grads.layers[1]["w_down"]),
        (work.layers[0].attn_gain, grads.layers[0]["attn_gain"]),
        (work.layers[1].mlp_gain, grads.layers[1]["mlp_gain"]),
    ]
    for tensor, grad in checks:
        for _ in range(3):
            idx = tuple(int(probes.integers(0, s)) for s in tensor.shape)
            numeric = central_difference(work, tokens, tensor, idx)
            analytic = grad[idx]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
            assert rel < 1e-5, f"shape {tensor.shape} idx {idx}: {analytic} vs {numeric}"
    # embedding rows of tokens actually present
    for tok in (5, 30, 2):
        idx = (tok, int(probes.integers(0, GRAD_CFG.hidden_dim)))
        numeric = central_difference(work, tokens, work.token_embedding, idx)
        analytic = grads.token_embedding[idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
        assert rel < 1e-5


def test_zero_epochs_bitwise_unchanged():
    model = init_random_model(GRAD_CFG, Rng(2))
    out = pretrain_base(model, [[1, 2, 3, 4]], 0, 0.5, Rng(0))
    assert model_fingerprint(out) == model_fingerprint(model)
    assert out is not model


def test_input_model_never_mutated():
    model = init_random_model(GRAD_CFG, Rng(3))
    before = model_fingerprint(model)
    pretrain_base(model, [[1, 2, 3, 4, 5, 6]] * 3, 4, 0.3, Rng(0))
    assert model_fingerprint(model) == before


def test_memorizes_degenerate_corpus():
    model = init_random_model(GRAD_CFG, Rng(4))
    seq = [1, 2, 3, 4, 5, 6, 7, 8] * 4
    trained = pretrain_base(model, [seq], 300, 0.5, Rng(0))
    assert corpus_loss(trained, [seq]) < 0.1


def test_first_epoch_strictly_decreases_loss():
    from adadecode.bench import gen_corpus

    corpus = gen_corpus(64, 6, 24, 0.8, Rng(5))
    model = init_random_model(
        ModelConfig(num_layers=2, hidden_dim=16, num_attn_heads=2,
                    vocab_size=64, max_positions=64),
        Rng(6),
    )
    before = corpus_loss(model, corpus)
    after = corpus_loss(pretrain_base(model, corpus, 1, 0.3, Rng(0)), corpus)
    assert after < before


def test_divergence_raises():
    model = init_random_model(GRAD_CFG, Rng(7))
    with pytest.raises(DivergenceError, match="learning rate"):
        pretrain_base(model, [[1, 2, 3, 4, 5, 6, 7, 8]] * 2, 200, 1e4, Rng(0))


def test_deterministic_given_seed():
    model = init_random_model(GRAD_CFG, Rng(8))
    corpus = [[3, 1, 4, 1, 5], [9, 2, 6, 5, 3], [5, 8, 9, 7, 9]]
    a = pretrain_base(model, corpus, 3, 0.2, Rng(11))
    b = pretrain_base(model, corpus, 3, 0.2, Rng(11))
    assert model_fingerprint(a) == model_fingerprint(b)
