import math

import numpy as np
import pytest

from gradcheck import TINY, max_relative_error, tiny_batch
from u2u import layers as L
from u2u.errors import ConfigError, DimMismatch, MissingCache, OddDim, ShapeMismatch
from u2u.seqprep import Batch
from u2u.transformer import (ModelConfig, attention, backward, continuous_frontend, forward, init_params, loss,
                             loss_and_grads, loss_grad, param_shapes, positional_encoding, stack_frames)


def test_gradients_tiny(backend):
    assert max_relative_error() < 1e-4


def test_gradients_with_dropout_replay(backend):
    cfg = ModelConfig(**{**TINY.to_dict(), "dropout": 0.3})
    # the same seed replays the same masks, so the train-mode loss is a smooth function of the weights
    assert max_relative_error(cfg, mode="train", seed=7) < 1e-4


def test_gradients_multi_head_two_layers():
    cfg = ModelConfig(d_model=8, heads=2, enc_layers=2, dec_layers=2, ffn_dim=12, dropout=0.0, vocab=7, max_len=5)
    assert max_relative_error(cfg) < 1e-4


def test_gradients_continuous_frontend(rng):
    cfg = ModelConfig(d_model=8, heads=1, enc_layers=1, dec_layers=1, ffn_dim=16, dropout=0.0, vocab=7, max_len=5,
                      frontend="continuous", feature_dim=3, stack_factor=2)
    b = tiny_batch()
    b = Batch(np.zeros_like(b.encoder_tokens), b.decoder_input, b.decoder_target,
              encoder_features=rng.normal(size=(2, 9, 3)), feature_frames=np.array([9, 5]))
    assert max_relative_error(cfg, batch=b) < 1e-4


def test_init():
    cfg = ModelConfig()
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    for name, w in a.items():
        if name.endswith((".b", ".b1", ".b2")):
            assert not w.any()
        if name.endswith(".g"):
            assert np.all(w == 1)
    w = a["enc.0.self.wq"].astype(np.float64)
    assert abs(w.var() - 1 / 512) < 0.2 / 512
    assert set(param_shapes(cfg)) == set(a)


def test_positional_encoding():
    pe = positional_encoding(300, 512)
    assert np.all(pe[0, 0::2] == 0) and np.all(pe[0, 1::2] == 1)
    assert abs(pe[1, 0] - 0.841471) < 1e-6
    assert np.all(np.abs(pe) <= 1)
    with pytest.raises(OddDim):
        positional_encoding(5, 7)


def test_attention_examples():
    k = np.eye(3)[None]
    v = np.array([[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]])
    q = 100 * np.array([[[0.0, 1.0, 0.0]]])
    out = attention(q, k, v, np.ones((1, 1, 3), dtype=bool))
    # hand softmax of scores [0, 100/sqrt(3), 0]
    s = np.array([0, 100 / math.sqrt(3), 0])
    w = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    np.testing.assert_allclose(out[0, 0], w @ v[0], rtol=1e-12)
    np.testing.assert_allclose(out[0, 0], [3, 4], atol=1e-12)
    same = attention(np.random.default_rng(0).normal(size=(1, 4, 3)), k, np.tile([[7.0, -1.0]], (1, 3, 1)),
                     np.ones((1, 4, 3), dtype=bool))
    np.testing.assert_allclose(same, np.tile([7.0, -1.0], (1, 4, 1)))
    none = attention(q, k, v, np.zeros((1, 1, 3), dtype=bool))
    assert not none.any()
    with pytest.raises(ShapeMismatch):
        attention(q, k, v, np.ones((1, 2, 3), dtype=bool))


def small():
    return ModelConfig(d_model=16, heads=2, enc_layers=2, dec_layers=2, ffn_dim=32, dropout=0.1, vocab=11,
                       max_len=12)


def random_batch(rng, cfg, b=3, t=12):
    lens = rng.integers(2, t - 1, b)
    enc = np.zeros((b, t), dtype=np.int64)
    din = np.zeros((b, t), dtype=np.int64)
    dout = np.zeros((b, t), dtype=np.int64)
    for i, n in enumerate(lens):
        u = rng.integers(3, cfg.vocab, n)
        enc[i, :n] = u[::-1]
        din[i, 0] = 1
        din[i, 1:n + 1] = u
        dout[i, :n] = u
        dout[i, n] = 2
    return Batch(enc, din, dout)


def test_eval_deterministic_and_train_seeded(rng):
    cfg = small()
    p = init_params(cfg, 0)
    b = random_batch(rng, cfg)
    a, _ = forward(p, cfg, b, "eval")
    c, _ = forward(p, cfg, b, "eval")
    assert a.tobytes() == c.tobytes()
    t1, _ = forward(p, cfg, b, "train", seed=5)
    t2, _ = forward(p, cfg, b, "train", seed=5)
    t3, _ = forward(p, cfg, b, "train", seed=6)
    assert t1.tobytes() == t2.tobytes() and t1.tobytes() != t3.tobytes()


def test_causality(rng):
    cfg = small()
    p = init_params(cfg, 1, np.float64)
    b = random_batch(rng, cfg)
    base, _ = forward(p, cfg, b)
    for t in range(0, 11):
        din = b.decoder_input.copy()
        din[:, t + 1:] = rng.integers(3, cfg.vocab, din[:, t + 1:].shape)
        out, _ = forward(p, cfg, Batch(b.encoder_tokens, din, b.decoder_target))
        np.testing.assert_array_equal(out[:, :t + 1], base[:, :t + 1])


def test_source_pad_invariance(rng):
    cfg = small()
    p = init_params(cfg, 2, np.float64)
    b = random_batch(rng, cfg)
    base, _ = forward(p, cfg, b)
    # PAD-masked keys get exactly zero weight, so their token embeddings cannot leak
    embed = p["src_embed"].copy()
    p["src_embed"][0] = rng.normal(size=cfg.d_model) * 10
    out, _ = forward(p, cfg, b)
    p["src_embed"] = embed
    np.testing.assert_array_equal(out, base)


def test_compact_matches_full(rng):
    cfg = small()
    p = init_params(cfg, 3, np.float64)
    b = random_batch(rng, cfg)
    full, _ = forward(p, cfg, b, "eval")
    comp, _ = forward(p, cfg, b, "eval", compact=True)
    w = comp.shape[1]
    valid = b.decoder_target[:, :w] != 0
    np.testing.assert_allclose(comp[valid], full[:, :w][valid], rtol=1e-10, atol=1e-12)
    assert abs(loss(full, b.decoder_target) - loss(comp, b.trimmed().decoder_target)) < 1e-12


def test_loss_examples(rng):
    tgt = np.array([[5, 6, 2, 0]])
    assert abs(loss(np.zeros((1, 4, 103)), tgt) - math.log(103)) < 1e-12
    assert abs(loss(np.zeros((1, 4, 103)), tgt) - 4.6347) < 1e-4
    margin = np.zeros((1, 4, 103))
    for i, t in enumerate(tgt[0]):
        margin[0, i, t] = 50
    assert loss(margin, tgt) < 1e-15
    logits = rng.normal(size=(2, 5, 7))
    target = rng.integers(1, 7, (2, 5))
    target[1, 3:] = 0
    total, n = 0.0, 0
    for b in range(2):
        for t in range(5):
            if target[b, t]:
                z = logits[b, t]
                total += -(z[target[b, t]] - math.log(sum(math.exp(x) for x in z)))
                n += 1
    assert abs(loss(logits, target) - total / n) < 1e-9


def test_log_softmax_stable():
    z = np.array([[1e4, -1e4, 0.0]])
    assert np.all(np.isfinite(L.log_softmax(z)))


def test_unused_embedding_rows_get_zero_grad(rng):
    cfg = small()
    p = init_params(cfg, 0, np.float64)
    b = random_batch(rng, cfg)
    _, g = loss_and_grads(p, cfg, b, "eval")
    unused = sorted(set(range(cfg.vocab)) - set(b.decoder_input.ravel().tolist()))
    assert unused
    assert not g["tgt_embed"][unused].any()


def test_backward_needs_cache(rng):
    cfg = small()
    p = init_params(cfg)
    with pytest.raises(MissingCache):
        backward(p, cfg, None, None)
    b = random_batch(rng, cfg)
    logits, _ = forward(p, cfg, b, keep_cache=False)
    assert loss_grad(logits, b.decoder_target).shape == logits.shape


def test_layer_norm_gain_grad_on_constant_input():
    x = np.full((1, 2, 4), 3.0)
    g, b = np.ones(4), np.zeros(4)
    out, c = L.layer_norm_fwd(x, g, b)
    grads = {"g": np.zeros(4), "b": np.zeros(4)}
    dy = np.arange(8.0).reshape(1, 2, 4)
    L.layer_norm_bwd(dy, c, grads, "g", "b")
    h = 1e-6
    fd = np.zeros(4)
    for i in range(4):
        gp, gm = g.copy(), g.copy()
        gp[i] += h
        gm[i] -= h
        fd[i] = ((L.layer_norm_fwd(x, gp, b)[0] - L.layer_norm_fwd(x, gm, b)[0]) * dy).sum() / (2 * h)
    assert np.all(np.isfinite(grads["g"]))
    np.testing.assert_allclose(grads["g"], fd, atol=1e-8)


def test_continuous_frontend_shapes():
    cfg = ModelConfig(d_model=8, heads=1, enc_layers=1, dec_layers=1, ffn_dim=8, vocab=7, frontend="continuous",
                      feature_dim=80, stack_factor=1)
    p = init_params(cfg, 0, np.float64)
    x, valid, _ = continuous_frontend(np.zeros((1, 49, 80)), [49], p, cfg)
    assert x.shape == (1, 300, 8) and valid.sum() == 49
    np.testing.assert_allclose(x[0], positional_encoding(300, 8))
    _, valid4 = stack_frames(np.zeros((1, 49, 80)), [49], 4, 300)
    assert valid4.sum() == 12
    with pytest.raises(DimMismatch):
        continuous_frontend(np.zeros((1, 49, 13)), [49], p, cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        ModelConfig(frontend="spectral")
