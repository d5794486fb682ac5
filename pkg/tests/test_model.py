import numpy as np
import pytest

import sparsecot.gradcheck as gc
from sparsecot.errors import ConfigError, PatternSyntaxError, VocabularyError
from sparsecot.model import (
    ModelConfig, ModelParams, batch_rng, decode_step, decoder_logits, encode, evaluate_task,
    greedy_decode, greedy_decode_batch, init_params, loss_and_grads, make_batch, param_layout,
    train_toy,
)
from sparsecot.reference import dense_encode, dense_next_token_probs
from sparsecot.sparsemax import simplex_project_oracle

DENSE = dict(alpha=1.0, T=0, enc_pattern="full", dec_self_pattern="causal", cross_pattern="full")


def test_config_defaults_and_validation():
    cfg = ModelConfig()
    assert cfg.D_ff == 4 * cfg.D
    assert (cfg.start_token, cfg.end_token) == (14, 15)
    with pytest.raises(ConfigError):
        ModelConfig(D=6, H=4)
    with pytest.raises(ConfigError):
        ModelConfig(alpha=0.0)
    with pytest.raises(PatternSyntaxError):
        ModelConfig(enc_pattern="window:w=")


def test_config_text_round_trip(tiny_config, tmp_path):
    text = tiny_config.to_text()
    assert ModelConfig.from_text(text) == tiny_config
    (tmp_path / "c.txt").write_text("# comment\nV=9\nshare_cot_weights=true\n")
    cfg = ModelConfig.load(tmp_path / "c.txt")
    assert cfg.V == 9 and cfg.share_cot_weights
    with pytest.raises(ConfigError):
        ModelConfig.from_text("bogus=1")
    with pytest.raises(ConfigError):
        ModelConfig.from_text("D=eight")


def test_init_is_seeded(tiny_config):
    a, b = init_params(tiny_config), init_params(tiny_config)
    assert list(a.tensors) == [entry[0] for entry in param_layout(tiny_config)] + ["embed.mask", "out.mask"]
    for k in a.tensors:
        np.testing.assert_array_equal(a[k], b[k])
    c = init_params(tiny_config.replace(seed=4))
    assert not np.array_equal(a["embed.E"], c["embed.E"])
    assert a.embedding_mask.sum() == 6


def test_shared_cot_weights_use_one_set(tiny_config):
    P = init_params(tiny_config.replace(share_cot_weights=True))
    assert any(k.startswith("cot.0.") for k in P.tensors)
    assert not any(k.startswith("cot.1.") for k in P.tensors)


def test_shapes_and_determinism(tiny_config, tiny_params, rng):
    src = rng.integers(0, 8, size=(3, 5))
    H_e, trace = encode(src, tiny_params, tiny_config)
    assert H_e.shape == (3, 5, 8) and len(trace) == 2
    logits = decoder_logits(src[:, :2], H_e, tiny_params, tiny_config)
    assert logits.shape == (3, 2, 8)
    np.testing.assert_array_equal(encode(src, tiny_params, tiny_config)[0], H_e)


def test_token_validation(tiny_config, tiny_params):
    with pytest.raises(VocabularyError):
        encode([[0, 8]], tiny_params, tiny_config)
    H_e, _ = encode([[1, 2]], tiny_params, tiny_config)
    with pytest.raises(ValueError):
        decoder_logits(np.zeros((1, 0), dtype=int), H_e, tiny_params, tiny_config)


def test_dense_limit_encode_matches_reference(rng):
    cfg = ModelConfig(V=11, D=8, H=2, seed=2, **DENSE)
    P = init_params(cfg)
    src = rng.integers(0, 11, size=(2, 6))
    got, _ = encode(src, P, cfg)
    np.testing.assert_allclose(got, dense_encode(P.tensors, src, 8, 2, 2), atol=1e-12)


def test_decode_step_matches_composed_reference(rng):
    cfg = ModelConfig(V=5, D=4, H=2, seed=1, **DENSE)
    P = init_params(cfg)
    src, prefix = np.array([[0, 2]]), np.array([[3, 1]])
    H_e, _ = encode(src, P, cfg)
    p = decode_step(prefix, H_e, P, cfg)[0]
    np.testing.assert_allclose(p, dense_next_token_probs(P.tensors, src, prefix, 5, 4, 2, 2, 2)[0],
                               atol=1e-12)
    logits = decoder_logits(prefix, H_e, P, cfg)[0, -1]
    np.testing.assert_allclose(p, simplex_project_oracle(logits), atol=1e-12)
    assert p.sum() == pytest.approx(1.0)


def test_greedy_decode(tiny_config, tiny_params):
    out = greedy_decode([1, 2, 3], 1, tiny_params, tiny_config)
    assert len(out) <= 1
    batch = greedy_decode_batch(np.array([[1, 2, 3], [4, 5, 0]]), 4, tiny_params, tiny_config)
    assert batch.shape[0] == 2 and batch.shape[1] <= 4
    assert greedy_decode([1, 2, 3], 4, tiny_params, tiny_config) == \
        greedy_decode([1, 2, 3], 4, tiny_params, tiny_config)
    with pytest.raises(ValueError):
        greedy_decode([1], 0, tiny_params, tiny_config)


def test_make_batch_copy_and_reverse(tiny_config):
    src, tin, tout = make_batch("reverse", tiny_config, 3, 2, np.random.default_rng(0))
    np.testing.assert_array_equal(tout[:, :3], src[:, ::-1])
    assert (tout[:, -1] == tiny_config.end_token).all()
    assert (tin[:, 0] == tiny_config.start_token).all()
    assert src.max() <= tiny_config.V - 3
    with pytest.raises(ConfigError):
        make_batch("sort", tiny_config, 3, 2, np.random.default_rng(0))


def test_loss_is_nonnegative(tiny_config, tiny_params):
    loss, grads = loss_and_grads(tiny_params, tiny_config, *make_batch(
        "copy", tiny_config, 4, 3, np.random.default_rng(1)))
    assert loss >= 0
    assert set(grads) == set(tiny_params.trainable_names())


def test_gradcheck_passes(tiny_config, tiny_params):
    report = gc.grad_check(tiny_params, tiny_config, gc.make_probe(tiny_config), coords_per_tensor=1)
    assert report.failures() == {}
    assert set(report.errors) == {"attention", "ffn", "norm", "embedding", "output"}
    assert report.masked_embedding_grad == 0.0


def test_gradcheck_detects_corrupted_gradient(tiny_config, tiny_params, monkeypatch):
    real = gc.loss_and_grads

    def corrupted(*args, **kwargs):
        loss, grads = real(*args, **kwargs)
        if grads is not None:
            grads["dec.0.ffn.b2"] = grads["dec.0.ffn.b2"] * 1.01
        return loss, grads

    monkeypatch.setattr(gc, "loss_and_grads", corrupted)
    report = gc.grad_check(tiny_params, tiny_config, gc.make_probe(tiny_config),
                           names=["dec.0.ffn.b2"], coords_per_tensor=3)
    assert "ffn" in report.failures()


def test_relative_error_floor():
    assert gc.relative_error(1.0, 1.0 + 1e-7) < 1e-6
    assert gc.relative_error(1e-9, 2e-9) == pytest.approx(1e-6)


def test_zero_learning_rate_keeps_curve_flat(tiny_config):
    res = train_toy("copy", tiny_config.replace(seed=0), 3, 0.0, seq_len=3, batch_size=4)
    cfg = tiny_config.replace(seed=0)
    start = init_params(cfg)
    for k in start.tensors:
        np.testing.assert_array_equal(res.params[k], start[k])
    for step, loss in enumerate(res.losses):
        batch = make_batch("copy", cfg, 3, 4, batch_rng(0, step))
        assert loss == loss_and_grads(start, cfg, *batch, need_grads=False)[0]


def test_short_training_reduces_loss(tiny_config):
    res = train_toy("copy", tiny_config, 40, 0.2, seq_len=3, batch_size=8)
    assert np.mean(res.losses[-5:]) < np.mean(res.losses[:5])
    assert 0.0 <= evaluate_task("copy", res.params, tiny_config, seq_len=3, n_seqs=5) <= 1.0


def test_resume_continues_exactly(tiny_config, tmp_path):
    full = train_toy("copy", tiny_config, 6, 0.2, seq_len=3, batch_size=4)
    first = train_toy("copy", tiny_config, 3, 0.2, seq_len=3, batch_size=4)
    first.params.save(tmp_path / "m.ckpt", step=first.steps_done)
    params, step = ModelParams.load(tmp_path / "m.ckpt")
    assert step == 3
    second = train_toy("copy", tiny_config, 3, 0.2, seq_len=3, batch_size=4, params=params,
                       start_step=step)
    assert first.losses + second.losses == full.losses
    for k in full.params.tensors:
        np.testing.assert_array_equal(second.params[k], full.params[k])


def test_train_validation(tiny_config):
    with pytest.raises(ConfigError):
        train_toy("copy", tiny_config, -1, 0.1)
    with pytest.raises(ConfigError):
        train_toy("copy", tiny_config, 1, 0.1, seq_len=3, min_len=4)
