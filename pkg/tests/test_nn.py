"""Neural building blocks: layer semantics, attention causality, gradient
checks through composed modules, Adam behavior, and checkpoint round-trips."""

import numpy as np
import pytest

from dsivcfr.errors import ConfigurationError, DimensionError, NumericError
from dsivcfr.nn import (MLP, NEG_MASK, Adam, LayerNorm, Linear,
                        MultiHeadAttention, TransformerBlock,
                        TransformerEncoder, assign_checkpoint, causal_mask,
                        dropout, glorot_uniform, load_checkpoint,
                        save_checkpoint, sinusoidal_encoding, zero_grads)
from dsivcfr.simgen import substream
from dsivcfr.tensor import Tensor, grad_check


def rng():
    return np.random.default_rng(7)


# ---- linear / layer norm ----------------------------------------------------


def test_linear_matches_numpy():
    lin = Linear(3, 2, rng())
    x = np.random.default_rng(1).standard_normal((5, 3))
    np.testing.assert_allclose(lin(Tensor(x)).data, x @ lin.w.data + lin.b.data)


def test_glorot_bounds():
    w = glorot_uniform(rng(), 100, 50)
    limit = np.sqrt(6.0 / 150)
    assert np.all(np.abs(w) <= limit)


def test_layernorm_normalizes_last_axis():
    ln = LayerNorm(8)
    x = np.random.default_rng(2).standard_normal((4, 8)) * 5 + 3
    out = ln(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)


def test_layernorm_gradients():
    ln = LayerNorm(5)
    x = Tensor(np.random.default_rng(3).standard_normal((2, 5)), requires_grad=True)
    p = {"x": x, **ln.params("ln")}
    report = grad_check(lambda: (ln(x) * Tensor(np.arange(10.0).reshape(2, 5))).sum(), p)
    assert report.passed, report.per_param


def test_layernorm_invalid_eps():
    with pytest.raises(ConfigurationError):
        LayerNorm(4, eps=0.0)


# ---- dropout ----------------------------------------------------------------


def test_dropout_eval_identity():
    x = Tensor(np.ones((3, 3)))
    assert dropout(x, 0.5, training=False, rng=None) is x
    assert dropout(x, 0.0, training=True, rng=None) is x


def test_dropout_inverted_scaling():
    g = np.random.default_rng(0)
    x = Tensor(np.ones((200, 200)))
    out = dropout(x, 0.25, training=True, rng=g).data
    kept = out[out > 0]
    np.testing.assert_allclose(kept, 1.0 / 0.75)
    assert abs(out.mean() - 1.0) < 0.02   # expectation preserved


def test_dropout_errors():
    with pytest.raises(ConfigurationError):
        dropout(Tensor(np.ones(2)), 1.0, True, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        dropout(Tensor(np.ones(2)), 0.5, True, None)


# ---- attention --------------------------------------------------------------


def test_causal_mask_pattern():
    m = causal_mask(3).data
    assert m[0, 1] == NEG_MASK and m[1, 2] == NEG_MASK
    assert m[1, 0] == 0.0 and np.all(np.diag(m) == 0.0)


def test_attention_causality():
    mha = MultiHeadAttention(8, 2, rng())
    x = np.random.default_rng(4).standard_normal((2, 5, 8))
    base = mha(Tensor(x), causal=True).data
    x2 = x.copy()
    x2[:, -1, :] += 10.0   # perturb only the final position
    pert = mha(Tensor(x2), causal=True).data
    np.testing.assert_array_equal(base[:, :-1], pert[:, :-1])
    assert not np.allclose(base[:, -1], pert[:, -1])


def test_attention_weights_causal_rows():
    mha = MultiHeadAttention(8, 2, rng())
    x = np.random.default_rng(5).standard_normal((1, 4, 8))
    _, w = mha(Tensor(x), causal=True, return_weights=True)
    w = w.data  # [batch, heads, 4, 4]
    assert np.all(np.triu(w[0, 0], k=1) == 0.0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_gradients():
    mha = MultiHeadAttention(4, 2, rng())
    x = Tensor(np.random.default_rng(6).standard_normal((2, 3, 4)), requires_grad=True)
    p = {"x": x, **mha.params("mha")}
    report = grad_check(lambda: mha(x).square().sum(), p)
    assert report.passed, max(report.per_param.items(), key=lambda kv: kv[1])


def test_attention_shape_errors():
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(7, 2, rng())
    mha = MultiHeadAttention(8, 2, rng())
    with pytest.raises(DimensionError):
        mha(Tensor(np.zeros((3, 8))))
    with pytest.raises(DimensionError):
        mha(Tensor(np.zeros((1, 3, 6))))


# ---- encoder ----------------------------------------------------------------


def test_sinusoidal_encoding_values():
    pe = sinusoidal_encoding(4, 6)
    assert pe.shape == (4, 6)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1, 0, 1], atol=1e-12)
    np.testing.assert_allclose(pe[2, 0], np.sin(2.0))


def test_encoder_causality_end_to_end():
    enc = TransformerEncoder(3, 8, 2, 2, 16, 0.0, rng())
    x = np.random.default_rng(8).standard_normal((2, 6, 3))
    base = enc(Tensor(x)).data
    x2 = x.copy()
    x2[:, 4:, :] += 5.0
    pert = enc(Tensor(x2)).data
    np.testing.assert_array_equal(base[:, :4], pert[:, :4])


def test_encoder_empty_sequence_rejected():
    enc = TransformerEncoder(3, 8, 1, 2, 16, 0.0, rng())
    with pytest.raises(DimensionError):
        enc(Tensor(np.zeros((2, 0, 3))))


def test_encoder_gradients():
    enc = TransformerEncoder(2, 4, 1, 2, 8, 0.0, rng())
    x = np.random.default_rng(9).standard_normal((2, 3, 2))
    p = enc.params("enc")
    report = grad_check(lambda: enc(Tensor(x)).square().mean(), p)
    assert report.passed, max(report.per_param.items(), key=lambda kv: kv[1])


def test_block_param_names_disjoint():
    enc = TransformerEncoder(3, 8, 2, 2, 16, 0.1, rng())
    names = list(enc.params("e"))
    assert len(names) == len(set(names))


# ---- MLP --------------------------------------------------------------------


def test_mlp_frozen_blocks_gradient():
    mlp = MLP([3, 4, 2], rng())
    x = Tensor(np.random.default_rng(10).standard_normal((5, 3)), requires_grad=True)
    zero_grads(mlp.params("m"))
    mlp(x, frozen=True).sum().backward()
    assert all(p.grad is None for p in mlp.params("m").values())
    assert x.grad is not None


def test_mlp_single_layer_is_linear():
    mlp = MLP([3, 2], rng())
    x = np.random.default_rng(11).standard_normal((4, 3))
    np.testing.assert_allclose(mlp(Tensor(x)).data,
                               x @ mlp.layers[0].w.data + mlp.layers[0].b.data)
    with pytest.raises(ConfigurationError):
        MLP([3], rng())


# ---- Adam -------------------------------------------------------------------


def test_adam_first_step_is_lr_sized():
    p = {"w": Tensor(np.array([1.0, -1.0]), requires_grad=True)}
    p["w"].grad = np.array([0.5, -2.0])
    opt = Adam(p, lr=0.01, clip_norm=None)
    opt.step()
    # bias-corrected first step moves each coordinate by ~lr against the grad sign
    np.testing.assert_allclose(p["w"].data, [1.0 - 0.01, -1.0 + 0.01], atol=1e-6)
    assert p["w"].grad is None


def test_adam_clipping_scales_update():
    # grads of norm 10 clipped at 1 must behave like grads scaled by 0.1
    def run(clip, scale):
        p = {"w": Tensor(np.array([0.0, 0.0]), requires_grad=True)}
        p["w"].grad = np.array([6.0, 8.0]) * scale
        opt = Adam(p, lr=0.1, clip_norm=clip)
        opt.step()
        return p["w"].data.copy()

    np.testing.assert_allclose(run(clip=1.0, scale=1.0), run(clip=None, scale=0.1))


def test_adam_rejects_nan_gradient():
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    p["w"].grad = np.array([np.nan])
    with pytest.raises(NumericError, match="w"):
        Adam(p).step()


def test_adam_missing_grad_leaves_param():
    p = {"w": Tensor(np.array([3.0]), requires_grad=True)}
    Adam(p, lr=0.1).step()
    np.testing.assert_array_equal(p["w"].data, [3.0])


# ---- checkpoints ------------------------------------------------------------


def test_checkpoint_roundtrip_exact(tmp_path):
    mlp = MLP([3, 5, 2], rng())
    params = mlp.params("m")
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, params, {"layers": [3, 5, 2]})
    values, config = load_checkpoint(path)
    assert config == {"layers": [3, 5, 2]}
    for name, p in params.items():
        np.testing.assert_array_equal(values[name], p.data)

    clone = MLP([3, 5, 2], np.random.default_rng(99))
    assign_checkpoint(clone.params("m"), values)
    x = np.random.default_rng(12).standard_normal((4, 3))
    np.testing.assert_array_equal(clone(Tensor(x)).data, mlp(Tensor(x)).data)


def test_checkpoint_mismatches_rejected(tmp_path):
    mlp = MLP([3, 5, 2], rng())
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, mlp.params("m"), {})
    values, _ = load_checkpoint(path)

    other = MLP([3, 4, 2], rng())
    with pytest.raises(ConfigurationError):
        assign_checkpoint(other.params("m"), values)       # shape mismatch
    with pytest.raises(ConfigurationError):
        assign_checkpoint(MLP([3, 5], rng()).params("m"), values)  # name mismatch


def test_checkpoint_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    from dsivcfr.errors import ParseError
    with pytest.raises(ParseError):
        load_checkpoint(path)


def test_substream_determinism_and_separation():
    a1 = substream(3, "x", 0).random(4)
    a2 = substream(3, "x", 0).random(4)
    b = substream(3, "x", 1).random(4)
    c = substream(3, "y", 0).random(4)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, c)
