"""Backbone tests: tokenizer geometry, attention/FFN oracles, full-block grads."""

import numpy as np
import pytest

from fscil.backbone import (
    BackboneConfig,
    Encoder,
    conv_tokenize,
    encoder_forward,
    ffn_forward,
    hash_state,
    load_state,
    mhsa_forward,
    save_state,
    sequence_pool,
)
from fscil.errors import ArgumentError
from fscil.numerics import SeededRng, Tensor, gelu, grad_check


def small_cfg(**kw):
    base = dict(
        image_size=4,
        conv_channels=(8,),
        conv_kernel=3,
        conv_stride=1,
        conv_padding=1,
        pool_size=0,
        embed_dim=8,
        layers=1,
        heads=2,
        ffn_hidden=12,
    )
    base.update(kw)
    return BackboneConfig(**base)


# -- tokenizer geometry ----------------------------------------------------------


def test_token_count_28px_conv7_stride2_pool2():
    # convolution arithmetic oracle: (28+4-7)//2+1 = 13, pool -> 6; 6*6 = 36
    cfg = BackboneConfig(
        image_size=28, conv_channels=(16,), conv_kernel=7, conv_stride=2, conv_padding=2, pool_size=2, pool_stride=2, embed_dim=16, heads=2
    )
    assert cfg.token_count() == 36
    enc = Encoder(cfg, SeededRng(0)).eval()
    tokens = conv_tokenize(Tensor(np.random.default_rng(0).normal(size=(2, 1, 28, 28))), enc)
    assert tokens.shape == (2, 36, 16)


def test_token_count_degenerate_kernel_equals_image():
    cfg = BackboneConfig(image_size=7, conv_channels=(8,), conv_kernel=7, conv_stride=1, conv_padding=0, pool_size=0, embed_dim=8, heads=2)
    assert cfg.token_count() == 1
    enc = Encoder(cfg, SeededRng(1)).eval()
    tokens = conv_tokenize(Tensor(np.zeros((1, 1, 7, 7))), enc)
    assert tokens.shape == (1, 1, 8)


def test_two_conv_layers_with_7px_kernels_constructible():
    cfg = BackboneConfig(
        image_size=32, conv_channels=(12, 24), conv_kernel=7, conv_stride=2, conv_padding=3, pool_size=2, pool_stride=2, embed_dim=24, heads=4
    )
    enc = Encoder(cfg, SeededRng(2)).eval()
    tokens = conv_tokenize(Tensor(np.random.default_rng(1).normal(size=(1, 1, 32, 32))), enc)
    assert tokens.shape[-1] == 24 and tokens.shape[-2] == cfg.token_count()


def test_kernel_larger_than_image_rejected():
    with pytest.raises(ArgumentError):
        BackboneConfig(image_size=4, conv_channels=(8,), conv_kernel=9, conv_padding=0, embed_dim=8, heads=2).token_count()


# -- attention --------------------------------------------------------------------


def test_single_token_single_head_attention():
    cfg = small_cfg(heads=1)
    enc = Encoder(cfg, SeededRng(3))
    block = enc.blocks[0]
    x = Tensor(np.random.default_rng(2).normal(size=(1, 8)))
    out, maps = mhsa_forward(x, block)
    expected = (x.data @ block.v[0].data) @ block.out_proj.data  # softmax over one token is 1
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    np.testing.assert_allclose(maps, np.ones((1, 1, 1)), atol=1e-15)


def test_attention_matches_naive_oracle():
    cfg = BackboneConfig(image_size=4, conv_channels=(2,), embed_dim=2, heads=1, layers=1, ffn_hidden=4, conv_kernel=3, conv_padding=1)
    enc = Encoder(cfg, SeededRng(4))
    block = enc.blocks[0]
    q = np.array([[0.3, -0.2], [1.0, 0.4]])
    k = np.array([[0.5, 0.1], [-0.7, 0.9]])
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    o = np.array([[0.2, -0.4], [0.8, 0.3]])
    block.q[0].data, block.k[0].data, block.v[0].data, block.out_proj.data = q, k, v, o
    x = np.array([[0.1, 0.9], [0.5, -0.3]])

    # naive oracle, written straight from the definition
    qm, km, vm = x @ q, x @ k, x @ v
    scores = qm @ km.T / np.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    att = e / e.sum(axis=1, keepdims=True)
    expected = (att @ vm) @ o

    out, maps = mhsa_forward(Tensor(x), block)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    np.testing.assert_allclose(maps[0], att, atol=1e-12)


def test_attention_rows_sum_to_one_and_shape_preserved():
    cfg = small_cfg(heads=4, embed_dim=16, conv_channels=(16,))
    enc = Encoder(cfg, SeededRng(5))
    rng = np.random.default_rng(3)
    for _ in range(10):
        n = int(rng.integers(1, 7))
        x = Tensor(rng.normal(size=(2, n, 16)))
        out, maps = mhsa_forward(x, enc.blocks[0])
        assert out.shape == (2, n, 16)
        np.testing.assert_allclose(maps.sum(axis=-1), np.ones(maps.shape[:-1]), atol=1e-9)


def test_paper_scale_heads_divide_embed_dim():
    cfg = BackboneConfig(image_size=8, conv_channels=(384,), embed_dim=384, heads=6, layers=1, ffn_hidden=128, conv_kernel=3, conv_padding=1, pool_size=2)
    assert cfg.head_dim == 64
    enc = Encoder(cfg, SeededRng(6))
    x = Tensor(np.random.default_rng(4).normal(size=(1, 9, 384)))
    out, _ = mhsa_forward(x, enc.blocks[0])
    assert out.shape == (1, 9, 384)


# -- FFN ---------------------------------------------------------------------------


def test_ffn_zero_projections_give_zero():
    enc = Encoder(small_cfg(), SeededRng(7))
    block = enc.blocks[0]
    block.theta1.data = np.zeros_like(block.theta1.data)
    block.theta2.data = np.zeros_like(block.theta2.data)
    x = Tensor(np.random.default_rng(5).normal(size=(3, 8)))
    for placement in ("between", "before"):
        np.testing.assert_allclose(ffn_forward(x, block, placement, mode="eval").data, np.zeros((3, 8)), atol=1e-15)


def test_ffn_between_with_identity_bn_matches_mlp_oracle():
    enc = Encoder(small_cfg(), SeededRng(8))
    block = enc.blocks[0]
    x = np.random.default_rng(6).normal(size=(3, 8))
    out = ffn_forward(Tensor(x), block, "between", mode="eval")  # fresh running stats: BN is identity in eval
    oracle = gelu(Tensor(x @ block.theta1.data)).data @ block.theta2.data
    np.testing.assert_allclose(out.data, oracle, atol=1e-12)


def test_ffn_placement_default_is_between():
    assert BackboneConfig(image_size=4, embed_dim=8, heads=2, conv_channels=(8,)).bn_placement == "between"


def test_ffn_before_normalizes_input_first():
    enc = Encoder(small_cfg(), SeededRng(9))
    block = enc.blocks[0]
    x = np.random.default_rng(7).normal(size=(4, 8))
    out = ffn_forward(Tensor(x), block, "before", mode="eval")
    oracle = gelu(Tensor(x @ block.theta1.data)).data @ block.theta2.data  # eval BN is identity here too
    np.testing.assert_allclose(out.data, oracle, atol=1e-12)
    with pytest.raises(ArgumentError):
        ffn_forward(Tensor(x), block, "sideways")


# -- sequence pool -------------------------------------------------------------------


def test_sequence_pool_single_token_identity():
    enc = Encoder(small_cfg(), SeededRng(10))
    x = np.random.default_rng(8).normal(size=(1, 1, 8))
    np.testing.assert_array_equal(sequence_pool(Tensor(x), enc).data, x[:, 0, :])


def test_sequence_pool_zero_scores_mean():
    enc = Encoder(small_cfg(), SeededRng(11))
    enc.pool_score.data = np.zeros_like(enc.pool_score.data)
    x = np.random.default_rng(9).normal(size=(2, 5, 8))
    np.testing.assert_allclose(sequence_pool(Tensor(x), enc).data, x.mean(axis=1), atol=1e-12)


def test_sequence_pool_matches_weighted_sum_oracle():
    enc = Encoder(small_cfg(), SeededRng(12))
    x = np.random.default_rng(10).normal(size=(3, 8))
    scores = x @ enc.pool_score.data
    e = np.exp(scores - scores.max())
    w = e / e.sum()
    oracle = (w * x).sum(axis=0)
    np.testing.assert_allclose(sequence_pool(Tensor(x), enc).data, oracle, atol=1e-12)


# -- encoder ---------------------------------------------------------------------------


def test_encoder_zero_blocks_is_pooled_tokenizer():
    cfg = small_cfg(layers=0, final_norm=False)
    enc = Encoder(cfg, SeededRng(13)).eval()
    x = Tensor(np.random.default_rng(11).normal(size=(2, 1, 4, 4)))
    z = encoder_forward(x, enc)
    np.testing.assert_array_equal(z.data, enc.sequence_pool(enc.tokenize(x)).data)


def test_encoder_eval_deterministic_bitwise():
    enc = Encoder(small_cfg(layers=2), SeededRng(14)).eval()
    x = Tensor(np.random.default_rng(12).normal(size=(3, 1, 4, 4)))
    z1 = encoder_forward(x, enc)
    z2 = encoder_forward(x, enc)
    assert np.array_equal(z1.data, z2.data)


def test_flop_estimate_scales_with_depth_and_width():
    base = small_cfg(layers=2)
    deep = small_cfg(layers=4)
    n, d = base.token_count(), base.embed_dim
    pool = 2 * n * d
    assert deep.flop_estimate() - pool == 2 * (base.flop_estimate() - pool)
    wide = small_cfg(layers=2, ffn_hidden=24)
    assert wide.flop_estimate() - base.flop_estimate() == base.layers * 2 * n * d * 12  # linear in ffn width


def test_full_block_gradients_through_train_bn():
    cfg = small_cfg(layers=1, pool_size=0)
    enc = Encoder(cfg, SeededRng(15)).train()
    x = np.random.default_rng(13).normal(size=(8, 1, 4, 4))
    block = enc.blocks[0]
    # (name, getter, setter) so the probe tensor itself enters the graph
    checks = [
        ("q0", lambda: block.q[0], lambda t: block.q.__setitem__(0, t)),
        ("theta1", lambda: block.theta1, lambda t: setattr(block, "theta1", t)),
        ("attn_bn.gamma", lambda: block.attn_bn.gamma, lambda t: setattr(block.attn_bn, "gamma", t)),
        ("ffn_bn_mid.beta", lambda: block.ffn_bn_mid.beta, lambda t: setattr(block.ffn_bn_mid, "beta", t)),
        ("pool_score", lambda: enc.pool_score, lambda t: setattr(enc, "pool_score", t)),
        ("conv0", lambda: enc.tokenizer.weights[0], lambda t: enc.tokenizer.weights.__setitem__(0, t)),
    ]
    for name, getter, setter in checks:

        def f(t, getter=getter, setter=setter):
            old = getter()
            setter(t)
            try:
                return (encoder_forward(Tensor(x), enc) ** 2).sum()
            finally:
                setter(old)

        report = grad_check(f, Tensor(getter().data.copy()), tol=1e-4)
        assert report.passed, f"{name}: {report.max_rel_error}"


def test_checkpoint_round_trip(tmp_path):
    enc = Encoder(small_cfg(layers=2), SeededRng(16))
    path = tmp_path / "ckpt.json"
    save_state(path, {"encoder": enc})
    clone = Encoder(small_cfg(layers=2), SeededRng(99))
    assert hash_state(clone) != hash_state(enc)
    load_state(path, {"encoder": clone})
    assert hash_state(clone) == hash_state(enc)


def test_embed_dim_must_divide_heads():
    with pytest.raises(ArgumentError):
        BackboneConfig(image_size=4, embed_dim=10, heads=4, conv_channels=(10,))
