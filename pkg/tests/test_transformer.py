import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biomeshift import autodiff as ad
from biomeshift.autodiff import Tensor
from biomeshift.errors import ConfigError, ShapeError
from biomeshift.transformer import BlockParams, EncoderConfig, encoder_forward, ffn, mhsa
from biomeshift.vit import ViTConfig, ViTEncoder

from oracles import module_grad_error


def _block(width=8, heads=2, ffn_mult=4, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    p = BlockParams.init(EncoderConfig(depth=1, width=width, heads=heads, ffn_mult=ffn_mult), rng)
    for t in p.named().values():
        # larger-than-init weights so attention is far from uniform
        t.data = (t.data * 0 + rng.standard_normal(t.shape) * scale).astype(t.data.dtype)
    return p


def _set_zero(p):
    for t in p.named().values():
        t.data = np.zeros_like(t.data)


def test_attention_rows_sum_to_one(rng):
    x = Tensor(rng.standard_normal((2, 7, 8)))
    _, attn = mhsa(x, _block(), heads=2, return_attention=True)
    assert attn.shape == (2, 2, 7, 7)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)


def test_uniform_attention_closed_form(rng, f64):
    d = 6
    p = _block(width=d, heads=3)
    _set_zero(p)
    p.norm1_weight.data[:] = 1.0
    p.v_weight.data = np.eye(d)
    p.proj_weight.data = np.eye(d)
    x = rng.standard_normal((5, d))
    out = mhsa(Tensor(x), p, heads=3).data
    ln = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-6)
    np.testing.assert_allclose(out, x + ln.mean(axis=0, keepdims=True), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.sampled_from([(4, 1), (8, 2), (12, 3)]), st.integers(1, 6))
def test_block_preserves_shape(batch, dims, seq):
    width, heads = dims
    p = _block(width, heads, scale=0.1)
    x = Tensor(np.random.default_rng(seq).standard_normal((batch, seq, width)))
    assert encoder_forward(x, [p, p], heads).shape == (batch, seq, width)


def test_ffn_is_positionwise(rng):
    p = _block()
    x = rng.standard_normal((6, 8))
    perm = rng.permutation(6)
    np.testing.assert_allclose(ffn(Tensor(x[perm]), p).data, ffn(Tensor(x), p).data[perm], rtol=1e-5, atol=1e-6)


def test_zero_weights_give_residual(rng):
    p = _block()
    _set_zero(p)
    x = rng.standard_normal((4, 8)).astype(np.float32)
    np.testing.assert_array_equal(ffn(Tensor(x), p).data, x)
    np.testing.assert_array_equal(mhsa(Tensor(x), p, 2).data, x)


def test_ffn_hand_computed(f64):
    p = _block(width=2, heads=1, ffn_mult=2)
    p.norm2_weight.data = np.array([1.0, 2.0])
    p.norm2_bias.data = np.array([0.0, 0.5])
    p.fc1_weight.data = np.array([[1.0, -1.0, 0.5, 0.0], [0.0, 1.0, 0.5, 2.0]])
    p.fc1_bias.data = np.array([0.1, 0.0, -0.2, 0.0])
    p.fc2_weight.data = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5]])
    p.fc2_bias.data = np.array([0.0, -0.1])
    # x = [3, 1]: mean 2, var 1, LN = [1, -1] (eps 1e-6 shifts the 7th digit)
    s = 1.0 / math.sqrt(1.0 + 1e-6)
    h = [1.0 * s, 2.0 * -s + 0.5]
    pre = [h[0] + 0.1, -h[0] + h[1], 0.5 * h[0] + 0.5 * h[1] - 0.2, 2.0 * h[1]]

    def g(v):
        return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))

    a = [g(v) for v in pre]
    expected = [3.0 + a[0] + a[2] - a[3], 1.0 + a[1] + a[2] + 0.5 * a[3] - 0.1]
    np.testing.assert_allclose(ffn(Tensor([[3.0, 1.0]]), p).data[0], expected, atol=1e-5)


def test_depth_zero_is_identity(rng):
    x = rng.standard_normal((3, 8)).astype(np.float32)
    np.testing.assert_array_equal(encoder_forward(Tensor(x), [], 2).data, x)


def test_encoder_permutation_equivariant_without_positions(rng, f64):
    blocks = [_block(seed=1, scale=0.3), _block(seed=2, scale=0.3)]
    x = rng.standard_normal((9, 8))
    perm = rng.permutation(9)
    out = encoder_forward(Tensor(x), blocks, 2).data
    np.testing.assert_allclose(encoder_forward(Tensor(x[perm]), blocks, 2).data, out[perm], atol=1e-12)


def test_config_errors():
    with pytest.raises(ConfigError):
        EncoderConfig(depth=1, width=10, heads=3)
    with pytest.raises(ShapeError):
        mhsa(Tensor(np.ones((2, 4))), _block(width=8), heads=2)


def test_block_gradient_width8(f64):
    p = _block(scale=0.5)
    x = Tensor(np.random.default_rng(5).standard_normal((2, 5, 8)), requires_grad=True)
    w = np.random.default_rng(6).standard_normal((2, 5, 8))
    params = dict(p.named(), x=x)
    err, name = module_grad_error(params, lambda: (ad.gelu(encoder_forward(x, [p], 2)) * Tensor(w)).sum())
    assert err < 1e-4, name


def test_encoder_gradient_depth2_width8(f64):
    cfg = ViTConfig(image_size=8, patch=4, channels=2, depth=2, width=8, heads=2)
    enc = ViTEncoder(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for t in enc.parameters():
        t.data = t.data + rng.standard_normal(t.shape) * 0.3
    images = rng.standard_normal((2, 8, 8, 2))
    w = rng.standard_normal((2, 4, 8))
    err, name = module_grad_error(enc.named_parameters(), lambda: (enc(images) * Tensor(w)).sum())
    assert err < 1e-4, name


def test_vit_base_shapes():
    cfg = ViTConfig.base()
    assert (cfg.depth, cfg.width, cfg.heads, cfg.ffn_mult * cfg.width) == (12, 768, 12, 3072)
    assert cfg.patch_spec.n_patches == 1024
    assert cfg.patch_spec.patch_dim == 960


def test_visible_subset_matches_gather(rng):
    cfg = ViTConfig(image_size=8, patch=4, channels=2, depth=1, width=8, heads=2)
    enc = ViTEncoder(cfg, rng)
    img = rng.standard_normal((1, 8, 8, 2))
    vis = np.array([[0, 3]])
    assert enc(img, vis).shape == (1, 2, 8)
