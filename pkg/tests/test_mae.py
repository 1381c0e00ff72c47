import numpy as np
import pytest

from biomeshift import autodiff as ad
from biomeshift.autodiff import Tensor
from biomeshift.errors import ParameterError, ShapeError
from biomeshift.mae import (MaeDecoder, PretrainConfig, augment, channel_stats, dihedral, inverse_dihedral,
                            mae_loss, normalize_channels, pretrain, reconstruction_loss)
from biomeshift.patching import patchify, sample_mask
from biomeshift.vit import ViTConfig, ViTEncoder

from oracles import module_grad_error

TOY = ViTConfig(image_size=8, patch=4, channels=2, depth=1, width=8, heads=2)


def test_loss_ignores_visible_rows(rng):
    spec = TOY.patch_spec
    patches = patchify(rng.standard_normal((2, 8, 8, 2)).astype(np.float32), spec)
    plans = [sample_mask(spec.n_patches, 0.5, rng) for _ in range(2)]
    pred = rng.standard_normal(patches.shape) * 100
    for i, p in enumerate(plans):
        pred[i, p.masked_idx] = patches[i, p.masked_idx]
    assert reconstruction_loss(Tensor(pred), patches, plans).item() == 0.0


def test_v2_spec_row_counts(rng):
    vit = ViTConfig(image_size=256, patch=8, channels=15, depth=1, width=16, heads=2)
    enc = ViTEncoder(vit, rng)
    dec = MaeDecoder(vit, 8, 2, 1, rng)
    plan = sample_mask(vit.patch_spec.n_patches, 0.75, rng)
    image = rng.standard_normal((1, 256, 256, 15)).astype(np.float32)
    with ad.no_grad():
        encoded = enc(image, plan.visible_idx[None])
        full = dec.forward(encoded, plan.visible_idx[None], plan.masked_idx[None])
    assert encoded.shape == (1, 256, 16)
    assert full.shape == (1, 1024, 960)


def test_gradient_reaches_visible_path(rng):
    enc = ViTEncoder(TOY, rng)
    dec = MaeDecoder(TOY, 8, 2, 1, rng)
    plans = [sample_mask(4, 0.5, rng)]
    loss = mae_loss(rng.standard_normal((1, 8, 8, 2)), enc, dec, plans)
    ad.backward(loss)
    assert np.linalg.norm(enc.patch_weight.grad) > 0


def test_mae_loss_gradient_check(f64):
    rng = np.random.default_rng(0)
    enc = ViTEncoder(TOY, rng)
    dec = MaeDecoder(TOY, 8, 2, 1, rng)
    for t in enc.parameters() + dec.parameters():
        t.data = t.data + rng.standard_normal(t.shape) * 0.3
    images = rng.standard_normal((2, 8, 8, 2))
    plans = [sample_mask(4, 0.5, rng) for _ in range(2)]
    params = {f"e.{k}": v for k, v in enc.named_parameters().items()}
    params.update({f"d.{k}": v for k, v in dec.named_parameters().items()})
    err, name = module_grad_error(params, lambda: mae_loss(images, enc, dec, plans))
    assert err < 1e-4, name


def test_dihedral_group(rng):
    x = rng.standard_normal((5, 5, 2))
    np.testing.assert_array_equal(dihedral(x, 0, False), x)
    y = x
    for _ in range(4):
        y = dihedral(y, 1, False)
    np.testing.assert_array_equal(y, x)
    for k in range(4):
        for flip in (False, True):
            np.testing.assert_array_equal(inverse_dihedral(dihedral(x, k, flip), k, flip), x)


def test_augment_moves_image_and_labels_together():
    image = np.zeros((2, 2, 1))
    image[0, 0, 0] = 1.0
    labels = np.zeros((2, 2), np.uint8)
    labels[0, 0] = 7
    seen = set()
    rng = np.random.default_rng(0)
    for _ in range(200):
        im, lab = augment(image, labels, rng)
        r, c = np.argwhere(im[..., 0] == 1.0)[0]
        assert lab[r, c] == 7 and (lab == 7).sum() == 1
        seen.add(im.tobytes())
    assert len(seen) == 4  # the marker visits every corner
    with pytest.raises(ShapeError):
        augment(np.zeros((2, 3, 1)), None, rng)


def test_normalization(rng):
    x = rng.standard_normal((4, 3, 3, 2))
    np.testing.assert_allclose(normalize_channels(x, [0, 0], [1, 1]), x.astype(np.float32))
    const = np.full((2, 2, 1), 4.0)
    np.testing.assert_array_equal(normalize_channels(const, [4.0], [1.0]), 0.0)
    data = rng.normal(3.0, 2.0, (10, 4, 4, 3))
    mean, std = channel_stats(data)
    m2, s2 = channel_stats(normalize_channels(data, mean, std))
    np.testing.assert_allclose(m2, 0.0, atol=1e-5)
    np.testing.assert_allclose(s2, 1.0, atol=1e-5)
    with pytest.raises(ParameterError):
        normalize_channels(x, [0, 0], [1, 0])


def _tiny_pretrain(seed=0, **kw):
    images = np.random.default_rng(9).random((32, 8, 8, 2)).astype(np.float32)
    cfg = PretrainConfig(epochs=1, batch_size=16, batch_repetition=8, decoder_width=8, decoder_heads=2,
                         max_lr=1e-3, seed=seed, **kw)
    return pretrain(images, cfg, TOY)


def test_batch_repetition_step_count():
    res = _tiny_pretrain()
    assert res.steps == 2 * 8 == len(res.loss_trace)


def test_pretrain_deterministic():
    a, b = _tiny_pretrain(), _tiny_pretrain()
    assert a.loss_trace == b.loss_trace
    assert a.encoder.param_hash() == b.encoder.param_hash()
    assert _tiny_pretrain(seed=1).loss_trace != a.loss_trace


def test_pretrain_writes_checkpoints(tmp_path):
    images = np.random.default_rng(9).random((16, 8, 8, 2)).astype(np.float32)
    cfg = PretrainConfig(epochs=2, batch_size=16, batch_repetition=2, decoder_width=8, decoder_heads=2)
    res = pretrain(images, cfg, TOY, out_dir=tmp_path)
    names = sorted(p.name for p in res.checkpoint_paths)
    assert names == ["pretrain_best.svck", "pretrain_latest.svck"]


def test_pretrain_config_validation():
    with pytest.raises(ParameterError):
        PretrainConfig(batch_repetition=0)
    with pytest.raises(ParameterError):
        PretrainConfig(mask_ratio=1.0)
