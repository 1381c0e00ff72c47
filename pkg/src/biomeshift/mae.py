"""Masked-autoencoder pretraining: decoder, reconstruction loss, augmentation, training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, checkpoint_from_modules, load_partial_checkpoint, write_checkpoint
from .errors import DataError, ParameterError, ShapeError
from .optim import PRETRAIN_ADAMW, AdamWState, LrSchedule, adamw_step, lr_at
from .patching import MaskPlan, PatchSpec, patchify, sample_mask
from .seeding import derive_rng
from .transformer import BlockParams, EncoderConfig, block_forward, trunc_normal
from .vit import Module, ViTConfig, ViTEncoder, pos_embed

log = logging.getLogger(__name__)


class MaeDecoder(Module):
    """Projection to decoder width, one shared mask embedding, transformer block(s), pixel head."""

    def __init__(self, vit: ViTConfig, width: int, heads: int, depth: int, rng: np.random.Generator):
        self.vit = vit
        self.width = width
        self.heads = heads
        spec = vit.patch_spec
        cfg = EncoderConfig(depth=depth, width=width, heads=heads, ffn_mult=vit.ffn_mult,
                            seq_len=spec.n_patches, bias=vit.bias)
        self.embed_weight = Tensor(trunc_normal(rng, (vit.width, width)), requires_grad=True)
        self.embed_bias = Tensor(np.zeros(width), requires_grad=True)
        self.mask_token = Tensor(trunc_normal(rng, (width,)), requires_grad=True)
        self.blocks = [BlockParams.init(cfg, rng) for _ in range(depth)]
        self.pred_weight = Tensor(trunc_normal(rng, (width, spec.patch_dim)), requires_grad=True)
        self.pred_bias = Tensor(np.zeros(spec.patch_dim), requires_grad=True)

    def named_parameters(self) -> dict:
        out = {"embed.weight": self.embed_weight, "embed.bias": self.embed_bias, "mask_token": self.mask_token}
        for i, b in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in b.named().items()})
        out["pred.weight"] = self.pred_weight
        out["pred.bias"] = self.pred_bias
        return out

    def forward(self, encoded: Tensor, visible_idx: np.ndarray, masked_idx: np.ndarray,
                rows: Optional[np.ndarray] = None) -> Tensor:
        """Decode ``[B, m, d]`` visible encodings into patch predictions.

        Returns predictions for ``rows`` (``[B, r]`` indices into the full
        sequence), defaulting to every patch in order.
        """
        spec = self.vit.patch_spec
        b, m, _ = encoded.shape
        n_mask = masked_idx.shape[1]
        if m + n_mask != spec.n_patches:
            raise ShapeError(f"{m} visible + {n_mask} masked rows != {spec.n_patches} patches")
        y = ad.linear(encoded, self.embed_weight, self.embed_bias)
        fill = self.mask_token + Tensor(np.zeros((b, n_mask, self.width)))
        seq = ad.concat([y, fill], axis=1)
        restore = np.argsort(np.concatenate([visible_idx, masked_idx], axis=1), axis=1, kind="stable")
        seq = ad.take_rows(seq, restore) + Tensor(pos_embed(spec.grid_h, spec.grid_w, self.width))
        for params in self.blocks:
            seq = block_forward(seq, params, self.heads)
        if rows is not None:
            seq = ad.take_rows(seq, rows)
        return ad.linear(seq, self.pred_weight, self.pred_bias)


@dataclass
class PretrainConfig:
    epochs: int = 1
    batch_size: int = 16
    max_lr: float = 1.5e-4
    batch_repetition: int = 8
    mask_ratio: float = 0.75
    augment: bool = True
    warmup_fraction: float = 0.05
    max_steps: int = 0  # 0: run every epoch to completion
    seed: int = 0
    decoder_width: int = 512
    decoder_heads: int = 8
    decoder_depth: int = 1
    norm_pix_loss: bool = False
    beta1: float = PRETRAIN_ADAMW["beta1"]
    beta2: float = PRETRAIN_ADAMW["beta2"]
    eps: float = PRETRAIN_ADAMW["eps"]
    weight_decay: float = PRETRAIN_ADAMW["weight_decay"]
    checkpoint_every: int = 1  # epochs

    def __post_init__(self):
        if self.batch_repetition < 1:
            raise ParameterError("batch_repetition must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ParameterError("mask_ratio must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")


# ------------------------------------------------------------ data transforms

def dihedral(x: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Rotate the leading two axes by ``k`` quarter turns, then optionally mirror left-right."""
    out = np.rot90(x, k, axes=(0, 1))
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def inverse_dihedral(x: np.ndarray, k: int, flip: bool) -> np.ndarray:
    if flip:
        x = x[:, ::-1]
    return np.ascontiguousarray(np.rot90(x, -k, axes=(0, 1)))


def augment(image: np.ndarray, labels: Optional[np.ndarray], rng: np.random.Generator):
    """Apply one of the 8 dihedral transforms, drawn uniformly, to image and label map alike."""
    if image.shape[0] != image.shape[1]:
        raise ShapeError(f"augmentation needs a square image, got {image.shape[:2]}")
    t = int(rng.integers(8))
    k, flip = t % 4, bool(t // 4)
    out = dihedral(image, k, flip)
    return out, (None if labels is None else dihedral(labels, k, flip))


def channel_stats(images: np.ndarray):
    """Per-channel mean and population std over ``[..., C]`` pixels, in float64."""
    flat = np.asarray(images, dtype=np.float64).reshape(-1, images.shape[-1])
    if flat.shape[0] == 0:
        raise DataError("cannot compute channel statistics of an empty dataset")
    mean = flat.mean(axis=0)
    std = np.sqrt(((flat - mean) ** 2).mean(axis=0))
    return mean, std


def normalize_channels(image: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if (std <= 0).any():
        raise ParameterError("channel std must be positive")
    if mean.shape != (image.shape[-1],) or std.shape != mean.shape:
        raise ShapeError(f"stats of length {mean.shape} do not match {image.shape[-1]} channels")
    return ((np.asarray(image, dtype=np.float64) - mean) / std).astype(np.float32)


def safe_std(std, floor: float = 1e-6) -> np.ndarray:
    return np.maximum(np.asarray(std, dtype=np.float64), floor)


# ----------------------------------------------------------------------- loss

def _stack_plans(plans):
    vis = np.stack([p.visible_idx for p in plans])
    msk = np.stack([p.masked_idx for p in plans])
    return vis, msk


def _patch_targets(patches: np.ndarray, norm_pix: bool) -> np.ndarray:
    if not norm_pix:
        return patches
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mu) / np.sqrt(var + 1e-6)


def reconstruction_loss(pred: Tensor, patches: np.ndarray, plans, norm_pix: bool = False) -> Tensor:
    """MSE between full-sequence predictions ``[B, n, patch_dim]`` and patches, masked rows only."""
    if len(plans) != pred.shape[0]:
        raise ShapeError(f"{len(plans)} mask plans for {pred.shape[0]} images")
    sel = np.zeros(pred.shape[:2], dtype=bool)
    for i, p in enumerate(plans):
        sel[i, p.masked_idx] = True
    return ad.mse_selected(pred, _patch_targets(patches, norm_pix), sel)


def mae_loss(images: np.ndarray, encoder: ViTEncoder, decoder: MaeDecoder, plans,
             norm_pix: bool = False) -> Tensor:
    """Masked-patch reconstruction loss for a batch of normalized images ``[B, H, W, C]``."""
    images = np.asarray(images)
    if len(plans) != images.shape[0]:
        raise ShapeError(f"{len(plans)} mask plans for {images.shape[0]} images")
    patches = patchify(images, encoder.spec)
    vis, msk = _stack_plans(plans)
    encoded = encoder.forward_patches(patches, vis)
    pred = decoder.forward(encoded, vis, msk, rows=msk)
    target = np.take_along_axis(_patch_targets(patches, norm_pix), msk[..., None], axis=1)
    return ad.mse_selected(pred, target, np.ones(msk.shape, dtype=bool))


# ------------------------------------------------------------------- training

@dataclass
class PretrainResult:
    encoder: ViTEncoder
    decoder: MaeDecoder
    loss_trace: list
    steps: int
    channel_mean: np.ndarray
    channel_std: np.ndarray
    checkpoint_paths: list = field(default_factory=list)
    load_report: object = None

    def checkpoint(self, extra: Optional[dict] = None) -> Checkpoint:
        return make_checkpoint(self.encoder, self.decoder, self.channel_mean, self.channel_std,
                               self.steps, extra)


def make_checkpoint(encoder, decoder, mean, std, steps: int, extra: Optional[dict] = None) -> Checkpoint:
    from . import __version__

    meta = {
        "vit": encoder.cfg.to_dict(),
        "channel_mean": [float(x) for x in mean],
        "channel_std": [float(x) for x in std],
        "steps": int(steps),
        "creator": f"biomeshift {__version__}",
    }
    modules = {"encoder": encoder}
    if decoder is not None:
        meta["decoder"] = {"width": decoder.width, "heads": decoder.heads, "depth": len(decoder.blocks)}
        modules["decoder"] = decoder
    meta.update(extra or {})
    return checkpoint_from_modules(modules, meta)


def pretrain(images: np.ndarray, config: PretrainConfig, vit: ViTConfig, *,
             init: Optional[Checkpoint] = None, out_dir=None) -> PretrainResult:
    """MAE pretraining on raw images ``[N, H, W, C]``.

    Each loaded batch is reused for ``batch_repetition`` optimizer steps, each
    with fresh masks and augmentations. Channel statistics are computed once
    on ``images`` and stored in every checkpoint.
    """
    images = np.asarray(images)
    if images.ndim != 4 or len(images) == 0:
        raise DataError("pretraining needs a non-empty [N, H, W, C] image array")
    spec = vit.patch_spec
    if images.shape[1:] != (spec.image_h, spec.image_w, spec.channels):
        raise ShapeError(f"images {images.shape[1:]} do not match model input {spec}")

    encoder = ViTEncoder(vit, derive_rng(config.seed, "pretrain/encoder-init"))
    decoder = MaeDecoder(vit, config.decoder_width, config.decoder_heads, config.decoder_depth,
                         derive_rng(config.seed, "pretrain/decoder-init"))
    report = None
    if init is not None:
        report = load_partial_checkpoint(init, encoder, prefix="encoder.")
        log.info("initialized encoder from checkpoint: %d loaded, %d skipped",
                 len(report.loaded), len(report.skipped))

    mean, std = channel_stats(images)
    std = safe_std(std)
    data = normalize_channels(images, mean, std)
    n = len(data)
    n_batches = math.ceil(n / config.batch_size)
    total = config.epochs * n_batches * config.batch_repetition
    if config.max_steps:
        total = min(total, config.max_steps)
    schedule = LrSchedule.with_warmup_fraction(config.max_lr, total, config.warmup_fraction)
    state = AdamWState(beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                       weight_decay=config.weight_decay)
    params = {f"encoder.{k}": v for k, v in encoder.named_parameters().items()}
    params.update({f"decoder.{k}": v for k, v in decoder.named_parameters().items()})

    data_rng = derive_rng(config.seed, "pretrain/order")
    aug_rng = derive_rng(config.seed, "pretrain/augment")
    mask_rng = derive_rng(config.seed, "pretrain/mask")
    trace: list = []
    paths: list = []
    best = math.inf
    step = 0
    out = Path(out_dir) if out_dir else None
    for epoch in range(config.epochs):
        if step >= total:
            break
        order = data_rng.permutation(n)
        epoch_losses = []
        for bi in range(n_batches):
            batch = data[order[bi * config.batch_size:(bi + 1) * config.batch_size]]
            for _ in range(config.batch_repetition):
                if step >= total:
                    break
                if config.augment:
                    views = np.stack([augment(im, None, aug_rng)[0] for im in batch])
                else:
                    views = batch
                plans = [sample_mask(spec.n_patches, config.mask_ratio, mask_rng) for _ in range(len(views))]
                for p in params.values():
                    p.grad = None
                loss = mae_loss(views, encoder, decoder, plans, config.norm_pix_loss)
                ad.backward(loss)
                adamw_step(params, None, state, lr_at(schedule, step))
                step += 1
                trace.append(loss.item())
                epoch_losses.append(loss.item())
        if out is not None and epoch_losses and ((epoch + 1) % config.checkpoint_every == 0 or step >= total):
            out.mkdir(parents=True, exist_ok=True)
            ckpt = make_checkpoint(encoder, decoder, mean, std, step, {"pretrain": asdict(config)})
            latest = out / "pretrain_latest.svck"
            write_checkpoint(ckpt, latest)
            if latest not in paths:
                paths.append(latest)
            epoch_mean = float(np.mean(epoch_losses))
            if epoch_mean < best:
                best = epoch_mean
                best_path = out / "pretrain_best.svck"
                write_checkpoint(ckpt, best_path)
                if best_path not in paths:
                    paths.append(best_path)
        log.debug("epoch %d done at step %d", epoch, step)
    return PretrainResult(encoder, decoder, trace, step, mean, std, paths, report)
