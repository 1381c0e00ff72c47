"""Synthetic transfer experiments shared by the CLI and the acceptance suite.

Everything runs in memory from a :class:`ToyConfig` and one integer seed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from .calibration import DEFAULT_TEMPERATURES, TransferGrid, run_transfer_grid
from .checkpoint import load_partial_checkpoint
from .data import ImageSet, biome_family, generate_biome, make_splits, to_images
from .mae import PretrainConfig, PretrainResult, channel_stats, pretrain, safe_std
from .seeding import derive_rng
from .shift import ShiftReport, biome_stats, build_shift_report
from .stages import StagePlan, run_plan
from .vit import ViTConfig, ViTEncoder

log = logging.getLogger(__name__)

TRANSFER_REGIMES = ("lpft", "finetune", "scratch", "probe")


@dataclass
class ToyConfig:
    """Desk-scale defaults: 4 biomes of ten 64x64 tiles cut into 32x32 crops."""

    n_biomes: int = 4
    n_tiles: int = 10
    tile_size: int = 64
    crop: int = 32
    train_fraction: float = 0.8
    n_classes: int = 5
    channels: int = 4
    offset_step: float = 0.15
    tilt_step: float = 0.5
    noise_scale: float = 0.03
    smoothness: float = 4.0
    tile_mix: float = 0.75
    unlabeled_fraction: float = 0.05
    patch: int = 4
    depth: int = 2
    width: int = 64
    heads: int = 4
    pretrain_steps: int = 2000
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 16
    batch_repetition: int = 8
    decoder_width: int = 32
    decoder_heads: int = 4
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    probe_lr: float = 1e-2

    def vit(self) -> ViTConfig:
        return ViTConfig(image_size=self.crop, patch=self.patch, channels=self.channels, depth=self.depth,
                         width=self.width, heads=self.heads)

    def pretrain_config(self, seed: int) -> PretrainConfig:
        # epochs is only an upper bound here; max_steps decides the run length
        return PretrainConfig(epochs=10**6, batch_size=self.pretrain_batch, max_lr=self.pretrain_lr,
                              batch_repetition=self.batch_repetition, max_steps=self.pretrain_steps,
                              decoder_width=self.decoder_width, decoder_heads=self.decoder_heads, seed=seed)

    def stage_plan(self, regime: str, seed: int) -> StagePlan:
        return StagePlan(regime=regime, probe_epochs=self.epochs, finetune_epochs=self.epochs,
                         batch_size=self.batch_size, lr=self.lr, probe_lr=self.probe_lr, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BiomeSplit:
    train: ImageSet
    val: ImageSet
    full: ImageSet


def synth_family(cfg: ToyConfig, seed: int, n_biomes: Optional[int] = None, tilt_step: Optional[float] = None):
    params = biome_family(
        cfg.n_biomes if n_biomes is None else n_biomes, n_classes=cfg.n_classes, channels=cfg.channels,
        offset_step=cfg.offset_step, tilt_step=cfg.tilt_step if tilt_step is None else tilt_step,
        noise_scale=cfg.noise_scale, smoothness=cfg.smoothness, unlabeled_fraction=cfg.unlabeled_fraction,
        tile_mix=cfg.tile_mix, seed=seed)
    return {p.biome_id: generate_biome(p, cfg.n_tiles, cfg.tile_size) for p in params}


def split_biomes(datasets, crop: int, train_fraction: float, seed: int) -> dict:
    out = {}
    for bid, ds in datasets.items():
        tr, va = make_splits(ds, train_fraction, seed)
        out[bid] = BiomeSplit(to_images(tr, crop), to_images(va, crop), to_images(ds, crop))
    return out


def pretrain_pool(splits, cfg: ToyConfig, seed: int) -> PretrainResult:
    """MAE pretraining on the unlabeled images of every biome."""
    pool = np.concatenate([s.full.images for s in splits.values()])
    return pretrain(pool, cfg.pretrain_config(seed), cfg.vit())


def train_sources(regime: str, splits, cfg: ToyConfig, seed: int,
                  pretrained: Optional[PretrainResult] = None) -> dict:
    """One segmentation model per source biome.

    ``scratch`` is a fine-tune from random weights, normalized with the
    source's own training statistics; every other regime starts from
    ``pretrained``.
    """
    models = {}
    for bid, s in splits.items():
        enc = ViTEncoder(cfg.vit(), derive_rng(seed, "finetune/encoder-init"))
        if regime == "scratch":
            mean, std = channel_stats(s.train.images)
            std = safe_std(std)
            plan = cfg.stage_plan("finetune", seed)
        else:
            if pretrained is None:
                raise ValueError(f"regime {regime!r} needs a pretrained encoder")
            load_partial_checkpoint(pretrained.checkpoint(), enc)
            mean, std = pretrained.channel_mean, pretrained.channel_std
            plan = cfg.stage_plan(regime, seed)
        model, reports = run_plan(plan, enc, s.train, s.val, mean, std)
        log.info("%s/%s: best val acc %s", regime, bid, [r.best_val_accuracy for r in reports])
        models[bid] = model
    return models


def grid_for(models, splits, label: str, temperatures: Sequence[float] = DEFAULT_TEMPERATURES) -> TransferGrid:
    return run_transfer_grid(models, {b: s.val for b, s in splits.items()},
                             {b: s.full for b, s in splits.items()}, temperatures, label=label)


def transfer_experiment(cfg: ToyConfig, seed: int, regimes: Sequence[str] = TRANSFER_REGIMES) -> dict:
    """Transfer grid per regime on one synthetic biome family."""
    splits = split_biomes(synth_family(cfg, seed), cfg.crop, cfg.train_fraction, seed)
    pre = pretrain_pool(splits, cfg, seed) if any(r != "scratch" for r in regimes) else None
    return {r: grid_for(train_sources(r, splits, cfg, seed, pre), splits, r) for r in regimes}


@dataclass
class SweepOutcome:
    grid: TransferGrid
    shift: ShiftReport

    @property
    def spectral_rho(self) -> float:
        return self.shift.spearman[self.grid.label]["spectral_frechet"]


def offset_sweep(cfg: ToyConfig, seed: int, n_points: int = 5) -> SweepOutcome:
    """Biomes differing only by an increasing spectral offset, scored with pretrained LPFT models."""
    datasets = synth_family(cfg, seed, n_biomes=n_points, tilt_step=0.0)
    splits = split_biomes(datasets, cfg.crop, cfg.train_fraction, seed)
    pre = pretrain_pool(splits, cfg, seed)
    grid = grid_for(train_sources("lpft", splits, cfg, seed, pre), splits, "lpft")
    stats = {b: biome_stats(ds.images, ds.labels, ds.n_classes) for b, ds in datasets.items()}
    return SweepOutcome(grid, build_shift_report(stats, grid))
