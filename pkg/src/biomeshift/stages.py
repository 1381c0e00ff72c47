"""Segmentation head and the probe / fine-tune / LPFT training regimes."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import SENTINEL, Tensor
from .checkpoint import Checkpoint, checkpoint_from_modules, write_checkpoint
from .data import ImageSet
from .errors import DataError, ParameterError, ShapeError
from .mae import augment, normalize_channels
from .metrics import macro_accuracy, overall_accuracy
from .optim import FINETUNE_ADAMW, AdamWState, adamw_step
from .patching import PatchSpec, unpatchify
from .seeding import derive_rng
from .transformer import trunc_normal
from .vit import Module, ViTConfig, ViTEncoder

log = logging.getLogger(__name__)

REGIMES = ("probe", "finetune", "lpft")


class SegHead(Module):
    """Per-patch linear map ``d -> p*p*n_classes``."""

    def __init__(self, width: int, patch: int, n_classes: int, rng: np.random.Generator):
        self.width = width
        self.patch = patch
        self.n_classes = n_classes
        self.weight = Tensor(trunc_normal(rng, (width, patch * patch * n_classes)), requires_grad=True)
        self.bias = Tensor(np.zeros(patch * patch * n_classes), requires_grad=True)

    def named_parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]


def head_forward(encodings: Tensor, head: SegHead, spec: PatchSpec) -> Tensor:
    """Per-patch logits assembled into a full-resolution ``[..., H, W, n_classes]`` logit map."""
    if encodings.shape[-2:] != (spec.n_patches, head.width):
        raise ShapeError(f"encodings {encodings.shape} do not match {spec.n_patches} patches x width {head.width}")
    if spec.patch != head.patch:
        raise ShapeError(f"head patch size {head.patch} differs from spec patch size {spec.patch}")
    logits = ad.linear(encodings, head.weight, head.bias)
    return unpatchify(logits, spec.with_channels(head.n_classes))


@dataclass
class SegModel:
    encoder: ViTEncoder
    head: SegHead
    channel_mean: np.ndarray
    channel_std: np.ndarray

    @property
    def spec(self) -> PatchSpec:
        return self.encoder.spec

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return normalize_channels(images, self.channel_mean, self.channel_std)

    def logits(self, images: np.ndarray, normalized: bool = False) -> np.ndarray:
        x = images if normalized else self.normalize(images)
        with ad.no_grad():
            return head_forward(self.encoder(x), self.head, self.spec).data

    def iter_logits(self, images: np.ndarray, batch_size: int = 32):
        """Yield ``(start, logits)`` for consecutive batches in dataset order."""
        for start in range(0, len(images), batch_size):
            yield start, self.logits(images[start:start + batch_size])

    def predict(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        out = [lg.argmax(axis=-1).astype(np.uint8) for _, lg in self.iter_logits(images, batch_size)]
        return np.concatenate(out) if out else np.zeros(images.shape[:3], np.uint8)

    def checkpoint(self, metadata: Optional[dict] = None) -> Checkpoint:
        meta = {
            "vit": self.encoder.cfg.to_dict(),
            "head": {"n_classes": self.head.n_classes, "patch": self.head.patch},
            "channel_mean": [float(x) for x in self.channel_mean],
            "channel_std": [float(x) for x in self.channel_std],
        }
        meta.update(metadata or {})
        return checkpoint_from_modules({"encoder": self.encoder, "head": self.head}, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "SegModel":
        """Rebuild a model saved by :meth:`checkpoint` (every tensor must be present)."""
        meta = ckpt.metadata
        if "vit" not in meta or "head" not in meta:
            raise DataError("checkpoint metadata lacks the 'vit' or 'head' section of a segmentation model")
        cfg = ViTConfig.from_dict(meta["vit"])
        rng = np.random.default_rng(0)
        encoder = ViTEncoder(cfg, rng)
        head = SegHead(cfg.width, int(meta["head"]["patch"]), int(meta["head"]["n_classes"]), rng)
        for prefix, module in (("encoder.", encoder), ("head.", head)):
            arrays = {}
            for name in module.named_parameters():
                key = prefix + name
                if key not in ckpt.tensors:
                    raise DataError(f"checkpoint is missing tensor {key!r}")
                arrays[name] = ckpt.tensors[key]
            module.load_arrays(arrays)
        return cls(encoder, head, np.asarray(meta["channel_mean"], np.float64),
                   np.asarray(meta["channel_std"], np.float64))


@dataclass
class StagePlan:
    regime: str = "lpft"
    probe_epochs: int = 100
    finetune_epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    probe_lr: float = 0.0  # 0: same as lr
    beta1: float = FINETUNE_ADAMW["beta1"]
    beta2: float = FINETUNE_ADAMW["beta2"]
    eps: float = FINETUNE_ADAMW["eps"]
    weight_decay: float = FINETUNE_ADAMW["weight_decay"]
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ParameterError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.batch_size < 1 or self.lr < 0 or self.probe_lr < 0:
            raise ParameterError("batch_size must be >= 1 and learning rates >= 0")

    def stages(self) -> list:
        """``(name, epochs, freeze_encoder, lr)`` for each stage of the regime."""
        probe = ("probe", self.probe_epochs, True, self.probe_lr or self.lr)
        ft = ("finetune", self.finetune_epochs, False, self.lr)
        return {"probe": [probe], "finetune": [ft], "lpft": [probe, ft]}[self.regime]


@dataclass
class TrainReport:
    stage: str
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    val_macro_accuracy: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_accuracy: Optional[float] = None
    checkpoint_path: Optional[str] = None
    manifest: dict = field(default_factory=dict)
    error: Optional[str] = None
    best_state: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("best_state")
        return d


def check_split_hygiene(train: ImageSet, val: ImageSet) -> None:
    shared = set(train.source_tiles) & set(val.source_tiles)
    if shared:
        raise DataError(f"tiles shared between train and validation splits: {sorted(shared)[:5]}")


def evaluate_accuracy(model: SegModel, images: np.ndarray, labels: np.ndarray, batch_size: int = 32):
    pred = model.predict(images, batch_size)
    return overall_accuracy(pred, labels), macro_accuracy(pred, labels, model.head.n_classes)


def train_stage(model: SegModel, train: ImageSet, val: ImageSet, *, epochs: int, lr: float,
                freeze_encoder: bool, batch_size: int = 32, seed: int = 0, augment_data: bool = True,
                adamw: Optional[dict] = None, stage: str = "stage",
                checkpoint_path=None) -> TrainReport:
    """Train head (and encoder unless frozen) with per-epoch validation and best-epoch restore.

    On return the model holds the parameters of the epoch with the highest
    validation overall accuracy (earliest epoch on ties).
    """
    if len(train) == 0 or len(val) == 0:
        raise DataError("train and validation splits must be non-empty")
    check_split_hygiene(train, val)
    hyper = dict(FINETUNE_ADAMW, **(adamw or {}))
    report = TrainReport(stage=stage, manifest={
        "stage": stage, "epochs": epochs, "lr": lr, "batch_size": batch_size, "seed": seed,
        "freeze_encoder": freeze_encoder, "augment": augment_data, "adamw": hyper,
        "lr_schedule": "constant", "final_norm": model.encoder.cfg.final_norm,
        "initial_encoder_hash": model.encoder.param_hash(), "initial_head_hash": model.head.param_hash(),
        "n_train": len(train), "n_val": len(val),
    })
    if epochs <= 0:
        report.error = "no epochs requested"
        return report

    x_train = model.normalize(train.images)
    y_train = train.labels
    x_val = model.normalize(val.images)
    params = {f"head.{k}": v for k, v in model.head.named_parameters().items()}
    if not freeze_encoder:
        params.update({f"encoder.{k}": v for k, v in model.encoder.named_parameters().items()})
    state = AdamWState(**hyper)
    order_rng = derive_rng(seed, f"{stage}/order")
    aug_rng = derive_rng(seed, f"{stage}/augment")
    n = len(x_train)
    best = -math.inf
    for epoch in range(epochs):
        order = order_rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x_train[idx], y_train[idx]
            if augment_data:
                pairs = [augment(im, lb, aug_rng) for im, lb in zip(xb, yb)]
                xb = np.stack([p[0] for p in pairs])
                yb = np.stack([p[1] for p in pairs])
            if not (yb != SENTINEL).any():
                continue
            for p in params.values():
                p.grad = None
            if freeze_encoder:
                with ad.no_grad():
                    enc = Tensor(model.encoder(xb).data)
            else:
                enc = model.encoder(xb)
            logits = head_forward(enc, model.head, model.spec)
            loss = ad.cross_entropy_masked(logits.reshape(-1, model.head.n_classes), yb.reshape(-1))
            ad.backward(loss)
            adamw_step(params, None, state, lr)
            losses.append(loss.item())
        acc, macro = _eval_normalized(model, x_val, val.labels, batch_size)
        report.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        report.val_accuracy.append(acc)
        report.val_macro_accuracy.append(macro)
        if acc > best:
            best = acc
            report.best_epoch = epoch
            report.best_val_accuracy = acc
            report.best_state = {
                "encoder": None if freeze_encoder else model.encoder.state_arrays(),
                "head": model.head.state_arrays(),
            }
        log.debug("%s epoch %d loss %.4f val %.4f", stage, epoch, report.train_loss[-1], acc)

    if report.best_state.get("encoder") is not None:
        model.encoder.load_arrays(report.best_state["encoder"])
    model.head.load_arrays(report.best_state["head"])
    report.manifest["final_encoder_hash"] = model.encoder.param_hash()
    report.manifest["final_head_hash"] = model.head.param_hash()
    if checkpoint_path is not None:
        Path(checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
        write_checkpoint(model.checkpoint({"stage": stage, "best_epoch": report.best_epoch,
                                           "best_val_accuracy": report.best_val_accuracy}), checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    return report


def _eval_normalized(model: SegModel, x: np.ndarray, labels: np.ndarray, batch_size: int):
    preds = []
    for start in range(0, len(x), batch_size):
        preds.append(model.logits(x[start:start + batch_size], normalized=True).argmax(axis=-1))
    pred = np.concatenate(preds)
    return overall_accuracy(pred, labels), macro_accuracy(pred, labels, model.head.n_classes)


def new_head(encoder: ViTEncoder, n_classes: int, seed: int) -> SegHead:
    return SegHead(encoder.cfg.width, encoder.cfg.patch, n_classes, derive_rng(seed, "head/init"))


def run_plan(plan: StagePlan, encoder: ViTEncoder, train: ImageSet, val: ImageSet,
             channel_mean, channel_std, out_dir=None):
    """Run every stage of ``plan``; returns ``(model, reports)``.

    A fresh optimizer state is used at each stage boundary. In LPFT the second
    stage starts from the first stage's best head.
    """
    head = new_head(encoder, train.n_classes, plan.seed)
    model = SegModel(encoder, head, np.asarray(channel_mean), np.asarray(channel_std))
    hyper = dict(beta1=plan.beta1, beta2=plan.beta2, eps=plan.eps, weight_decay=plan.weight_decay)
    reports = []
    for name, epochs, frozen, lr in plan.stages():
        ckpt = Path(out_dir) / f"{name}_best.svck" if out_dir else None
        rep = train_stage(model, train, val, epochs=epochs, lr=lr, freeze_encoder=frozen,
                          batch_size=plan.batch_size, seed=plan.seed, augment_data=plan.augment,
                          adamw=hyper, stage=name, checkpoint_path=ckpt)
        rep.manifest["regime"] = plan.regime
        reports.append(rep)
        if rep.error:
            break
    return model, reports


def run_lpft(encoder: ViTEncoder, train: ImageSet, val: ImageSet, plan: StagePlan,
             channel_mean, channel_std, out_dir=None):
    if plan.regime != "lpft":
        raise ParameterError(f"run_lpft needs an lpft plan, got {plan.regime!r}")
    model, reports = run_plan(plan, encoder, train, val, channel_mean, channel_std, out_dir)
    return model, tuple(reports)
