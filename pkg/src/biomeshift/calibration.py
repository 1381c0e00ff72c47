"""Max-probability confidence, temperature sweeps, Pearson correlation and the transfer grid."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SENTINEL
from .data import ImageSet
from .errors import DataError, NoLabeledPixelsError, ShapeError, UndefinedCorrelationError
from .metrics import overall_accuracy

DEFAULT_TEMPERATURES = (0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0)


def _labeled_logits(logits_map: np.ndarray, label_map: np.ndarray) -> np.ndarray:
    logits_map = np.asarray(logits_map)
    label_map = np.asarray(label_map)
    if logits_map.shape[:-1] != label_map.shape:
        raise ShapeError(f"logit map {logits_map.shape} does not match label map {label_map.shape}")
    valid = label_map != SENTINEL
    if not valid.any():
        raise NoLabeledPixelsError()
    return logits_map[valid]


def _max_prob_sum(rows: np.ndarray, temperature: float) -> float:
    with ad.no_grad():
        p = ad.softmax_t(rows, axis=-1, temperature=temperature).data
    return float(p.max(axis=-1).astype(np.float64).sum())


def confidence_summary(logits_map, label_map, temperature: float = 1.0) -> float:
    """Mean over labeled pixels of the max softmax probability at ``temperature``."""
    rows = _labeled_logits(logits_map, label_map)
    return _max_prob_sum(rows, temperature) / len(rows)


@dataclass
class SweepResult:
    temperatures: tuple
    confidence: list
    accuracy: float
    labeled: int


def temperature_sweep(logits_map, label_map, temperatures: Sequence[float] = DEFAULT_TEMPERATURES) -> SweepResult:
    """Confidence at every temperature; accuracy comes from the (temperature-free) argmax."""
    rows = _labeled_logits(logits_map, label_map)
    conf = [confidence_summary(logits_map, label_map, t) for t in temperatures]
    pred = np.asarray(logits_map).argmax(axis=-1)
    return SweepResult(tuple(temperatures), conf, overall_accuracy(pred, label_map), len(rows))


def pearson_r(x, y) -> float:
    """Product-moment correlation of two equal-length vectors (float64)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or len(x) < 2:
        raise ShapeError(f"pearson_r needs equal lengths >= 2, got {len(x)} and {len(y)}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


@dataclass
class CellResult:
    correct: int
    labeled: int
    confidence_sums: list  # one per temperature, float64 sums of max-probabilities

    @property
    def accuracy(self) -> float:
        return self.correct / self.labeled

    def mean_confidence(self) -> list:
        return [s / self.labeled for s in self.confidence_sums]


def evaluate_cell(model, images: ImageSet, temperatures: Sequence[float] = DEFAULT_TEMPERATURES,
                  batch_size: int = 32) -> CellResult:
    """Stream a model over an image set, accumulating accuracy and confidence sums in batch order."""
    correct = 0
    labeled = 0
    sums = [0.0] * len(temperatures)
    for start, logits in model.iter_logits(images.images, batch_size):
        labels = images.labels[start:start + len(logits)]
        valid = labels != SENTINEL
        if not valid.any():
            continue
        rows = logits[valid]
        correct += int((rows.argmax(axis=-1) == labels[valid]).sum())
        labeled += int(valid.sum())
        for i, t in enumerate(temperatures):
            sums[i] += _max_prob_sum(rows, t)
    if labeled == 0:
        raise NoLabeledPixelsError(f"no labeled pixels in biome {images.biome_id!r}")
    return CellResult(correct, labeled, sums)


@dataclass
class TransferGrid:
    """Source (rows) x target (columns) transfer results."""

    biomes: list
    temperatures: tuple
    accuracy: np.ndarray  # [K, K]
    confidence: np.ndarray  # [K, K, T]
    labeled: np.ndarray  # [K, K]
    correct: np.ndarray  # [K, K]
    label: str = ""

    @property
    def k(self) -> int:
        return len(self.biomes)

    def ood_mask(self) -> np.ndarray:
        return ~np.eye(self.k, dtype=bool)

    def mean_ood_accuracy(self) -> float:
        return float(self.accuracy[self.ood_mask()].mean())

    def mean_id_accuracy(self) -> float:
        return float(np.diag(self.accuracy).mean())


def run_transfer_grid(models: Mapping[str, object], validation: Mapping[str, ImageSet],
                      full: Mapping[str, ImageSet], temperatures: Sequence[float] = DEFAULT_TEMPERATURES,
                      batch_size: int = 32, label: str = "") -> TransferGrid:
    """Evaluate every source model on every target biome.

    Diagonal cells use the source's validation split; off-diagonal cells use
    every image of the target biome.
    """
    biomes = list(full)
    for b in biomes:
        if b not in models:
            raise DataError(f"no trained model for biome {b!r}")
        if b not in validation:
            raise DataError(f"no validation split for biome {b!r}")
    k, nt = len(biomes), len(temperatures)
    acc = np.zeros((k, k))
    conf = np.zeros((k, k, nt))
    labeled = np.zeros((k, k), dtype=np.int64)
    correct = np.zeros((k, k), dtype=np.int64)
    for i, src in enumerate(biomes):
        for j, tgt in enumerate(biomes):
            data = validation[src] if i == j else full[tgt]
            cell = evaluate_cell(models[src], data, temperatures, batch_size)
            acc[i, j] = cell.accuracy
            conf[i, j] = cell.mean_confidence()
            labeled[i, j] = cell.labeled
            correct[i, j] = cell.correct
    return TransferGrid(biomes, tuple(temperatures), acc, conf, labeled, correct, label)


@dataclass
class CalibrationReport:
    temperatures: tuple
    pearson: list
    n_cells: int
    include_id: bool = False
    label: str = ""

    def best_temperature(self) -> float:
        return self.temperatures[int(np.nanargmax(self.pearson))]


def calibration_report(grid: TransferGrid, include_id: bool = False) -> CalibrationReport:
    """Pearson r between cell accuracy and mean confidence, per temperature, over OOD cells."""
    mask = np.ones((grid.k, grid.k), bool) if include_id else grid.ood_mask()
    acc = grid.accuracy[mask]
    rs = []
    for t in range(len(grid.temperatures)):
        try:
            rs.append(pearson_r(acc, grid.confidence[..., t][mask]))
        except UndefinedCorrelationError:
            rs.append(float("nan"))
    return CalibrationReport(grid.temperatures, rs, int(mask.sum()), include_id, grid.label)
