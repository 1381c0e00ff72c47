"""Distribution-shift measures between biomes and their rank correlation with transfer accuracy.

Five measures: spectral cosine / Frechet, feature cosine / Frechet, and
composition cosine. Frechet similarity is ``1 / (1 + d_F)`` with ``d_F`` the
Gaussian Frechet distance between (mean, covariance) summaries.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import SENTINEL
from .errors import DataError, ShapeError, UndefinedCorrelationError
from .calibration import TransferGrid, pearson_r

log = logging.getLogger(__name__)

MEASURES = ("spectral_cosine", "spectral_frechet", "feature_cosine", "feature_frechet", "composition_cosine")


@dataclass
class BiomeStats:
    spectral_mean: np.ndarray
    spectral_cov: np.ndarray
    feature_mean: Optional[np.ndarray]
    feature_cov: Optional[np.ndarray]
    composition: np.ndarray
    n_pixels: int
    n_images: int
    diagonal_features: bool = False


def spectral_stats(images) -> tuple:
    """Two-pass mean and population covariance of every pixel's band vector, in raw units.

    Pixels are centred on the first pixel before accumulating (shifted-data
    algorithm), so constant data yields exactly its value and zero covariance.
    """
    images = np.asarray(images)
    if images.size == 0:
        raise DataError("spectral statistics need a non-empty dataset")
    c = images.shape[-1]
    shift = images.reshape(-1, c)[0].astype(np.float64)
    n = 0
    total = np.zeros(c)
    for im in images:
        px = im.reshape(-1, c).astype(np.float64) - shift
        total += px.sum(axis=0)
        n += len(px)
    offset = total / n
    mean = shift + offset
    cov = np.zeros((c, c))
    for im in images:
        d = im.reshape(-1, c).astype(np.float64) - shift - offset
        cov += d.T @ d
    return mean, cov / n


def _mean_cov(rows: np.ndarray, diagonal: bool = False):
    mean = rows.mean(axis=0)
    d = rows - mean
    if diagonal:
        return mean, np.diag((d * d).mean(axis=0))
    return mean, d.T @ d / len(rows)


def image_embeddings(images, model_encoder, channel_mean, channel_std, batch_size: int = 32) -> np.ndarray:
    """Mean-pooled encoder outputs, one ``d``-vector per image (no masking)."""
    from .mae import normalize_channels

    images = np.asarray(images)
    if images.shape[-1] != model_encoder.cfg.channels:
        raise ShapeError(f"dataset has {images.shape[-1]} channels, encoder expects {model_encoder.cfg.channels}")
    out = []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            x = normalize_channels(images[start:start + batch_size], channel_mean, channel_std)
            out.append(model_encoder(x).data.astype(np.float64).mean(axis=-2))
    return np.concatenate(out)


def feature_stats(images, encoder, channel_mean, channel_std, diagonal: bool = False, batch_size: int = 32):
    emb = image_embeddings(images, encoder, channel_mean, channel_std, batch_size)
    if len(emb) == 0:
        raise DataError("feature statistics need a non-empty dataset")
    return _mean_cov(emb, diagonal)


def composition_vector(labels, n_classes: int) -> np.ndarray:
    """Class fractions over labeled pixels."""
    lab = np.asarray(labels).ravel()
    lab = lab[lab != SENTINEL]
    if lab.size == 0:
        raise DataError("composition needs at least one labeled pixel")
    if lab.max() >= n_classes:
        raise DataError(f"label {lab.max()} outside [0, {n_classes})")
    counts = np.bincount(lab.astype(np.int64), minlength=n_classes).astype(np.float64)
    return counts / counts.sum()


def biome_stats(images, labels, n_classes: int, encoder=None, channel_mean=None, channel_std=None,
                diagonal_features: bool = False) -> BiomeStats:
    s_mean, s_cov = spectral_stats(images)
    f_mean = f_cov = None
    if encoder is not None:
        f_mean, f_cov = feature_stats(images, encoder, channel_mean, channel_std, diagonal_features)
    npx = int(np.prod(np.asarray(images).shape[:-1]))
    return BiomeStats(s_mean, s_cov, f_mean, f_cov, composition_vector(labels, n_classes), npx,
                      len(images), diagonal_features)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DataError("cosine similarity is undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _psd_sqrt(m: np.ndarray, tol: float, what: str) -> np.ndarray:
    w, q = np.linalg.eigh(m)
    if w.min(initial=0.0) < -tol * max(1.0, abs(w).max(initial=0.0)):
        log.warning("%s has eigenvalue %.3g below -tol; clamped to 0", what, w.min())
    w = np.clip(w, 0.0, None)
    return (q * np.sqrt(w)) @ q.T


def _check_cov(s: np.ndarray, dim: int, tol: float, what: str) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (dim, dim):
        raise ShapeError(f"{what} has shape {s.shape}, expected {(dim, dim)}")
    if not np.isfinite(s).all():
        raise DataError(f"{what} contains NaN or inf")
    if np.abs(s - s.T).max(initial=0.0) > tol * max(1.0, np.abs(s).max(initial=0.0)):
        raise DataError(f"{what} is not symmetric within tolerance {tol}")
    return (s + s.T) / 2.0


def frechet_distance(mu1, s1, mu2, s2, diagonal: bool = False, tol: float = 1e-6) -> float:
    """Frechet distance between Gaussians ``N(mu1, s1)`` and ``N(mu2, s2)``.

    Matrix square roots use a symmetric eigendecomposition with negative
    eigenvalues clamped to zero. ``diagonal=True`` uses only the diagonals.
    """
    mu1 = np.asarray(mu1, dtype=np.float64).ravel()
    mu2 = np.asarray(mu2, dtype=np.float64).ravel()
    if mu1.shape != mu2.shape:
        raise ShapeError(f"mean vectors differ in length: {mu1.shape} vs {mu2.shape}")
    if not (np.isfinite(mu1).all() and np.isfinite(mu2).all()):
        raise DataError("mean vectors contain NaN or inf")
    dim = len(mu1)
    s1 = _check_cov(s1, dim, tol, "first covariance")
    s2 = _check_cov(s2, dim, tol, "second covariance")
    if np.array_equal(mu1, mu2) and np.array_equal(s1, s2):
        return 0.0
    diff = mu1 - mu2
    if diagonal:
        v1 = np.clip(np.diag(s1), 0.0, None)
        v2 = np.clip(np.diag(s2), 0.0, None)
        trace_term = float(((np.sqrt(v1) - np.sqrt(v2)) ** 2).sum())
    else:
        # tr sqrt(R1 S2 R1) equals the nuclear norm of R1 R2 (R = PSD square root); the
        # singular values of R1 R2 and of its transpose R2 R1 agree, so the result is
        # symmetric in its arguments to rounding level even for rank-deficient inputs
        r1 = _psd_sqrt(s1, tol, "first covariance")
        r2 = _psd_sqrt(s2, tol, "second covariance")
        cross = float(np.linalg.svd(r1 @ r2, compute_uv=False).sum())
        trace_term = float(np.trace(s1) + np.trace(s2) - 2.0 * cross)
    d2 = float(diff @ diff) + trace_term
    return float(np.sqrt(max(d2, 0.0)))


def frechet_similarity(*args, **kwargs) -> float:
    return 1.0 / (1.0 + frechet_distance(*args, **kwargs))


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of the positions they span."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or len(x) < 2:
        raise ShapeError(f"spearman_rho needs equal lengths >= 2, got {len(x)} and {len(y)}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("rank correlation is undefined for a constant vector")
    return pearson_r(average_ranks(x), average_ranks(y))


def similarity_matrices(stats: Mapping[str, BiomeStats], diagonal_features: bool = False) -> dict:
    """All five ``K x K`` similarity matrices (feature measures only when feature stats exist)."""
    names = list(stats)
    k = len(names)
    have_features = all(s.feature_mean is not None for s in stats.values())
    out = {}
    for measure in MEASURES:
        if measure.startswith("feature") and not have_features:
            continue
        m = np.zeros((k, k))
        for i, a in enumerate(names):
            for j, b in enumerate(names):
                if j < i:
                    m[i, j] = m[j, i]
                    continue
                sa, sb = stats[a], stats[b]
                if measure == "spectral_cosine":
                    m[i, j] = cosine_similarity(sa.spectral_mean, sb.spectral_mean)
                elif measure == "spectral_frechet":
                    m[i, j] = frechet_similarity(sa.spectral_mean, sa.spectral_cov, sb.spectral_mean, sb.spectral_cov)
                elif measure == "feature_cosine":
                    m[i, j] = cosine_similarity(sa.feature_mean, sb.feature_mean)
                elif measure == "feature_frechet":
                    m[i, j] = frechet_similarity(sa.feature_mean, sa.feature_cov, sb.feature_mean, sb.feature_cov,
                                                 diagonal=diagonal_features)
                else:
                    m[i, j] = cosine_similarity(sa.composition, sb.composition)
        out[measure] = m
    return out


@dataclass
class ShiftReport:
    biomes: list
    similarity: dict  # measure -> K x K
    spearman: dict = field(default_factory=dict)  # label -> measure -> pooled rho over OOD cells
    per_source: dict = field(default_factory=dict)  # label -> measure -> [rho per source biome]
    notes: list = field(default_factory=list)


def _safe_rho(x, y) -> float:
    try:
        return spearman_rho(x, y)
    except UndefinedCorrelationError:
        return float("nan")


def build_shift_report(stats: Mapping[str, BiomeStats], grids, diagonal_features: bool = False) -> ShiftReport:
    """Similarity matrices plus Spearman rho of similarity vs OOD accuracy, per grid (model)."""
    if isinstance(grids, TransferGrid):
        grids = [grids]
    biomes = list(grids[0].biomes)
    missing = [b for b in biomes if b not in stats]
    if missing:
        raise DataError(f"no shift statistics for biomes {missing}")
    ordered = {b: stats[b] for b in biomes}
    sims = similarity_matrices(ordered, diagonal_features)
    report = ShiftReport(biomes, sims, notes=[
        "Frechet similarity = 1/(1+d_F), d_F from Gaussian (mean, covariance) summaries",
        f"feature covariance: {'diagonal' if diagonal_features else 'full'}",
    ])
    for g in grids:
        if list(g.biomes) != biomes:
            raise DataError("all grids must share the same biome order")
        ood = g.ood_mask()
        report.spearman[g.label] = {m: _safe_rho(s[ood], g.accuracy[ood]) for m, s in sims.items()}
        per = {}
        for m, s in sims.items():
            per[m] = [_safe_rho(np.delete(s[i], i), np.delete(g.accuracy[i], i)) for i in range(len(biomes))]
        report.per_source[g.label] = per
    return report
