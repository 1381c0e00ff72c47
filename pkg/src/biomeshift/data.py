"""Labeled tile datasets, tile cropping and splitting, the SVDS container, and synthetic biomes.

Labels are unsigned bytes; ``255`` marks an unlabeled pixel.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import norm

from .autodiff import SENTINEL
from .errors import DataError, IntegrityError, MagicError, ParameterError, TruncationError, VersionError

DATASET_MAGIC = b"SVDS"
DATASET_VERSION = 1


@dataclass
class TileDataset:
    biome_id: str
    tile_ids: list
    images: np.ndarray  # [N, H, W, C] float32
    labels: np.ndarray  # [N, H, W] uint8
    n_classes: int
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 4 or self.labels.shape != self.images.shape[:3]:
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} are inconsistent")
        if len(self.tile_ids) != len(self.images):
            raise DataError(f"{len(self.tile_ids)} tile ids for {len(self.images)} tiles")
        if len(set(self.tile_ids)) != len(self.tile_ids):
            raise DataError("tile ids must be unique")
        bad = (self.labels >= self.n_classes) & (self.labels != SENTINEL)
        if bad.any():
            raise DataError(f"labels outside [0, {self.n_classes}) and not the sentinel")
        if not self.class_names:
            self.class_names = [f"class{i}" for i in range(self.n_classes)]

    def __len__(self):
        return len(self.tile_ids)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    def subset(self, indices: Sequence[int]) -> "TileDataset":
        idx = list(indices)
        return replace(self, tile_ids=[self.tile_ids[i] for i in idx],
                       images=self.images[idx], labels=self.labels[idx])

    def equals(self, other: "TileDataset") -> bool:
        return (self.biome_id == other.biome_id and self.tile_ids == other.tile_ids
                and self.n_classes == other.n_classes and self.class_names == other.class_names
                and self.images.tobytes() == other.images.tobytes()
                and self.labels.tobytes() == other.labels.tobytes())


@dataclass
class ImageSet:
    """Model-sized crops; ``source_tiles[i]`` is the tile crop ``i`` was cut from."""

    biome_id: str
    images: np.ndarray
    labels: np.ndarray
    source_tiles: list
    n_classes: int

    def __len__(self):
        return len(self.images)

    def labeled_pixels(self) -> int:
        return int((self.labels != SENTINEL).sum())


def crop_offsets(extent: int, crop: int) -> list:
    return sorted({0, extent - crop})


def split_tile(image: np.ndarray, labels: np.ndarray, crop: int) -> list:
    """Cut a tile into corner crops at offsets ``{0, H-c} x {0, W-c}`` (row-major order).

    Adjacent crops overlap by ``2c - H`` pixels when ``H < 2c``.
    """
    h, w = labels.shape
    if h < crop or w < crop:
        raise ParameterError(f"tile {h}x{w} is smaller than crop size {crop}")
    out = []
    for r in crop_offsets(h, crop):
        for c in crop_offsets(w, crop):
            out.append((image[r:r + crop, c:c + crop], labels[r:r + crop, c:c + crop]))
    return out


def to_images(dataset: TileDataset, crop: int) -> ImageSet:
    imgs, labs, src = [], [], []
    for tid, image, labels in zip(dataset.tile_ids, dataset.images, dataset.labels):
        for im, lb in split_tile(image, labels, crop):
            imgs.append(im)
            labs.append(lb)
            src.append(tid)
    return ImageSet(dataset.biome_id, np.stack(imgs), np.stack(labs), src, dataset.n_classes)


def make_splits(dataset: TileDataset, train_fraction: float = 0.8, seed: int = 0):
    """Partition tiles (never crops) into train / validation sets."""
    n = len(dataset)
    if n < 2:
        raise DataError(f"need at least 2 tiles to split, got {n}")
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = sorted(perm[:n_train].tolist())
    val_idx = sorted(perm[n_train:].tolist())
    return dataset.subset(train_idx), dataset.subset(val_idx)


# ------------------------------------------------------------------ container

def write_dataset(dataset: TileDataset, path) -> None:
    meta = {
        "biome_id": dataset.biome_id,
        "n_tiles": len(dataset),
        "height": dataset.height,
        "width": dataset.width,
        "channels": dataset.channels,
        "n_classes": dataset.n_classes,
        "class_names": list(dataset.class_names),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for tid, image, labels in zip(dataset.tile_ids, dataset.images, dataset.labels):
            name = tid.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(image.astype("<f4").tobytes())
            f.write(labels.astype(np.uint8).tobytes())


def _read_exact(buf: io.BufferedIOBase, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise TruncationError(f"truncated container while reading {what}: wanted {n} bytes, got {len(data)}")
    return data


def read_dataset(path) -> TileDataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise MagicError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != DATASET_VERSION:
            raise VersionError(f"{path}: unsupported dataset version {version}")
        (meta_len,) = struct.unpack("<Q", _read_exact(f, 8, "metadata length"))
        try:
            meta = json.loads(_read_exact(f, meta_len, "metadata").decode("utf-8"))
            h, w, c = int(meta["height"]), int(meta["width"]), int(meta["channels"])
            n_tiles = int(meta["n_tiles"])
        except (ValueError, KeyError) as exc:
            raise IntegrityError(f"{path}: malformed metadata block ({exc})") from exc
        ids, images, labels = [], [], []
        for i in range(n_tiles):
            head = f.read(4)
            if len(head) == 0:
                raise IntegrityError(f"{path}: header declares {n_tiles} tiles, file holds {i}")
            if len(head) < 4:
                raise TruncationError(f"{path}: truncated tile id length")
            (name_len,) = struct.unpack("<I", head)
            ids.append(_read_exact(f, name_len, "tile id").decode("utf-8"))
            images.append(np.frombuffer(_read_exact(f, h * w * c * 4, "image"), dtype="<f4").reshape(h, w, c))
            labels.append(np.frombuffer(_read_exact(f, h * w, "labels"), dtype=np.uint8).reshape(h, w))
        if f.read(1):
            raise IntegrityError(f"{path}: trailing data after the {n_tiles} declared tiles")
    empty = (0, h, w)
    return TileDataset(
        biome_id=meta["biome_id"], tile_ids=ids,
        images=np.stack(images) if images else np.zeros(empty + (c,), np.float32),
        labels=np.stack(labels) if labels else np.zeros(empty, np.uint8),
        n_classes=int(meta["n_classes"]), class_names=list(meta.get("class_names", [])),
    )


# ------------------------------------------------------------------ synthesis

@dataclass
class SynthBiomeParams:
    biome_id: str
    class_priors: np.ndarray
    signatures: np.ndarray  # [n_classes, channels]
    noise_scale: float = 0.1
    smoothness: float = 3.0
    unlabeled_fraction: float = 0.05
    spectral_offset: Optional[np.ndarray] = None
    prior_tilt: float = 0.0
    tile_mix: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.class_priors = np.asarray(self.class_priors, dtype=np.float64)
        self.signatures = np.asarray(self.signatures, dtype=np.float64)
        if self.spectral_offset is None:
            self.spectral_offset = np.zeros(self.signatures.shape[1])
        self.spectral_offset = np.asarray(self.spectral_offset, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        k = len(self.class_priors)
        if self.signatures.ndim != 2 or self.signatures.shape[0] != k:
            raise ParameterError(f"signatures {self.signatures.shape} do not match {k} class priors")
        if (self.class_priors < 0).any() or abs(self.class_priors.sum() - 1.0) > 1e-9:
            raise ParameterError("class priors must be nonnegative and sum to 1")
        if not self.noise_scale > 0:
            raise ParameterError("noise_scale must be positive")
        if not 0.0 <= self.unlabeled_fraction < 1.0:
            raise ParameterError("unlabeled_fraction must lie in [0, 1)")
        if not 0.0 <= self.tile_mix < 1.0:
            raise ParameterError("tile_mix must lie in [0, 1)")
        if self.smoothness < 0:
            raise ParameterError("smoothness must be >= 0")
        if self.spectral_offset.shape != (self.signatures.shape[1],):
            raise ParameterError("spectral_offset must have one entry per channel")

    @property
    def n_classes(self) -> int:
        return len(self.class_priors)

    @property
    def channels(self) -> int:
        return self.signatures.shape[1]

    def effective_priors(self) -> np.ndarray:
        """Priors reweighted by ``exp(tilt * (k/(K-1) - 1/2))``; tilt > 0 favors later classes."""
        k = self.n_classes
        pos = np.arange(k) / max(k - 1, 1) - 0.5
        p = self.class_priors * np.exp(self.prior_tilt * pos)
        return p / p.sum()


def _class_field(rng: np.random.Generator, size: int, smoothness: float, priors: np.ndarray,
                 tile_mix: float) -> np.ndarray:
    """Threshold a smooth standard-normal field at the prior quantiles.

    A per-tile shift carrying ``tile_mix`` of the variance makes composition
    vary between tiles while the marginal class frequencies stay at ``priors``.
    """
    latent = rng.standard_normal((size, size))
    if smoothness > 0:
        latent = gaussian_filter(latent, sigma=smoothness, mode="wrap")
    latent = (latent - latent.mean()) / max(latent.std(), 1e-12)
    shift = rng.standard_normal()
    z = np.sqrt(1.0 - tile_mix) * latent + np.sqrt(tile_mix) * shift
    edges = norm.ppf(np.clip(np.cumsum(priors)[:-1], 0.0, 1.0))
    return np.searchsorted(edges, z, side="right")


def generate_biome(params: SynthBiomeParams, n_tiles: int, tile_size: int) -> TileDataset:
    """Render ``n_tiles`` square tiles; tile ``i`` uses the seed sequence ``(seed, i)``."""
    params.validate()
    if n_tiles <= 0 or tile_size <= 0:
        raise ParameterError("n_tiles and tile_size must be positive")
    priors = params.effective_priors()
    images = np.empty((n_tiles, tile_size, tile_size, params.channels), dtype=np.float32)
    labels = np.empty((n_tiles, tile_size, tile_size), dtype=np.uint8)
    for i in range(n_tiles):
        rng = np.random.default_rng([params.seed, i])
        classes = _class_field(rng, tile_size, params.smoothness, priors, params.tile_mix)
        noise = rng.standard_normal((tile_size, tile_size, params.channels))
        images[i] = params.signatures[classes] + params.spectral_offset + params.noise_scale * noise
        lab = classes.astype(np.uint8)
        lab[rng.random((tile_size, tile_size)) < params.unlabeled_fraction] = SENTINEL
        labels[i] = lab
    return TileDataset(
        biome_id=params.biome_id,
        tile_ids=[f"{params.biome_id}-{i:04d}" for i in range(n_tiles)],
        images=images, labels=labels, n_classes=params.n_classes,
    )


def default_signatures(n_classes: int, channels: int, seed: int = 0) -> np.ndarray:
    """Reflectance-like class signatures in roughly ``[0.1, 0.9]``.

    Signatures move along a seeded spectral gradient with the class index (plus
    a small class-specific perturbation), so neighbouring classes, which are
    also spatial neighbours in generated maps, are spectrally close.
    """
    rng = np.random.default_rng([seed, 7919])
    base = rng.uniform(0.3, 0.5, size=channels)
    slope = rng.uniform(0.2, 0.4, size=channels) * rng.choice([-1.0, 1.0], size=channels)
    t = np.linspace(-0.5, 0.5, n_classes)[:, None]
    return base + t * slope + rng.uniform(-0.03, 0.03, size=(n_classes, channels))


def biome_family(n_biomes: int, *, n_classes: int = 5, channels: int = 4, offset_step: float = 0.15,
                 tilt_step: float = 0.5, noise_scale: float = 0.03, smoothness: float = 4.0,
                 unlabeled_fraction: float = 0.05, tile_mix: float = 0.75, seed: int = 0) -> list:
    """Biomes sharing class signatures; biome ``i`` is shifted by ``i`` offset and tilt steps.

    The offset direction is a seeded random unit vector, so spectral distance to
    biome 0 grows with ``i``.
    """
    sig = default_signatures(n_classes, channels, seed)
    rng = np.random.default_rng([seed, 104729])
    direction = rng.standard_normal(channels)
    direction /= np.linalg.norm(direction)
    priors = np.full(n_classes, 1.0 / n_classes)
    out = []
    for i in range(n_biomes):
        out.append(SynthBiomeParams(
            biome_id=f"biome{i}", class_priors=priors, signatures=sig, noise_scale=noise_scale,
            smoothness=smoothness, unlabeled_fraction=unlabeled_fraction, tile_mix=tile_mix,
            spectral_offset=i * offset_step * direction, prior_tilt=(i % 2 * 2 - 1) * tilt_step * (i > 0),
            seed=seed * 1000 + i,
        ))
    return out


def load_biome_dir(directory) -> dict:
    """Read every ``*.svds`` file in a directory, keyed by biome id (sorted)."""
    out = {}
    for path in sorted(Path(directory).glob("*.svds")):
        ds = read_dataset(path)
        out[ds.biome_id] = ds
    if not out:
        raise DataError(f"no .svds datasets found in {directory}")
    return dict(sorted(out.items()))
