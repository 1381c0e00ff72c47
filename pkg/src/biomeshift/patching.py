"""Image <-> patch-sequence conversion, patch embedding, position embeddings, masking.

Patch order is patch-row-major (top-left to bottom-right). Inside a patch the
flattened vector is row-major over the ``p x p`` pixels with the channel index
varying fastest. Checkpoints depend on this order, so it is fixed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class PatchSpec:
    image_h: int
    image_w: int
    channels: int
    patch: int

    def __post_init__(self):
        if min(self.image_h, self.image_w, self.channels, self.patch) <= 0:
            raise ShapeError(f"patch spec extents must be positive: {self}")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ShapeError(
                f"image {self.image_h}x{self.image_w} is not divisible by patch size {self.patch}")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def with_channels(self, channels: int) -> "PatchSpec":
        return PatchSpec(self.image_h, self.image_w, channels, self.patch)


@dataclass(frozen=True)
class MaskPlan:
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    ratio: float

    @property
    def n_patches(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)


def _split_axes(shape, spec: PatchSpec, lead: tuple):
    p = spec.patch
    return lead + (spec.grid_h, p, spec.grid_w, p, spec.channels)


def patchify(image, spec: PatchSpec):
    """``[..., H, W, C] -> [..., n_patches, patch_dim]``; works on arrays and tensors."""
    shape = image.shape
    if tuple(shape[-3:]) != (spec.image_h, spec.image_w, spec.channels):
        if len(shape) >= 3 and (shape[-3] % spec.patch or shape[-2] % spec.patch):
            raise ShapeError(f"image {shape[-3]}x{shape[-2]} is not divisible by patch size {spec.patch}")
        raise ShapeError(f"image shape {tuple(shape)} does not match spec {spec}")
    lead = tuple(shape[:-3])
    k = len(lead)
    perm = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    out_shape = lead + (spec.n_patches, spec.patch_dim)
    if isinstance(image, Tensor):
        return image.reshape(_split_axes(shape, spec, lead)).transpose(perm).reshape(out_shape)
    arr = np.asarray(image).reshape(_split_axes(shape, spec, lead)).transpose(perm)
    return np.ascontiguousarray(arr).reshape(out_shape)


def unpatchify(patches, spec: PatchSpec):
    """Exact inverse of :func:`patchify`."""
    shape = patches.shape
    if tuple(shape[-2:]) != (spec.n_patches, spec.patch_dim):
        raise ShapeError(f"patch array {tuple(shape)} does not match spec {spec}")
    lead = tuple(shape[:-2])
    k = len(lead)
    p = spec.patch
    grid = lead + (spec.grid_h, spec.grid_w, p, p, spec.channels)
    perm = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    out_shape = lead + (spec.image_h, spec.image_w, spec.channels)
    if isinstance(patches, Tensor):
        return patches.reshape(grid).transpose(perm).reshape(out_shape)
    arr = np.asarray(patches).reshape(grid).transpose(perm)
    return np.ascontiguousarray(arr).reshape(out_shape)


def embed_patches(patches, weight: Tensor, bias: Tensor) -> Tensor:
    """Shared linear projection of every patch vector to the model width."""
    patches = ad.as_tensor(patches)
    if patches.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"patch embedding mismatch: patches {patches.shape}, weight {weight.shape}, bias {bias.shape}")
    return ad.linear(patches, weight, bias)


def _sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    freqs = 1.0 / 10000.0 ** (2.0 * np.arange(dim // 2, dtype=np.float64) / dim)
    angles = positions[:, None].astype(np.float64) * freqs[None, :]
    out = np.empty((len(positions), dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def sincos_pos_embed(grid_h: int, grid_w: int, d: int) -> np.ndarray:
    """Fixed 2D sinusoidal embedding, one row per grid cell in patch order.

    The first ``d/2`` columns encode the row index and the last ``d/2`` the
    column index; each half interleaves sin/cos pairs with frequencies
    ``1 / 10000^(2i / (d/2))``.
    """
    if d % 4:
        raise ShapeError(f"position embedding width must be divisible by 4, got {d}")
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    half = d // 2
    emb = np.concatenate([_sincos_1d(rows.ravel(), half), _sincos_1d(cols.ravel(), half)], axis=1)
    return emb.astype(ad.get_dtype())


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniformly random split of ``range(n_patches)`` into masked / visible sets."""
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"mask ratio must lie in (0, 1), got {ratio}")
    n_mask = int(round(ratio * n_patches))
    if n_mask >= n_patches:
        raise ParameterError(f"mask ratio {ratio} leaves no visible patch out of {n_patches}")
    perm = rng.permutation(n_patches)
    return MaskPlan(visible_idx=np.sort(perm[n_mask:]), masked_idx=np.sort(perm[:n_mask]), ratio=ratio)
