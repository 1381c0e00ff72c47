"""The ViT encoder: patch embedding, fixed 2D position embedding, pre-LN blocks, final LayerNorm."""
from __future__ import annotations

import functools
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .patching import PatchSpec, embed_patches, patchify, sincos_pos_embed
from .transformer import BlockParams, EncoderConfig, encoder_forward, trunc_normal


class Module:
    """Minimal parameter container: subclasses implement ``named_parameters``."""

    def named_parameters(self) -> dict:
        raise NotImplementedError

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_arrays(self) -> dict:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_arrays(self, arrays: dict) -> None:
        params = self.named_parameters()
        for name, arr in arrays.items():
            p = params[name]
            if p.shape != arr.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    def param_hash(self) -> str:
        return ad.parameters_hash(self.named_parameters()[k] for k in sorted(self.named_parameters()))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


@functools.lru_cache(maxsize=32)
def _pos_embed(grid_h: int, grid_w: int, d: int, dtype) -> np.ndarray:
    out = sincos_pos_embed(grid_h, grid_w, d).astype(dtype)
    out.flags.writeable = False
    return out


def pos_embed(grid_h: int, grid_w: int, d: int) -> np.ndarray:
    return _pos_embed(grid_h, grid_w, d, ad.get_dtype())


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch: int = 4
    channels: int = 4
    depth: int = 2
    width: int = 64
    heads: int = 4
    ffn_mult: int = 4
    bias: bool = True
    final_norm: bool = True

    @classmethod
    def base(cls, image_size: int = 256, patch: int = 8, channels: int = 15) -> "ViTConfig":
        """ViT-Base dimensions (depth 12, width 768, 12 heads, FFN 3072)."""
        return cls(image_size=image_size, patch=patch, channels=channels, depth=12, width=768, heads=12)

    @property
    def patch_spec(self) -> PatchSpec:
        return PatchSpec(self.image_size, self.image_size, self.channels, self.patch)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(depth=self.depth, width=self.width, heads=self.heads, ffn_mult=self.ffn_mult,
                             seq_len=self.patch_spec.n_patches, bias=self.bias)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class ViTEncoder(Module):
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.spec = cfg.patch_spec
        enc = cfg.encoder
        self.patch_weight = Tensor(trunc_normal(rng, (self.spec.patch_dim, cfg.width)), requires_grad=True)
        self.patch_bias = Tensor(np.zeros(cfg.width), requires_grad=True)
        self.blocks = [BlockParams.init(enc, rng) for _ in range(cfg.depth)]
        self.norm_weight = Tensor(np.ones(cfg.width), requires_grad=True)
        self.norm_bias = Tensor(np.zeros(cfg.width), requires_grad=True)

    def named_parameters(self) -> dict:
        out = {"patch_embed.weight": self.patch_weight, "patch_embed.bias": self.patch_bias}
        for i, b in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in b.named().items()})
        if self.cfg.final_norm:
            out["norm.weight"] = self.norm_weight
            out["norm.bias"] = self.norm_bias
        return out

    def forward_patches(self, patches, visible_idx: Optional[np.ndarray] = None) -> Tensor:
        """Encode ``[B, n, patch_dim]`` patch vectors; with ``visible_idx`` ``[B, m]`` only those rows."""
        patches = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
        spec = self.spec
        if patches.shape[-2:] != (spec.n_patches, spec.patch_dim):
            raise ShapeError(f"patches {patches.shape} do not match {spec}")
        pos = pos_embed(spec.grid_h, spec.grid_w, self.cfg.width)
        if visible_idx is not None:
            visible_idx = np.asarray(visible_idx)
            patches = np.take_along_axis(patches, visible_idx[..., None], axis=-2)
            pos = pos[visible_idx]
        x = embed_patches(Tensor(patches), self.patch_weight, self.patch_bias) + Tensor(pos)
        x = encoder_forward(x, self.blocks, self.cfg.heads)
        if self.cfg.final_norm:
            x = ad.layer_norm(x, self.norm_weight, self.norm_bias)
        return x

    def forward(self, images, visible_idx: Optional[np.ndarray] = None) -> Tensor:
        """Encode normalized images ``[B, H, W, C]`` (or a single ``[H, W, C]``)."""
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        return self.forward_patches(patchify(images, self.spec), visible_idx)

    __call__ = forward
