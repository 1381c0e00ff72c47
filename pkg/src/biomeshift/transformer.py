"""Pre-LN transformer blocks: multi-head self-attention and the position-wise FFN."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    depth: int
    width: int
    heads: int
    ffn_mult: int = 4
    seq_len: int = 0
    bias: bool = True

    def __post_init__(self):
        if self.depth < 0 or self.width <= 0 or self.heads <= 0 or self.seq_len < 0:
            raise ConfigError(f"encoder extents must be positive: {self}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by {self.heads} heads")
        if self.ffn_mult < 1:
            raise ConfigError(f"ffn_mult must be >= 1, got {self.ffn_mult}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class BlockParams:
    norm1_weight: Tensor
    norm1_bias: Tensor
    q_weight: Tensor
    k_weight: Tensor
    v_weight: Tensor
    proj_weight: Tensor
    norm2_weight: Tensor
    norm2_bias: Tensor
    fc1_weight: Tensor
    fc2_weight: Tensor
    q_bias: Optional[Tensor] = None
    k_bias: Optional[Tensor] = None
    v_bias: Optional[Tensor] = None
    proj_bias: Optional[Tensor] = None
    fc1_bias: Optional[Tensor] = None
    fc2_bias: Optional[Tensor] = None

    # attribute -> checkpoint name
    _NAMES = {
        "norm1_weight": "norm1.weight", "norm1_bias": "norm1.bias",
        "q_weight": "attn.q.weight", "q_bias": "attn.q.bias",
        "k_weight": "attn.k.weight", "k_bias": "attn.k.bias",
        "v_weight": "attn.v.weight", "v_bias": "attn.v.bias",
        "proj_weight": "attn.proj.weight", "proj_bias": "attn.proj.bias",
        "norm2_weight": "norm2.weight", "norm2_bias": "norm2.bias",
        "fc1_weight": "mlp.fc1.weight", "fc1_bias": "mlp.fc1.bias",
        "fc2_weight": "mlp.fc2.weight", "fc2_bias": "mlp.fc2.bias",
    }

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "BlockParams":
        d, inner = cfg.width, cfg.ffn_mult * cfg.width

        def w(shape):
            return Tensor(trunc_normal(rng, shape), requires_grad=True)

        def const(value, n):
            return Tensor(np.full(n, value), requires_grad=True)

        kw = dict(
            norm1_weight=const(1.0, d), norm1_bias=const(0.0, d),
            q_weight=w((d, d)), k_weight=w((d, d)), v_weight=w((d, d)), proj_weight=w((d, d)),
            norm2_weight=const(1.0, d), norm2_bias=const(0.0, d),
            fc1_weight=w((d, inner)), fc2_weight=w((inner, d)),
        )
        if cfg.bias:
            kw.update(q_bias=const(0.0, d), k_bias=const(0.0, d), v_bias=const(0.0, d),
                      proj_bias=const(0.0, d), fc1_bias=const(0.0, inner), fc2_bias=const(0.0, d))
        return cls(**kw)

    def named(self) -> dict:
        out = {}
        for f in fields(self):
            t = getattr(self, f.name)
            if t is not None:
                out[self._NAMES[f.name]] = t
        return out


def mhsa(x: Tensor, params: BlockParams, heads: int, return_attention: bool = False):
    """Pre-LN multi-head self-attention sublayer with residual, ``[..., S, d] -> [..., S, d]``."""
    d = x.shape[-1]
    if d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    if params.q_weight.shape != (d, d):
        raise ShapeError(f"attention weights {params.q_weight.shape} do not match width {d}")
    dh = d // heads
    s = x.shape[-2]
    lead = x.shape[:-2]

    h = ad.layer_norm(x, params.norm1_weight, params.norm1_bias)

    def split(t):
        return ad.swapaxes(t.reshape(lead + (s, heads, dh)), -2, -3)

    q = split(ad.linear(h, params.q_weight, params.q_bias))
    k = split(ad.linear(h, params.k_weight, params.k_bias))
    v = split(ad.linear(h, params.v_weight, params.v_bias))
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    attn = ad.softmax_t(scores, axis=-1)
    o = ad.swapaxes(ad.matmul(attn, v), -2, -3).reshape(lead + (s, d))
    out = x + ad.linear(o, params.proj_weight, params.proj_bias)
    return (out, attn) if return_attention else out


def ffn(x: Tensor, params: BlockParams) -> Tensor:
    """Position-wise ``x + fc2(gelu(fc1(LN(x))))``."""
    d = x.shape[-1]
    if params.fc1_weight.shape[0] != d:
        raise ShapeError(f"FFN weights {params.fc1_weight.shape} do not match width {d}")
    h = ad.layer_norm(x, params.norm2_weight, params.norm2_bias)
    h = ad.gelu(ad.linear(h, params.fc1_weight, params.fc1_bias))
    return x + ad.linear(h, params.fc2_weight, params.fc2_bias)


def block_forward(x: Tensor, params: BlockParams, heads: int) -> Tensor:
    return ffn(mhsa(x, params, heads), params)


def encoder_forward(x: Tensor, blocks: list, heads: int) -> Tensor:
    for params in blocks:
        x = block_forward(x, params, heads)
    return x
