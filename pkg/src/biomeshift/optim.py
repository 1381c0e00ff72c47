"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .autodiff import Tensor
from .errors import ParameterError, ShapeError

PRETRAIN_ADAMW = dict(beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.05)
FINETUNE_ADAMW = dict(beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01)


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return dict(beta1=self.beta1, beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay)


def adamw_step(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]],
               state: AdamWState, lr: float) -> None:
    """Apply one AdamW update in place.

    ``grads`` defaults to each parameter's ``.grad``; parameters without a
    gradient are treated as having a zero gradient (they still decay).
    """
    if lr < 0:
        raise ParameterError(f"learning rate must be >= 0, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ShapeError(f"optimizer moment for {name} has shape {m.shape}, parameter {p.shape}")
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype)


@dataclass(frozen=True)
class LrSchedule:
    max_lr: float
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ParameterError("total_steps must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ParameterError(
                f"warmup_steps must lie in [0, total_steps), got {self.warmup_steps} of {self.total_steps}")

    @classmethod
    def with_warmup_fraction(cls, max_lr: float, total_steps: int, fraction: float = 0.05) -> "LrSchedule":
        warmup = min(int(round(fraction * total_steps)), total_steps - 1)
        return cls(max_lr=max_lr, total_steps=total_steps, warmup_steps=max(warmup, 0))


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup from 0 to ``max_lr``, then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ParameterError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if step < w:
        return schedule.max_lr * step / w
    progress = (step - w) / (schedule.total_steps - w)
    return schedule.max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
