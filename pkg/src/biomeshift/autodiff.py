"""Dense tensors on top of numpy with a reverse-mode gradient tape.

Every differentiable operation records its parents and a closure mapping the
upstream gradient to one gradient per parent. ``backward`` walks the tape in
reverse topological order and accumulates into ``Tensor.grad`` of leaves.

Arithmetic runs in 32-bit floats unless 64-bit verification mode is switched
on through :func:`set_precision` or the :func:`precision` context manager.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, NoLabeledPixelsError, ParameterError, ShapeError

SENTINEL = 255

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_local = threading.local()


def set_precision(name: str) -> None:
    """Select the global float width: ``"float32"`` (training) or ``"float64"`` (verification)."""
    global _dtype
    if name not in _DTYPES:
        raise ParameterError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    previous = "float64" if _dtype is np.float64 else "float32"
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _dtype else data.astype(_dtype)
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ParameterError("loss is not on the gradient tape (no input requires grad)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)))


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-form GELU, ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    xd = x.data
    t = np.tanh(_GELU_K * (xd + 0.044715 * xd ** 3))
    out = 0.5 * xd * (1.0 + t)

    def fn(g):
        dt = (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _result(out, (x,), fn)


# ------------------------------------------------------------------ structure

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the second-to-last axis: ``out[..., j, :] = x[..., idx[..., j], :]``.

    ``idx`` has the leading shape of ``x`` (minus the last two axes) followed by
    the number of gathered rows. Gradient rows are scattered back with ``add.at``
    so repeated indices accumulate.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[:-1] != x.shape[:-2]:
        raise ShapeError(f"index leading shape {idx.shape[:-1]} does not match tensor {x.shape}")
    n = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"row index out of range for {n} rows")
    out = np.take_along_axis(x.data, idx[..., None], axis=-2)
    src = x.shape

    def fn(g):
        gx = np.zeros(src, dtype=g.dtype)
        lead = int(np.prod(src[:-2], dtype=np.int64))
        gx2 = gx.reshape(lead, src[-2], src[-1])
        ii = idx.reshape(lead, -1)
        rows = np.repeat(np.arange(lead), ii.shape[1])
        np.add.at(gx2, (rows, ii.ravel()), g.reshape(lead * ii.shape[1], src[-1]))
        return (gx,)

    return _result(out, (x,), fn)


# --------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ------------------------------------------------------------- normalization

def softmax_t(logits, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Softmax of ``logits / temperature`` along ``axis``; max-subtracted for overflow safety."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    x = as_tensor(logits)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return ((p * (g - (g * p).sum(axis=axis, keepdims=True))) / temperature,)

    return _result(p, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then ``gamma * . + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm width mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), fn)


# --------------------------------------------------------------------- losses

def cross_entropy_masked(logits: Tensor, labels, sentinel: int = SENTINEL) -> Tensor:
    """Mean negative log-softmax of the true class over non-sentinel rows of an ``N x C`` logit matrix."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_masked expects N x C logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    valid = labels != sentinel
    count = int(valid.sum())
    if count == 0:
        raise NoLabeledPixelsError()
    lab = labels[valid].astype(np.int64)
    if lab.min() < 0 or lab.max() >= c:
        raise DataError(f"label outside [0, {c}) found among non-sentinel entries")
    z = logits.data[valid]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(count)
    loss = (lse - z[rows, lab]).sum() / count

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, lab] -= 1.0
        full = np.zeros_like(logits.data)
        full[valid] = p * (g / count)
        return (full,)

    return _result(np.asarray(loss), (logits,), fn)


def mse_selected(pred: Tensor, target, selection) -> Tensor:
    """Mean squared error restricted to selected rows.

    ``selection`` is either an integer index array over the first axis, or a
    boolean mask over all axes but the last (so ``B x n`` for ``B x n x k``).
    """
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_selected shape mismatch: pred {pred.shape}, target {target.shape}")
    sel = np.asarray(selection)
    if sel.dtype == bool:
        if sel.shape != pred.shape[:-1]:
            raise ShapeError(f"selection mask {sel.shape} does not cover rows of {pred.shape}")
        mask = sel
    else:
        sel = sel.astype(np.int64).reshape(-1)
        if sel.size and (sel.min() < 0 or sel.max() >= pred.shape[0]):
            raise ShapeError("selection index out of range")
        mask = np.zeros(pred.shape[:1], dtype=bool)
        mask[sel] = True
        mask = np.broadcast_to(mask.reshape(mask.shape + (1,) * (pred.ndim - 2)), pred.shape[:-1])
    if not mask.any():
        raise DataError("mse_selected needs a non-empty selection")
    diff = np.where(mask[..., None], pred.data - target, 0.0)
    count = int(mask.sum()) * pred.shape[-1]
    loss = (diff * diff).sum() / count
    return _result(np.asarray(loss), (pred,), lambda g: (diff * (2.0 * g / count),))


def parameters_hash(tensors: Iterable[Tensor]) -> str:
    """Stable digest of tensor payloads, used for bitwise-equality checks."""
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
