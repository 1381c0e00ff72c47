"""The SVCK checkpoint container and name-addressed (partial) weight loading."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, MagicError, TruncationError, VersionError

CHECKPOINT_MAGIC = b"SVCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)  # name -> float32 ndarray, in payload order
    metadata: dict = field(default_factory=dict)

    def names(self, prefix: str = "") -> list:
        return [k for k in self.tensors if k.startswith(prefix)]


def checkpoint_from_modules(modules: dict, metadata: dict) -> Checkpoint:
    """``{"encoder": enc, ...}`` -> checkpoint with ``encoder.<param>`` names."""
    tensors = {}
    for prefix, module in modules.items():
        for name, p in module.named_parameters().items():
            tensors[f"{prefix}.{name}"] = np.asarray(p.data, dtype=np.float32).copy()
    return Checkpoint(tensors=tensors, metadata=dict(metadata))


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = [{"name": k, "shape": list(v.shape), "dtype": "float32"} for k, v in ckpt.tensors.items()]
    if len({e["name"] for e in entries}) != len(entries):
        raise IntegrityError("tensor names must be unique")
    blob = json.dumps({"tensors": entries, "metadata": ckpt.metadata}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for arr in ckpt.tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise MagicError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(raw) < 16:
        raise TruncationError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<Q", raw, 8)
    pos = 16
    if pos + meta_len > len(raw):
        raise TruncationError(f"{path}: truncated metadata block")
    try:
        header = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
        entries = header["tensors"]
    except (ValueError, KeyError) as exc:
        raise IntegrityError(f"{path}: malformed metadata ({exc})") from exc
    pos += meta_len
    expected = sum(4 * int(np.prod(e["shape"], dtype=np.int64)) for e in entries)
    available = len(raw) - pos
    if available < expected:
        raise TruncationError(f"{path}: payload holds {available} bytes, declared shapes need {expected}")
    if available > expected:
        raise IntegrityError(f"{path}: payload holds {available} bytes, declared shapes need only {expected}")
    tensors = {}
    for e in entries:
        if e["name"] in tensors:
            raise IntegrityError(f"{path}: duplicate tensor name {e['name']}")
        shape = tuple(int(s) for s in e["shape"])
        n = 4 * int(np.prod(shape, dtype=np.int64))
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += n
    return Checkpoint(tensors=tensors, metadata=header.get("metadata", {}))


@dataclass
class LoadReport:
    loaded: list
    skipped: list  # (name, checkpoint shape, model shape)
    unknown: list  # in checkpoint under the prefix, absent from the model
    missing: list  # in the model, absent from the checkpoint


def _group(name: str) -> str:
    return name.rsplit(".", 1)[0]


def load_partial_checkpoint(ckpt: Checkpoint, model, prefix: str = "encoder.") -> LoadReport:
    """Copy every tensor whose name and shape both match.

    Tensors are grouped by their owning layer (name minus the last component).
    A shape mismatch anywhere in a group skips the whole group so no layer is
    left half-initialized: a changed patch size skips both the patch projection
    weight and its bias.
    """
    params = model.named_parameters()
    available = {k[len(prefix):]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)}
    bad_groups = {_group(n) for n, arr in available.items() if n in params and params[n].shape != arr.shape}
    loaded, skipped = [], []
    for name, arr in available.items():
        if name not in params:
            continue
        if _group(name) in bad_groups:
            skipped.append((name, tuple(arr.shape), tuple(params[name].shape)))
            continue
        loaded.append(name)
    for name in loaded:
        params[name].data = np.array(available[name], dtype=params[name].data.dtype)
    unknown = [n for n in available if n not in params]
    missing = [n for n in params if n not in available]
    return LoadReport(loaded=loaded, skipped=skipped, unknown=unknown, missing=missing)
