"""Plain-text run configuration: one ``section.key = value`` per line.

Blank lines and lines starting with ``#`` are ignored. Every key has a typed
default in :data:`DEFAULTS`; unknown keys, malformed lines and values that do
not parse as the default's type are rejected with the offending line number.
Command-line overrides use the same ``section.key=value`` form and win over
the file.
"""
from __future__ import annotations

import copy
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .calibration import DEFAULT_TEMPERATURES
from .errors import ConfigError
from .shift import MEASURES

DEFAULTS: dict = {
    "run": {
        "seed": 0,
        "out_dir": "runs",
    },
    "synth": {
        "n_biomes": 4,
        "n_tiles": 10,
        "tile_size": 64,
        "n_classes": 5,
        "channels": 4,
        "offset_step": 0.15,
        "tilt_step": 0.5,
        "noise_scale": 0.03,
        "smoothness": 4.0,
        "tile_mix": 0.75,
        "unlabeled_fraction": 0.05,
    },
    "data": {
        "dir": "data",
        "crop": 32,
        "train_fraction": 0.8,
    },
    "model": {
        "image_size": 32,
        "patch": 4,
        "channels": 4,
        "depth": 2,
        "width": 64,
        "heads": 4,
        "ffn_mult": 4,
    },
    "pretrain": {
        "steps": 2000,
        "epochs": 1000000,
        "batch_size": 16,
        "max_lr": 3e-3,
        "batch_repetition": 8,
        "mask_ratio": 0.75,
        "warmup_fraction": 0.05,
        "decoder_width": 32,
        "decoder_heads": 4,
        "decoder_depth": 1,
        "norm_pix_loss": False,
        "augment": True,
        "init": "",
    },
    "train": {
        "checkpoint": "",
        "probe_epochs": 20,
        "finetune_epochs": 20,
        "batch_size": 8,
        "lr": 1e-3,
        "probe_lr": 1e-2,
        "augment": True,
        "regime": "lpft",
    },
    "eval": {
        "temperatures": DEFAULT_TEMPERATURES,
        "batch_size": 32,
        "include_id": False,
    },
    "shift": {
        "measures": MEASURES,
        "diagonal_features": False,
    },
}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(default, text: str):
    text = text.strip()
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if not items:
            raise ValueError("empty list")
        if default and isinstance(default[0], float):
            return tuple(float(t) for t in items)
        return tuple(items)
    return text


class RunConfig:
    """Resolved configuration; ``cfg["model.depth"]`` or ``cfg.section("model")``."""

    def __init__(self, values: Optional[Mapping] = None):
        self._values = copy.deepcopy(DEFAULTS)
        self.sources: dict = {}
        for key, value in (values or {}).items():
            self.set(key, value, source="api")

    @staticmethod
    def _split(key: str):
        if key.count(".") != 1:
            raise ConfigError(f"key {key!r} must have the form section.key")
        section, name = key.split(".")
        if section not in DEFAULTS or name not in DEFAULTS[section]:
            raise ConfigError(f"unknown configuration key {key!r}")
        return section, name

    def set(self, key: str, value, source: str = "api") -> None:
        section, name = self._split(key)
        default = DEFAULTS[section][name]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse_value(default, value)
        self._values[section][name] = value
        self.sources[key] = source

    def __getitem__(self, key: str):
        section, name = self._split(key)
        return self._values[section][name]

    def section(self, name: str) -> dict:
        return dict(self._values[name])

    def to_dict(self) -> dict:
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in kv.items()}
                for s, kv in self._values.items()}


def _apply_line(cfg: RunConfig, text: str, where: str) -> None:
    if "=" not in text:
        raise ConfigError(f"{where}: malformed line {text!r}, expected 'section.key = value'")
    key, raw = (part.strip() for part in text.split("=", 1))
    try:
        section, name = cfg._split(key)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    default = DEFAULTS[section][name]
    try:
        value = _parse_value(default, raw)
    except ValueError:
        raise ConfigError(f"{where}: {key} expects {type(default).__name__}, got {raw!r}") from None
    cfg.set(key, value, source=where.split(":")[0])


def parse_config_text(text: str, name: str = "<config>", cfg: Optional[RunConfig] = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        _apply_line(cfg, stripped, f"{name}:{lineno}")
    return cfg


def parse_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    cfg = RunConfig()
    if path:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc.strerror}") from None
        parse_config_text(text, str(p), cfg)
    for i, item in enumerate(overrides, start=1):
        _apply_line(cfg, item.strip(), f"override:{i}")
    return cfg
