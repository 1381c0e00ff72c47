"""Subsystem seeds derived from a single run seed.

``derive_seed(seed, label)`` takes the first 8 bytes (little-endian) of
``sha256(f"{seed}/{label}")``, so each consumer gets an independent stream
that does not shift when another consumer draws more numbers.
"""
import hashlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label))
