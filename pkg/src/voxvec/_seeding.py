"""Stable seed derivation so every artifact is reproducible from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np


def stable_seed(*parts) -> int:
    """Map a tuple of ints/strings to a 63-bit seed, stable across runs and platforms."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))
