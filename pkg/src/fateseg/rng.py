"""Deterministic random streams keyed by (component name, seed).

Every weight in the engine comes from a Philox counter-based generator whose
128-bit key is derived from a BLAKE2b digest of the component name and the
integer seed. Philox output is specified bit-for-bit, so weights are identical
on every platform and independent of call order between components.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(component: str, seed: int) -> np.random.Generator:
    """Return a fresh generator for ``component`` under ``seed``."""
    digest = hashlib.blake2b(
        f"{component}\x00{int(seed)}".encode("utf-8"), digest_size=16
    ).digest()
    key = np.frombuffer(digest, dtype="<u8").copy()
    return np.random.Generator(np.random.Philox(key=key))


def truncated_normal(
    rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02, bound: float = 2.0
) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside ``±bound·std``."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
