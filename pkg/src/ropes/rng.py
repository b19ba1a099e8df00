"""Deterministic counter-based RNG streams.

Every consumer derives its own Philox stream from the master seed plus a
structural path (stage name, joint index, repeat index, ...), so work can be
parallelized or reordered without changing any draw.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _path_key(path):
    key = []
    for part in path:
        if isinstance(part, (int, np.integer)):
            key.append(int(part) & 0xFFFFFFFF)
        else:
            h = hashlib.sha256(str(part).encode()).digest()
            key.append(int.from_bytes(h[:4], "little"))
    return tuple(key)


def stream(seed: int, *path) -> np.random.Generator:
    """Philox generator for (seed, path); same arguments, same stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=_path_key(path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path) -> int:
    """Deterministic child seed for components that take a plain integer."""
    return int(stream(seed, *path).integers(0, 2**31 - 1))
