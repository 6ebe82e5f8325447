"""Deterministic counter-based random substreams.

Every Monte-Carlo draw in this package comes from a Philox substream whose
key is a stable hash of integer identifiers (master seed, point id,
timestep index, class index, ...).  Results are therefore bit-identical
for a given seed regardless of evaluation order or parallelism degree,
and a timestep keeps the same noise whether it is evaluated inside a full
sweep or alone (which class-pruning relies on).
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Stream tags used to separate independent purposes under one master seed.
TAG_SMOOTHING = 101
TAG_DATASET = 102
TAG_INIT = 103
TAG_TRAIN = 104
TAG_SHARED = 105


def _splitmix64(x: int) -> int:
    """One round of splitmix64; a solid 64-bit integer mixer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix(*parts: int) -> int:
    """Hash a tuple of integers into a single 64-bit stream key.

    Order-sensitive and collision-resistant enough for substream keying.
    Negative inputs are folded into the 64-bit ring.
    """
    acc = 0x243F6A8885A308D3  # pi digits, arbitrary nonzero start
    for p in parts:
        acc = _splitmix64(acc ^ (int(p) & _MASK64))
    return acc


def substream(*parts: int) -> np.random.Generator:
    """A fresh Philox generator keyed by the given integers."""
    key = mix(*parts)
    return np.random.Generator(np.random.Philox(key=key))


def gaussian(shape: tuple[int, ...] | int, *parts: int) -> np.ndarray:
    """Standard normal block from the substream keyed by ``parts``."""
    return substream(*parts).standard_normal(shape)
