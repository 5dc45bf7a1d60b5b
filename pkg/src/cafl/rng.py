"""Keyed random streams.

Every random draw in the simulator comes from a generator derived from a
master seed plus a tuple of integer keys (round, device, purpose, ...).
Because the stream depends only on the key, the order in which devices or
scenarios are evaluated never changes the numbers they see.
"""

from __future__ import annotations

import numpy as np

# purpose tags used as the last key component
DOWNLINK = 1
UPLINK = 2
UPLINK_PILOT = 3
SGD = 4
STATIC_UL = 5
TASK = 6
PROFILE = 7
REPLICA = 8


def substream(master_seed: int, *keys: int) -> np.random.Generator:
    """Return an independent generator for ``(master_seed, *keys)``."""
    if master_seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seeds and stream keys must be non-negative")
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(seed) -> np.random.Generator:
    """Accept an int seed, a Generator, or None."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def crandn(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples with per-entry variance ``var``."""
    if var < 0:
        raise ValueError("variance must be non-negative")
    if var == 0:
        return np.zeros(shape, dtype=complex)
    z = rng.standard_normal(tuple(np.atleast_1d(shape)) + (2,))
    return np.sqrt(var / 2.0) * (z[..., 0] + 1j * z[..., 1])
