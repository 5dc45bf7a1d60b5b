"""Block-fading channels with per-device coherence tiles.

Each device sees a time-frequency grid cut into tiles of ``L_t`` symbols by
``L_f`` subcarriers. The channel vector is constant on a tile and drawn
independently from CN(0, I_M) per tile. Tile boundaries can be shifted
relative to the grid origin with per-device offsets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .rng import as_generator, crandn

STATIC = "static"
DYNAMIC = "dynamic"


class GridShape(NamedTuple):
    """Minimal grid description: symbols, subcarriers, antennas."""

    N_s: int
    N: int
    M: int


@dataclass(frozen=True)
class CoherenceProfile:
    device_id: int
    L_t: int
    L_f: int
    cls: str = DYNAMIC
    offset_t: int = 0
    offset_f: int = 0

    def __post_init__(self):
        if self.L_t < 1 or self.L_f < 1:
            raise ValueError(f"device {self.device_id}: coherence lengths must be >= 1")
        if not (0 <= self.offset_t < self.L_t and 0 <= self.offset_f < self.L_f):
            raise ValueError(f"device {self.device_id}: offsets must lie in [0, L)")
        if self.cls not in (STATIC, DYNAMIC):
            raise ValueError(f"device {self.device_id}: unknown class {self.cls!r}")

    @property
    def is_static(self) -> bool:
        return self.cls == STATIC

    @property
    def area(self) -> int:
        return self.L_t * self.L_f


def tile_index(pos, length: int, offset: int):
    """Tile index along one axis; boundaries sit at positions ``offset + j*length``."""
    pos = np.asarray(pos)
    return (pos - offset) // length + (1 if offset > 0 else 0)


def tile_count(extent: int, length: int, offset: int) -> int:
    """Number of tiles that intersect ``[0, extent)``."""
    return int(tile_index(extent - 1, length, offset)) + 1


@dataclass(frozen=True)
class ChannelRealization:
    """Per-tile channel vectors for one device over one grid.

    ``h[it, jf]`` is the length-``M`` vector of the tile in row ``it`` and
    column ``jf``.
    """

    profile: CoherenceProfile
    grid: GridShape
    h: np.ndarray
    noise_variance: float
    seed: int | None

    @property
    def n_blocks(self) -> int:
        return self.h.shape[0] * self.h.shape[1]

    def tile_of(self, n, m):
        p = self.profile
        return tile_index(n, p.L_t, p.offset_t), tile_index(m, p.L_f, p.offset_f)


def sample_channel(profile: CoherenceProfile, grid, seed=None,
                   noise_variance: float = 1.0) -> ChannelRealization:
    """Draw one CN(0, I_M) vector per coherence tile that meets the grid.

    ``grid`` is anything with integer ``N_s``, ``N`` and ``M`` attributes.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    shape = GridShape(int(grid.N_s), int(grid.N), int(grid.M))
    if shape.M < 1:
        raise ValueError("need at least one antenna")
    if shape.N_s < 1 or shape.N < 1:
        raise ValueError("grid must be non-empty")
    nt = tile_count(shape.N_s, profile.L_t, profile.offset_t)
    nf = tile_count(shape.N, profile.L_f, profile.offset_f)
    rng = as_generator(seed)
    h = crandn(rng, (nt, nf, shape.M))
    return ChannelRealization(profile, shape, h, float(noise_variance),
                              seed if isinstance(seed, (int, np.integer)) else None)


def channel_at(realization: ChannelRealization, n: int, m: int) -> np.ndarray:
    g = realization.grid
    if not (0 <= n < g.N_s and 0 <= m < g.N):
        raise IndexError(f"position ({n}, {m}) outside {g.N_s}x{g.N} grid")
    it, jf = realization.tile_of(n, m)
    return realization.h[int(it), int(jf)]


def awgn(shape, noise_variance: float, seed=None) -> np.ndarray:
    """Complex white Gaussian noise with per-entry variance ``noise_variance``."""
    if noise_variance < 0:
        raise ValueError("noise variance must be non-negative")
    return crandn(as_generator(seed), shape, noise_variance)


def span_in_one_tile(profile: CoherenceProfile, n0: int, n1: int, m0: int = 0, m1: int = 0) -> bool:
    """True if rows ``n0..n1`` and columns ``m0..m1`` (inclusive) share one tile."""
    return bool(tile_index(n0, profile.L_t, profile.offset_t) == tile_index(n1, profile.L_t, profile.offset_t)
                and tile_index(m0, profile.L_f, profile.offset_f) == tile_index(m1, profile.L_f, profile.offset_f))
