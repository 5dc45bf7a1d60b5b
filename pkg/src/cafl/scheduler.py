"""Device selection and per-round coverage bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channel import CoherenceProfile, tile_index
from .grid import DATA_SLOT, PILOT_EMBEDDED, PlacementMap, SlotCensus


@dataclass(frozen=True)
class Roster:
    statics: tuple[CoherenceProfile, ...]
    dynamics: tuple[CoherenceProfile, ...]
    shard_sizes: dict = field(default_factory=dict)   # device_id -> B_k

    def shard(self, device_id: int) -> int:
        return int(self.shard_sizes.get(device_id, 1))


def schedule_round(roster: Roster, K_D: int) -> list[CoherenceProfile]:
    """All statics, then the ``K_D`` dynamics with the largest tile area (ties: lower id first)."""
    if K_D < 0 or K_D > len(roster.dynamics):
        raise ValueError(f"cannot schedule {K_D} of {len(roster.dynamics)} dynamic devices")
    ranked = sorted(roster.dynamics, key=lambda p: (-p.area, p.device_id))
    return list(roster.statics) + ranked[:K_D]


def aggregation_weights(scheduled: Sequence[CoherenceProfile], roster: Roster) -> np.ndarray:
    b = np.array([roster.shard(p.device_id) for p in scheduled], dtype=float)
    return b / b.sum()


@dataclass(frozen=True)
class CoverageRecord:
    device_id: int
    mask: np.ndarray      # bool, length d
    zeta: np.ndarray      # last refresh round per coordinate

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def q(self) -> float:
        return float(self.mask.mean())


def coverage_from_mask(device_id: int, mask, t: int, prior_zeta=None) -> CoverageRecord:
    mask = np.asarray(mask, dtype=bool)
    if prior_zeta is None:
        prior_zeta = np.zeros(mask.shape, dtype=np.int64)
    zeta = np.where(mask, t, prior_zeta).astype(np.int64)
    return CoverageRecord(device_id, mask, zeta)


def superposed_mask(placement: PlacementMap, profile: CoherenceProfile) -> np.ndarray:
    """Received symbols under product superposition.

    A dynamic device gets the data-phase symbols of every sub-block that lies
    inside one of its coherence tiles; it never gets pilot-embedded symbols.
    """
    if profile.is_static:
        return np.ones(placement.s, dtype=bool)
    L = placement.geometry.L_ts
    first = placement.subblock * L
    last = first + L - 1
    same_t = tile_index(first, profile.L_t, profile.offset_t) == tile_index(last, profile.L_t, profile.offset_t)
    return same_t & (placement.kind == DATA_SLOT)


def pilot_group_mask(placement: PlacementMap, profile: CoherenceProfile) -> np.ndarray:
    """Received symbols when pilots are separate (orthogonal or additive).

    A symbol is usable when its tile also holds one complete pilot group on the
    same subcarrier. Symbols on pure pilot slots do not exist in these layouts.
    """
    if profile.is_static:
        return np.ones(placement.s, dtype=bool)
    g = placement.geometry
    L, P = g.L_ts, g.pilot_rows
    idx = tile_index(placement.n, profile.L_t, profile.offset_t)
    o = profile.offset_t
    first = np.maximum(o + (idx - (1 if o > 0 else 0)) * profile.L_t, 0)
    last = o + (idx + (0 if o > 0 else 1)) * profile.L_t - 1
    gmin = np.maximum(-(-first // L), 0)
    gmax = np.minimum((last - P + 1) // L, g.q - 1)
    return gmin <= gmax


def derive_coverage(placement: PlacementMap, profile: CoherenceProfile, t: int,
                    prior_zeta=None, rule: str = "superposed") -> CoverageRecord:
    """Coverage record of one device for round ``t``.

    ``rule`` is ``"superposed"`` for the product-superposition layout or
    ``"pilot_group"`` for layouts with separate pilots.
    """
    if rule == "superposed":
        mask = superposed_mask(placement, profile)
    elif rule == "pilot_group":
        mask = pilot_group_mask(placement, profile)
    else:
        raise ValueError(f"unknown coverage rule {rule!r}")
    return coverage_from_mask(profile.device_id, mask, t, prior_zeta)


def normalized_comm_cost(census: SlotCensus) -> float:
    """Slots used divided by the slots that carry model symbols."""
    carrying = census.data + census.superposed
    if carrying <= 0:
        raise ValueError("no slot carries model symbols")
    return census.total / carrying
