"""Super-block layout: pilot lattice, sub-blocks and symbol placement.

A round's downlink occupies ``q`` sub-blocks of ``L_ts`` OFDM symbols across
``N`` subcarriers. On every subcarrier a sub-block starts with a pilot phase
of ``M`` symbols followed by ``L_ts - M`` data symbols. What the pilot phase
carries depends on the signalling scheme:

``superposed``  pilot slot ``j`` carries model symbol ``j`` of the diagonal
                embedding (one symbol per slot), data slots carry ``M``.
``baseline``    pilot slots carry only known pilots.
``additive``    pilot slots carry ``M`` model symbols on top of the pilot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .channel import CoherenceProfile
from .errors import CapacityExceeded, InfeasibleGeometry

SUPERPOSED = "superposed"
BASELINE = "baseline"
ADDITIVE = "additive"
LAYOUTS = (SUPERPOSED, BASELINE, ADDITIVE)

# slot kinds in a PlacementMap
PILOT_EMBEDDED = 0
DATA_SLOT = 1
PILOT_SHARED = 2   # additive: data riding on a pilot slot


def pilot_fraction(lambda_t: float, lambda_f: float) -> float:
    for x in (lambda_t, lambda_f):
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"pilot density {x} outside [0, 1]")
    return 1.0 - (1.0 - lambda_t) * (1.0 - lambda_f)


def pilots_per_block(lambda_t: float, lambda_f: float, L_t: int, L_f: int) -> int:
    if not (0 <= lambda_t <= 1 and 0 <= lambda_f <= 1):
        raise ValueError("pilot densities must lie in [0, 1]")
    if L_t < 1 or L_f < 1:
        raise ValueError("block lengths must be >= 1")
    return _floor(lambda_t * L_t) * _floor(lambda_f * L_f)


def _floor(x: float) -> int:
    # guard against 0.3*10 == 2.9999999999999996 style round-off
    return int(math.floor(x + 1e-9))


def pilot_count(lam: float, N_s: int, N: int) -> int:
    return _floor(lam * N_s * N)


def lattice_period(density: float, group: int = 1) -> int:
    """Spacing of pilot groups along one axis for a given density."""
    if density <= 0:
        return 0
    return max(group, int(round(group / density)))


def baseline_lattice(N_s: int, N: int, lambda_t: float, lambda_f: float, M: int = 1) -> np.ndarray:
    """Boolean ``(N_s, N)`` pilot mask of the separable lattice.

    Time rows with ``n mod P_t < M`` and subcarriers with ``m mod P_f == 0`` are
    pilot rows/columns, where ``P_t = round(M / lambda_t)`` and
    ``P_f = round(1 / lambda_f)``. A position is a pilot if it lies on either.
    """
    pilot_fraction(lambda_t, lambda_f)  # validates
    rows = np.zeros(N_s, dtype=bool)
    cols = np.zeros(N, dtype=bool)
    Pt = lattice_period(lambda_t, M)
    Pf = lattice_period(lambda_f, 1)
    if Pt:
        rows = (np.arange(N_s) % Pt) < M
    if Pf:
        cols = (np.arange(N) % Pf) == 0
    return rows[:, None] | cols[None, :]


@dataclass(frozen=True)
class SlotCensus:
    pilot: int        # slots that carry only pilots
    data: int         # slots that carry only model symbols (padding included)
    superposed: int   # pilot slots that also carry model symbols

    @property
    def total(self) -> int:
        return self.pilot + self.data + self.superposed


@dataclass(frozen=True)
class SuperBlockGeometry:
    N_s: int
    N: int
    M: int
    lambda_t: float
    lambda_f: float
    s: int
    L_ts: int
    L_fs: int
    q: int
    pilot_rows: int
    layout: str = SUPERPOSED

    @property
    def rows_used(self) -> int:
        return self.q * self.L_ts

    @property
    def n_slots(self) -> int:
        return self.rows_used * self.N

    @property
    def column_payload(self) -> int:
        """Model symbols per (sub-block, subcarrier)."""
        return column_payload(self.layout, self.M, self.L_ts, self.pilot_rows)

    @property
    def capacity(self) -> int:
        return self.q * self.N * self.column_payload

    @property
    def pilot_fraction(self) -> float:
        return pilot_fraction(self.lambda_t, self.lambda_f)

    def census(self) -> SlotCensus:
        p = self.q * self.N * self.pilot_rows
        d = self.n_slots - p
        if self.layout == BASELINE:
            return SlotCensus(pilot=p, data=d, superposed=0)
        return SlotCensus(pilot=0, data=d, superposed=p)

    def to_json(self) -> dict:
        return {"N_s": self.N_s, "N": self.N, "M": self.M,
                "lambda_t": self.lambda_t, "lambda_f": self.lambda_f,
                "L_ts": self.L_ts, "L_fs": self.L_fs, "q": self.q, "s": self.s,
                "layout": self.layout}


def column_payload(layout: str, M: int, L_ts: int, pilot_rows: int) -> int:
    data = M * (L_ts - pilot_rows)
    if layout == SUPERPOSED:
        return pilot_rows + data
    if layout == BASELINE:
        return data
    if layout == ADDITIVE:
        return M * L_ts
    raise ValueError(f"unknown layout {layout!r}")


@dataclass(frozen=True)
class PlacementMap:
    """Where each model symbol sits in the grid.

    Arrays are indexed by symbol ``i`` in ``0..s-1``: row ``n``, subcarrier
    ``m``, stream (antenna / diagonal index) and slot kind. ``subblock`` is the
    sub-block number.
    """

    n: np.ndarray
    m: np.ndarray
    stream: np.ndarray
    kind: np.ndarray
    subblock: np.ndarray
    rotation: int = 0
    geometry: SuperBlockGeometry | None = field(default=None, compare=False)

    @property
    def s(self) -> int:
        return len(self.n)

    def keys(self) -> np.ndarray:
        """Flattened ``(n, m, stream)`` keys; unique iff the map is injective."""
        g = self.geometry
        width = max(g.M, 1) if g is not None else int(self.stream.max()) + 1
        N = g.N if g is not None else int(self.m.max()) + 1
        return (self.n * N + self.m) * width + self.stream


def _slot_sequence(geom: SuperBlockGeometry):
    """Canonical slot order: sub-block, subcarrier, pilot phase then data columns."""
    M, L, P = geom.M, geom.L_ts, geom.pilot_rows
    per_col = []
    for j in range(P):
        if geom.layout == SUPERPOSED:
            per_col.append((j, j, PILOT_EMBEDDED))
        elif geom.layout == ADDITIVE:
            per_col.extend((j, a, PILOT_SHARED) for a in range(M))
    for col in range(P, L):
        per_col.extend((col, a, DATA_SLOT) for a in range(M))
    cols = np.array(per_col, dtype=np.int64).reshape(-1, 3)
    reps = geom.q * geom.N
    sb = np.repeat(np.arange(geom.q), geom.N * len(cols))
    m = np.tile(np.repeat(np.arange(geom.N), len(cols)), geom.q)
    n = sb * L + np.tile(cols[:, 0], reps)
    stream = np.tile(cols[:, 1], reps)
    kind = np.tile(cols[:, 2], reps)
    return n, m, stream, kind, sb


def make_geometry(layout: str, s: int, M: int, N_s: int, N: int, L_ts: int,
                  pilot_rows: int, L_fs: int | None = None) -> SuperBlockGeometry:
    if s < 1:
        raise ValueError("need at least one model symbol")
    if M < 1 or N < 1 or N_s < 1:
        raise ValueError("grid dimensions and antenna count must be positive")
    if pilot_rows and L_ts <= pilot_rows:
        raise InfeasibleGeometry(f"sub-block length {L_ts} leaves no data phase after {pilot_rows} pilot symbols")
    if L_ts < 1:
        raise InfeasibleGeometry("sub-block length must be positive")
    payload = N * column_payload(layout, M, L_ts, pilot_rows)
    q = -(-s // payload)
    if q * L_ts > N_s:
        raise CapacityExceeded(f"{s} symbols need {q} sub-blocks of {L_ts} symbols, only {N_s} available")
    lam_t = pilot_rows / L_ts
    return SuperBlockGeometry(N_s=N_s, N=N, M=M, lambda_t=lam_t, lambda_f=0.0, s=s,
                              L_ts=L_ts, L_fs=L_fs if L_fs is not None else N, q=q,
                              pilot_rows=pilot_rows, layout=layout)


def place(geom: SuperBlockGeometry, rotation: int = 0) -> PlacementMap:
    """Map symbols to slots; symbol ``i`` takes canonical slot ``(i + rotation) mod capacity``."""
    n, m, stream, kind, sb = _slot_sequence(geom)
    cap = len(n)
    idx = (np.arange(geom.s) + rotation) % cap
    return PlacementMap(n=n[idx], m=m[idx], stream=stream[idx], kind=kind[idx],
                        subblock=sb[idx], rotation=int(rotation) % cap, geometry=geom)


def bottleneck(profiles: Iterable[CoherenceProfile]) -> tuple[int, int] | None:
    dyn = [p for p in profiles if not p.is_static]
    if not dyn:
        return None
    return min(p.L_t for p in dyn), min(p.L_f for p in dyn)


def build_superblock(profiles: Sequence[CoherenceProfile], s: int, M: int, N_s: int, N: int,
                     *, layout: str = SUPERPOSED, rotation: int = 0,
                     block_len: int | None = None) -> tuple[SuperBlockGeometry, PlacementMap]:
    """Size the sub-blocks by the shortest scheduled dynamic coherence and place ``s`` symbols.

    ``block_len`` overrides the sub-block length. When no dynamic device is
    scheduled there is no pilot phase and the default sub-block is one symbol.
    """
    bn = bottleneck(profiles)
    if bn is None:
        L_ts = block_len or 1
        geom = make_geometry(layout, s, M, N_s, N, L_ts, 0, L_fs=N)
    else:
        L_ts, L_fs = bn
        if block_len is not None:
            L_ts = block_len
        if L_ts <= M:
            raise InfeasibleGeometry(f"shortest dynamic coherence {L_ts} must exceed M = {M}")
        geom = make_geometry(layout, s, M, N_s, N, L_ts, M, L_fs=L_fs)
    return geom, place(geom, rotation)


def power_split_check(rho_p: float, rho_d: float, geometry: SuperBlockGeometry,
                      rho: float) -> tuple[bool, float]:
    """Average-power check for the superposed layout.

    Per antenna, a pilot phase of ``M`` slots at ``rho_p`` plus ``L_ts - M``
    data slots at ``rho_d`` must not exceed ``rho`` per channel use over the
    sub-block. Returns ``(ok, slack)`` summed over all sub-blocks and
    subcarriers.
    """
    if rho_p < 0 or rho_d < 0:
        raise ValueError("powers must be non-negative")
    g = geometry
    P = g.pilot_rows
    used = g.q * g.N * (P * rho_p + g.M * rho_d * (g.L_ts - P))
    budget = rho * g.q * g.N * g.L_ts
    slack = budget - used
    return bool(slack >= -1e-12 * max(budget, 1.0)), float(slack)
