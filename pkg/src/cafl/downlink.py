"""Downlink signalling: orthogonal pilots, product superposition, additive superposition.

Symbol-level conventions used throughout:

* ``X_p`` is the unitary ``M x M`` DFT matrix.
* Model entries are sent as real symbols. Data symbols have unit average
  energy. The symbols on the diagonal of ``X_ptheta`` are shifted to be
  strictly positive and scaled to mean energy ``M``, so that a pilot slot of
  the superposed scheme radiates ``rho_p`` per antenna, like an orthogonal
  pilot slot does.
* A superposed data slot radiates ``M * rho_d`` per antenna. The orthogonal and
  additive schemes use the same per-antenna powers so all schemes spend the
  same energy per sub-block.

Real symbols on a complex scalar channel give two real observations per slot,
so the symbol-level decoder recovers up to two streams per slot; the grid
simulator therefore supports ``M <= 2``. The analytic functions (rates, power
split, estimation variances) work for any ``M``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelRealization, CoherenceProfile, span_in_one_tile, tile_index
from .errors import DecodeSingular, InfeasibleGeometry, NegativePilotPower, PowerBudgetExceeded
from .grid import (ADDITIVE, BASELINE, DATA_SLOT, PILOT_EMBEDDED, PILOT_SHARED, SUPERPOSED,
                   PlacementMap, SuperBlockGeometry)
from .rng import as_generator, crandn

GAIN_FLOOR = 1e-12
MAX_GRID_ANTENNAS = 2


def dft_pilot(M: int) -> np.ndarray:
    """Unitary DFT matrix used as the pilot matrix ``X_p``."""
    k = np.arange(M)
    return np.exp(-2j * np.pi * np.outer(k, k) / M) / np.sqrt(M)


# ---------------------------------------------------------------- estimation

def real_lmmse(y, f, noise_var, prior_var=1.0, prior_mean=0.0):
    """LMMSE estimate of real symbols ``x`` from ``y = f x + w``.

    ``y`` has shape ``(..., J)`` (``J`` slots sharing the channel row ``f`` of
    shape ``(..., M)``) and ``w`` is complex with total variance
    ``noise_var``. Real and imaginary parts are stacked so each slot gives two
    real equations. Returns ``(..., M, J)``. With ``noise_var = 0`` the real
    system is solved directly (square when ``M = 2``) instead of through the
    normal equations, which would square its condition number.
    """
    y = np.asarray(y, dtype=complex)
    f = np.asarray(f, dtype=complex)
    A = np.stack([f.real, f.imag], axis=-2)
    At = np.swapaxes(A, -1, -2)
    M = f.shape[-1]
    Y = np.stack([y.real, y.imag], axis=-2)
    pm = None
    if np.ndim(prior_mean) or prior_mean != 0.0:
        pm = np.broadcast_to(np.asarray(prior_mean, dtype=float), f.shape + (Y.shape[-1],))
        Y = Y - A @ pm
    nv = np.asarray(noise_var, dtype=float)
    if not np.any(nv) and M == 2:
        x = np.linalg.solve(A, Y)
    else:
        G = At @ A + (nv[..., None, None] / (2.0 * prior_var) + 1e-300) * np.eye(M)
        x = np.linalg.solve(G, At @ Y)
    return x if pm is None else pm + x


def real_scalar_lmmse(z, g, noise_var, prior_mean, prior_var):
    """Entry-wise LMMSE of real ``p`` from ``z = g p + w`` (complex ``w``, variance ``noise_var``)."""
    g2 = np.abs(g) ** 2
    resid = z - g * prior_mean
    num = prior_var * np.real(np.conj(g) * resid)
    return prior_mean + num / (prior_var * g2 + np.asarray(noise_var) / 2.0)


@dataclass(frozen=True)
class EquivalentChannelEstimate:
    f_bar: np.ndarray
    sigma_e2: float


def estimation_error_variance(M: int, rho_p: float, noise_var: float) -> float:
    """Per-entry error variance of the equivalent-channel MMSE estimate."""
    return M * noise_var / (M * rho_p + noise_var)


def estimate_equivalent_channel(y_pilot, X_p, rho_p: float, noise_var: float) -> EquivalentChannelEstimate:
    """MMSE estimate of ``f = h^H X_ptheta`` from the ``M`` pilot-phase samples.

    The pilot phase is de-rotated by ``X_p^H``, scaled by ``1/sqrt(rho_p)`` and
    shrunk by ``M rho_p / (M rho_p + noise_var)``. Works on stacked inputs of
    shape ``(..., M)``.
    """
    if rho_p <= 0:
        if noise_var == 0 or rho_p < 0:
            raise ValueError("pilot power must be positive")
        M = np.shape(y_pilot)[-1]
        return EquivalentChannelEstimate(np.zeros_like(np.asarray(y_pilot, dtype=complex)), float(M))
    y_pilot = np.asarray(y_pilot, dtype=complex)
    M = y_pilot.shape[-1]
    z = y_pilot @ np.conj(X_p).T / np.sqrt(rho_p)
    shrink = M * rho_p / (M * rho_p + noise_var)
    return EquivalentChannelEstimate(shrink * z, estimation_error_variance(M, rho_p, noise_var))


def distortion_coefficient(rho_d: float, sigma_e2: float, noise_var: float) -> float:
    den = rho_d * sigma_e2 + noise_var
    if den == 0:
        return np.inf if rho_d > 0 else 0.0
    return rho_d / den


def per_symbol_distortion(f_bar, rho_d, sigma_e2, noise_var):
    c = distortion_coefficient(rho_d, sigma_e2, noise_var)
    gain = np.sum(np.abs(np.asarray(f_bar)) ** 2, axis=-1)
    if np.isinf(c):
        return np.where(gain > 0, 0.0, 1.0)
    return 1.0 / (1.0 + c * gain)


# ---------------------------------------------------------------- sub-block signals

@dataclass(frozen=True)
class SubBlockSignal:
    """One superposed sub-block on one subcarrier."""

    p: np.ndarray          # diagonal of X_ptheta, length M
    X_dtheta: np.ndarray   # M x (L_ts - M)
    X_p: np.ndarray
    rho_p: float
    rho_d: float

    @property
    def matrix(self) -> np.ndarray:
        lead = np.sqrt(self.rho_p) * self.p[:, None] * self.X_p
        tail = np.sqrt(self.rho_d) * self.p[:, None] * self.X_dtheta
        return np.concatenate([lead, tail], axis=1)


def transmit_superposed(pilot_symbols, data_symbols, X_p, rho_p: float, rho_d: float) -> SubBlockSignal:
    """Build ``[sqrt(rho_p) X_ptheta X_p, sqrt(rho_d) X_ptheta X_dtheta]``.

    ``pilot_symbols`` fill the diagonal of ``X_ptheta``; ``data_symbols`` is the
    ``M x (L_ts - M)`` data-phase block (a flat vector is reshaped column-wise).
    """
    p = np.atleast_1d(np.asarray(pilot_symbols))
    M = len(p)
    if np.any(np.abs(p) == 0):
        raise ValueError("X_ptheta must be invertible: zero on the diagonal")
    d = np.asarray(data_symbols)
    if d.ndim == 1:
        d = d.reshape(-1, M).T
    if d.shape[0] != M or d.shape[1] < 1:
        raise InfeasibleGeometry("data phase must be M x (L_ts - M) with L_ts > M")
    return SubBlockSignal(p=p, X_dtheta=d, X_p=np.asarray(X_p), rho_p=rho_p, rho_d=rho_d)


def transmit_baseline(symbols, pilot_mask, rho_p: float, rho_d: float, rho: float | None = None,
                      x_p=None) -> np.ndarray:
    """Orthogonal pilots on ``pilot_mask`` positions, data elsewhere.

    ``symbols`` holds one row of ``M`` values per data position (time-major
    order). Returns a ``(N_s, N, M)`` array. If ``rho`` is given the total
    power ``rho_p |P| + rho_d |D| <= rho N_s N`` is enforced.
    """
    pilot_mask = np.asarray(pilot_mask, dtype=bool)
    sym = np.asarray(symbols)
    if sym.ndim == 1:
        sym = sym[:, None]
    M = sym.shape[1] if sym.size else (1 if x_p is None else len(np.atleast_1d(x_p)))
    n_p = int(pilot_mask.sum())
    n_d = pilot_mask.size - n_p
    if rho is not None and rho_p * n_p + rho_d * n_d > rho * pilot_mask.size * (1 + 1e-12):
        raise PowerBudgetExceeded("baseline powers exceed the total power constraint")
    if x_p is None:
        x_p = np.ones(M)  # unit energy per antenna
    out = np.zeros(pilot_mask.shape + (M,), dtype=complex)
    out[pilot_mask] = np.sqrt(rho_p) * np.asarray(x_p)
    data_pos = ~pilot_mask
    k = min(len(sym), n_d)
    flat = np.zeros((n_d, M), dtype=complex)
    flat[:k] = sym[:k]
    out[data_pos] = np.sqrt(rho_d) * flat
    return out


def transmit_additive(data_on_pilot, x_p, rho_p: float, rho_d: float) -> np.ndarray:
    """Pilot slot of the additive scheme: ``sqrt(rho_p) x_p + sqrt(rho_d) x_d``."""
    return np.sqrt(rho_p) * np.asarray(x_p) + np.sqrt(rho_d) * np.asarray(data_on_pilot)


def receive(X, h, noise_var: float, seed=None) -> np.ndarray:
    """``y = h^H X + w``. ``X`` is ``(..., M, L)`` and ``h`` is ``(..., M)``."""
    X = np.asarray(X)
    h = np.asarray(h)
    y = np.einsum("...m,...ml->...l", np.conj(h), X)
    return y + crandn(as_generator(seed), y.shape, noise_var)


def receive_subblock(signal: SubBlockSignal, realization: ChannelRealization, n0: int, m: int,
                     seed=None) -> tuple[np.ndarray | None, bool]:
    """Receive a sub-block starting at row ``n0`` on subcarrier ``m``.

    Returns ``(y, True)`` or ``(None, False)`` when a tile boundary of the
    device cuts the sub-block.
    """
    L = signal.matrix.shape[1]
    if not span_in_one_tile(realization.profile, n0, n0 + L - 1, m, m):
        return None, False
    it, jf = realization.tile_of(n0, m)
    h = realization.h[int(it), int(jf)]
    return receive(signal.matrix, h, realization.noise_variance, seed), True


def decode_static(y, X_p, h, rho_p: float, rho_d: float, noise_var: float = 0.0,
                  pilot_prior=(0.0, 1.0)):
    """Recover pilot-embedded and data-phase symbols with known ``h``.

    Returns ``(p_hat, X_d_hat)`` with shapes ``(M,)`` and ``(M, L_ts - M)``.
    Noiseless inputs are inverted exactly; otherwise real LMMSE is used with
    ``pilot_prior = (mean, var)`` for the diagonal symbols and a unit prior for
    data symbols.
    """
    y = np.asarray(y, dtype=complex)
    h = np.asarray(h, dtype=complex)
    M = len(h)
    g = np.conj(h)
    if np.min(np.abs(g)) < GAIN_FLOOR or rho_p <= 0:
        raise DecodeSingular("effective channel gain below floor")
    z = y[:M] @ np.conj(X_p).T / np.sqrt(rho_p)
    if noise_var == 0:
        p_hat = np.real(z / g)
    else:
        p_hat = real_scalar_lmmse(z, g, noise_var / rho_p, pilot_prior[0], pilot_prior[1])
    if y.shape[0] == M:
        return p_hat, np.zeros((M, 0))
    if rho_d <= 0:
        raise DecodeSingular("zero data power")
    x_hat = real_lmmse(y[M:], np.sqrt(rho_d) * g * p_hat, noise_var)
    return p_hat, x_hat


def decode_dynamic(y_data, f_bar, rho_d: float, sigma_e2: float, noise_var: float, prior_mean=0.0):
    """Equalize the data phase with the equivalent-channel estimate.

    Returns ``(X_d_hat, v)`` where ``v = 1 / (1 + c |f_bar|^2)`` with
    ``c = rho_d / (rho_d sigma_e2 + noise_var)``.
    """
    f_bar = np.asarray(f_bar, dtype=complex)
    M = f_bar.shape[-1]
    n_eff = rho_d * M * sigma_e2 + noise_var
    x_hat = real_lmmse(y_data, np.sqrt(rho_d) * f_bar, n_eff, prior_mean=prior_mean)
    return x_hat, per_symbol_distortion(f_bar, rho_d, sigma_e2, noise_var)


# ---------------------------------------------------------------- rates and power

def expected_distortion(rho_d: float, sigma_e2: float, noise_var: float, M: int,
                        n_mc: int = 100_000, seed=None) -> tuple[float, float]:
    """Monte-Carlo ``E[1 / (1 + c ||f_bar||^2)]`` and its standard error.

    Entries of ``f_bar`` are CN(0, M - sigma_e2): the equivalent channel has
    per-entry energy ``M`` and the MMSE estimate keeps all but the error.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    c = distortion_coefficient(rho_d, sigma_e2, noise_var)
    if c == 0:
        return 1.0, 0.0
    var = max(M - sigma_e2, 0.0)
    f = crandn(as_generator(seed), (n_mc, M), var)
    v = per_symbol_distortion(f, rho_d, sigma_e2, noise_var)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0


def _gain_draws(M: int, n_mc: int, seed) -> np.ndarray:
    return np.sum(np.abs(crandn(as_generator(seed), (n_mc, M))) ** 2, axis=1)


def rate_static(rho_p, rho_d, M, L_ts, noise_var, n_mc=100_000, seed=None) -> float:
    """Pilot-phase plus data-phase rate of a device with known CSI, bits per channel use."""
    if rho_p == 0 and rho_d == 0:
        return 0.0
    g = _gain_draws(M, n_mc, seed)
    with np.errstate(divide="ignore"):
        a = np.mean(np.log2(1 + rho_p * g / (M * noise_var)))
        b = np.mean(np.log2(1 + rho_d * g / (M * noise_var)))
    return float(M / L_ts * a + (L_ts - M) / L_ts * b)


def gamma_eff(rho_p, rho_d, M, noise_var) -> float:
    return rho_d * (noise_var + M * rho_p) / (noise_var * (noise_var + M * rho_p + M * rho_d))


def rate_dynamic(rho_p, rho_d, M, L_ts, noise_var, n_mc=100_000, seed=None) -> float:
    """Data-phase rate of a device decoding with the equivalent-channel estimate."""
    if L_ts <= M:
        return 0.0
    s2 = estimation_error_variance(M, rho_p, noise_var) if rho_p > 0 else float(M)
    c = distortion_coefficient(rho_d, s2, noise_var)
    f = crandn(as_generator(seed), (n_mc, M), max(M - s2, 0.0))
    gain = np.sum(np.abs(f) ** 2, axis=1)
    with np.errstate(invalid="ignore"):
        r = np.mean(np.log2(1 + c * gain))
    return float((L_ts - M) / L_ts * r)


def reciprocal_snr(rho_d, rho, M, L_ts, noise_var):
    """Objective minimized by the power split (reciprocal effective SNR on the budget line)."""
    c = rho * L_ts / M
    return noise_var / rho_d + noise_var * M / (noise_var + M * (c - rho_d * (L_ts - M)))


def optimal_power_split(rho: float, M: int, L_ts: int, noise_var: float) -> tuple[float, float]:
    """Pilot/data powers maximizing the dynamic-device effective SNR on the budget line."""
    if L_ts <= M:
        raise InfeasibleGeometry(f"L_ts = {L_ts} must exceed M = {M}")
    if rho <= 0:
        raise ValueError("rho must be positive")
    r = np.sqrt(L_ts - M)
    rho_d = (noise_var + rho * L_ts) / (M * r * (1 + r))
    rho_p = rho * L_ts / M - rho_d * (L_ts - M)
    if rho_p <= 0:
        raise NegativePilotPower(f"pilot power {rho_p:.4g} <= 0 for rho={rho}, M={M}, L_ts={L_ts}")
    return float(rho_p), float(rho_d)


# ---------------------------------------------------------------- per-round broadcast

@dataclass(frozen=True)
class DownlinkPowers:
    """Per-antenna slot powers.

    ``rho_p``/``rho_d`` are the superposed pilot and data-symbol powers.
    Orthogonal and additive data slots use ``M * rho_d`` per antenna; the
    additive pilot slot splits ``rho_p`` into a pilot part and a data part in
    proportion ``rho_p : M rho_d``.
    """

    rho_p: float
    rho_d: float
    M: int
    rho: float

    @property
    def rho_data_slot(self) -> float:
        return self.M * self.rho_d

    @property
    def additive_split(self) -> tuple[float, float]:
        w = self.rho_p / (self.rho_p + self.M * self.rho_d)
        return w * self.rho_p, (1 - w) * self.rho_p


def scheme_powers(rho: float, M: int, L_ts: int | None, noise_var: float) -> DownlinkPowers:
    if L_ts is None:
        return DownlinkPowers(rho_p=0.0, rho_d=rho / M, M=M, rho=rho)
    rp, rd = optimal_power_split(rho, M, L_ts, noise_var)
    return DownlinkPowers(rho_p=rp, rho_d=rd, M=M, rho=rho)


@dataclass(frozen=True)
class SymbolMap:
    """Amplitude map from model entries to unit-energy real symbols (round metadata)."""

    scale: float
    offset: float
    kappa: float
    M: int

    @classmethod
    def fit(cls, theta: np.ndarray, M: int) -> "SymbolMap":
        theta = np.asarray(theta, dtype=float)
        rms = float(np.sqrt(np.mean(theta ** 2))) if theta.size else 0.0
        scale = rms if rms > 0 else 1.0
        u = theta / scale
        peak = float(np.max(np.abs(u))) if u.size else 0.0
        offset = 2.0 * peak if peak > 0 else 1.0
        kappa = float(np.sqrt(M / np.mean((u + offset) ** 2)))
        return cls(scale=scale, offset=offset, kappa=kappa, M=M)

    def to_unit(self, theta):
        return np.asarray(theta, dtype=float) / self.scale

    def embed(self, u):
        return self.kappa * (np.asarray(u) + self.offset)

    def unembed(self, p):
        return np.asarray(p) / self.kappa - self.offset


@dataclass
class Reception:
    """What one device recovered in one round."""

    values: np.ndarray     # decoded model entries (NaN where not received)
    mask: np.ndarray       # received coordinates
    v_mean: float          # mean per-symbol distortion over received data blocks (0 if none)

    @property
    def q(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 1.0


def _channel_grid(real: ChannelRealization, rows: int, N: int) -> np.ndarray:
    p = real.profile
    it = tile_index(np.arange(rows), p.L_t, p.offset_t)
    jf = tile_index(np.arange(N), p.L_f, p.offset_f)
    return real.h[it][:, jf]


def _tile_bounds(n, L_t, offset):
    """First and last row of the tile containing each row ``n``."""
    idx = tile_index(n, L_t, offset)
    first = offset + (idx - (1 if offset > 0 else 0)) * L_t
    first = np.maximum(first, 0)
    last = offset + (idx + (0 if offset > 0 else 1)) * L_t - 1
    return first, last


class Broadcast:
    """Transmit one round's model and decode it at each device.

    Build once per round (the transmitted grid is common to all devices), then
    call :meth:`deliver` per device.
    """

    def __init__(self, theta, geometry: SuperBlockGeometry, placement: PlacementMap,
                 powers: DownlinkPowers, noise_var: float):
        g = geometry
        if g.M > MAX_GRID_ANTENNAS:
            raise ValueError(f"symbol-level grid simulation supports M <= {MAX_GRID_ANTENNAS}")
        self.g, self.pl, self.pw = g, placement, powers
        self.noise_var = float(noise_var)
        self.theta = np.asarray(theta, dtype=float)
        self.smap = SymbolMap.fit(self.theta, g.M)
        self.U = dft_pilot(g.M)
        self._build()

    def _build(self):
        g, pl, pw = self.g, self.pl, self.pw
        M, L, P, q, N = g.M, g.L_ts, g.pilot_rows, g.q, g.N
        u = self.smap.to_unit(self.theta)
        self.u = u
        # symbol values on the (row, subcarrier, stream) grid
        V = np.zeros((q * L, N, M))
        on_grid = pl.kind != PILOT_EMBEDDED
        V[pl.n[on_grid], pl.m[on_grid], pl.stream[on_grid]] = u[on_grid]
        V = V.reshape(q, L, N, M).transpose(0, 2, 1, 3)            # (q, N, L, M)
        X = np.zeros((q, N, L, M), dtype=complex)
        layout = g.layout if P else BASELINE
        self.layout = layout
        if layout == SUPERPOSED:
            pe = pl.kind == PILOT_EMBEDDED
            pvec = np.full((q, N, M), self.smap.embed(0.0))
            pvec[pl.subblock[pe], pl.m[pe], pl.stream[pe]] = self.smap.embed(u[pe])
            self.pvec = pvec
            self.p_prior = (float(self.smap.embed(np.mean(u))), float(self.smap.kappa ** 2 * np.var(u)) + 1e-12)
            X[:, :, :P, :] = np.sqrt(pw.rho_p) * pvec[:, :, None, :] * self.U.T[None, None]
            X[:, :, P:, :] = np.sqrt(pw.rho_d) * pvec[:, :, None, :] * V[:, :, P:, :]
        else:
            xp = np.sqrt(M) * self.U.T                                # row j = pilot vector of slot j
            if P:
                if layout == ADDITIVE:
                    rpa, rda = pw.additive_split
                    X[:, :, :P, :] = np.sqrt(rpa) * xp[None, None] + np.sqrt(rda) * V[:, :, :P, :]
                else:
                    X[:, :, :P, :] = np.sqrt(pw.rho_p) * xp[None, None]
            X[:, :, P:, :] = np.sqrt(pw.rho_data_slot) * V[:, :, P:, :]
        self.X = X

    # -- helpers
    def _symbols_from_blocks(self, est, ok):
        """Gather per-symbol values from ``est[q, N, L, M]`` and block flags ``ok[q, N, L]``."""
        pl = self.pl
        L = self.g.L_ts
        row = pl.n - pl.subblock * L
        vals = est[pl.subblock, pl.m, row, pl.stream]
        mask = ok[pl.subblock, pl.m, row]
        return vals, mask

    def deliver(self, real: ChannelRealization, rng, static_csi: bool | None = None,
                ideal: bool = False, prior=None) -> Reception:
        """Receive and decode at one device.

        ``static_csi`` defaults to the profile class: devices with known CSI
        decode every slot, including pilot-embedded symbols. ``prior`` is the
        device's current local model; when given, the symbol estimators shrink
        toward it instead of toward zero.
        """
        g, pw = self.g, self.pw
        M, L, P, q, N = g.M, g.L_ts, g.pilot_rows, g.q, g.N
        prof = real.profile
        known = prof.is_static if static_csi is None else static_csi
        s = g.s
        if ideal:
            return Reception(self.theta.copy(), np.ones(s, dtype=bool), 0.0)
        H = _channel_grid(real, q * L, N).reshape(q, L, N, M).transpose(0, 2, 1, 3)  # (q, N, L, M)
        rng = as_generator(rng)
        y = np.einsum("qnlm,qnlm->qnl", np.conj(H), self.X)
        y = y + crandn(rng, y.shape, self.noise_var)
        est = np.zeros((q, N, L, M))
        ok = np.zeros((q, N, L), dtype=bool)
        Vp, pp = self._prior_grid(prior)
        v_sum, v_cnt = 0.0, 0
        nv = self.noise_var
        if known:
            gH = np.conj(H)                                           # (q, N, L, M)
            if self.layout == SUPERPOSED:
                z = y[:, :, :P] @ np.conj(self.U).T / np.sqrt(pw.rho_p)   # (q, N, M)
                g0 = gH[:, :, 0, :]
                if nv == 0:
                    p_hat = np.real(z / np.where(np.abs(g0) < GAIN_FLOOR, GAIN_FLOOR, g0))
                else:
                    p_hat = real_scalar_lmmse(z, g0, nv / pw.rho_p, pp, self.p_prior[1])
                xd = real_lmmse(y[:, :, P:], np.sqrt(pw.rho_d) * g0 * p_hat, nv,
                                prior_mean=np.swapaxes(Vp[:, :, P:, :], -1, -2))   # (q, N, M, L-P)
                est[:, :, P:, :] = np.swapaxes(xd, -1, -2)
                # pilot-embedded symbols live on the diagonal: stream j in slot j
                for j in range(P):
                    est[:, :, j, j] = self.smap.unembed(p_hat[:, :, j])
                ok[:] = True
            else:
                rd = pw.rho_data_slot
                yy = y.copy()
                amp = np.full(L, np.sqrt(rd))
                if P and self.layout == ADDITIVE:
                    rpa, rda = pw.additive_split
                    xp = np.sqrt(M) * self.U.T
                    yy[:, :, :P] -= np.sqrt(rpa) * np.einsum("qnlm,lm->qnl", gH[:, :, :P, :], xp)
                    amp[:P] = np.sqrt(rda)
                # every slot has its own known channel row
                xd = real_lmmse(yy[..., None], amp[None, None, :, None] * gH, nv,
                                prior_mean=Vp[..., None])                               # (q,N,L,M,1)
                est[:] = xd[..., 0]
                ok[:, :, P:] = True
                if self.layout == ADDITIVE:
                    ok[:, :, :P] = True
            vals, mask = self._symbols_from_blocks(est, ok)
            return self._finish(vals, mask, 0.0)

        if not P:
            raise ValueError("a device without CSI needs a pilot phase")
        if self.layout == SUPERPOSED:
            rows = np.arange(q) * L
            whole = tile_index(rows, prof.L_t, prof.offset_t) == tile_index(rows + L - 1, prof.L_t, prof.offset_t)
            if not whole.any():
                return self._finish(np.zeros(s), np.zeros(s, dtype=bool), 0.0)
            ce = estimate_equivalent_channel(y[:, :, :P], self.U, pw.rho_p, nv)
            xd, v = decode_dynamic(y[:, :, P:], ce.f_bar, pw.rho_d, ce.sigma_e2, nv,
                                   prior_mean=np.swapaxes(Vp[:, :, P:, :], -1, -2))
            est[:, :, P:, :] = np.swapaxes(xd, -1, -2)
            ok[:, :, P:] = whole[:, None, None]
            blocks = np.broadcast_to(whole[:, None], v.shape)
            v_sum, v_cnt = float(v[blocks].sum()), int(blocks.sum())
        else:
            # orthogonal / additive pilots: a data slot is usable when its tile
            # also holds a complete pilot group on the same subcarrier
            if self.layout == ADDITIVE:
                rpa, rda = pw.additive_split
                ipn = (rda * M + nv) / (M * rpa)
            else:
                rpa, rda = pw.rho_p, 0.0
                ipn = nv / (M * rpa)
            shrink = 1.0 / (1.0 + ipn)
            e2 = ipn * shrink
            z = y[:, :, :P] @ np.conj(self.U).T / np.sqrt(M * rpa)   # (q, N, M) noisy conj(h)
            g_hat = shrink * z
            rows = np.arange(q * L)
            first, last = _tile_bounds(rows, prof.L_t, prof.offset_t)
            gmin = -(-first // L)
            gmax = (last - P + 1) // L
            gmin = np.maximum(gmin, 0)
            gmax = np.minimum(gmax, q - 1)
            has = gmin <= gmax
            sb = rows // L
            grp = np.where(has, np.clip(sb, gmin, gmax), sb)
            G = g_hat[grp.reshape(q, L)]                              # (q, L, N, M)
            G = G.transpose(0, 2, 1, 3)                               # (q, N, L, M)
            xp = np.sqrt(M) * self.U.T
            yy = y.copy()
            amp = np.full(L, np.sqrt(pw.rho_data_slot))
            noise = np.full(L, nv + pw.rho_data_slot * M * e2)
            if self.layout == ADDITIVE:
                yy[:, :, :P] -= np.sqrt(rpa) * np.einsum("qnlm,lm->qnl", G[:, :, :P, :], xp)
                amp[:P] = np.sqrt(rda)
                noise[:P] = nv + M * e2 * (rpa + rda)
            xd = real_lmmse(yy[..., None], amp[None, None, :, None] * G, noise[None, None, :],
                            prior_mean=Vp[..., None])
            est[:] = xd[..., 0]
            okr = has.reshape(q, L)
            ok[:] = okr[:, None, :]
            if self.layout == BASELINE:
                ok[:, :, :P] = False
            # report the distortion coefficient of the data slots
            c = distortion_coefficient(pw.rho_data_slot, M * e2, nv)
            v = 1.0 / (1.0 + c * np.sum(np.abs(G[:, :, P:, :]) ** 2, axis=-1))
            used = np.broadcast_to(okr[:, None, P:], v.shape)
            v_sum, v_cnt = float(v[used].sum()), int(used.sum())
        vals, mask = self._symbols_from_blocks(est, ok)
        return self._finish(vals, mask, v_sum / v_cnt if v_cnt else 0.0)

    def _prior_grid(self, prior):
        """Prior symbol means on the grid and for the pilot-embedded diagonal."""
        g, pl = self.g, self.pl
        q, L, N, M = g.q, g.L_ts, g.N, g.M
        if prior is None:
            return np.zeros((q, N, L, M)), (self.p_prior[0] if self.layout == SUPERPOSED else 0.0)
        pu = self.smap.to_unit(prior)
        V = np.zeros((q * L, N, M))
        on_grid = pl.kind != PILOT_EMBEDDED
        V[pl.n[on_grid], pl.m[on_grid], pl.stream[on_grid]] = pu[on_grid]
        V = V.reshape(q, L, N, M).transpose(0, 2, 1, 3)
        pp = 0.0
        if self.layout == SUPERPOSED:
            pe = pl.kind == PILOT_EMBEDDED
            pp = np.full((q, N, M), self.smap.embed(0.0))
            pp[pl.subblock[pe], pl.m[pe], pl.stream[pe]] = self.smap.embed(pu[pe])
        return V, pp

    def _finish(self, vals, mask, v_mean):
        theta_hat = np.where(mask, vals * self.smap.scale, np.nan)
        return Reception(theta_hat, mask, float(v_mean))
