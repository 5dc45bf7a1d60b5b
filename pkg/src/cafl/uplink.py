"""Over-the-air uplink aggregation with clipped channel inversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PowerBudgetExceeded
from .rng import as_generator, crandn


def partition_coordinates(d: int, P: int) -> list[np.ndarray]:
    """Contiguous blocks of ``ceil(d / P)`` coordinates (the last may be shorter)."""
    if d < 1 or P < 1:
        raise ValueError("d and P must be positive")
    size = -(-d // P)
    return [np.arange(a, min(a + size, d)) for a in range(0, d, size)]


def combiner(M: int, mode: str = "first", strongest=None) -> np.ndarray:
    """Unit-norm receive combiner ``u_p``."""
    if mode == "first":
        u = np.zeros(M, dtype=complex)
        u[0] = 1.0
        return u
    if mode == "strongest":
        v = np.asarray(strongest, dtype=complex)
        return v / np.linalg.norm(v)
    raise ValueError(f"unknown combiner mode {mode!r}")


def uplink_channel_estimate(h_true, rho_tau: float, noise_var: float, seed=None):
    """MMSE estimate of an uplink channel from one pilot of power ``rho_tau``.

    Returns ``(h_hat, error_variance)`` with error variance
    ``noise_var / (rho_tau + noise_var)`` per entry.
    """
    h_true = np.asarray(h_true, dtype=complex)
    if noise_var == 0:
        return h_true.copy(), 0.0
    obs = np.sqrt(rho_tau) * h_true + crandn(as_generator(seed), h_true.shape, noise_var)
    h_hat = np.sqrt(rho_tau) / (rho_tau + noise_var) * obs
    return h_hat, noise_var / (rho_tau + noise_var)


@dataclass(frozen=True)
class Precoder:
    g: complex          # effective scalar channel the device inverts (estimated)
    mu: float
    beta: float

    @property
    def chi(self) -> float:
        a = abs(self.g)
        return a / max(a, self.mu)

    @property
    def alpha(self) -> complex:
        return self.beta * np.exp(-1j * np.angle(self.g)) / max(abs(self.g), self.mu)


def precode(increment, mask, a_k: float, pre: Precoder, rho_u: float, budget: float | None = None):
    """Transmit symbols ``sqrt(rho_u) alpha a_k [D dtheta]_i`` for one sub-block.

    Masked coordinates are exact zeros. If ``budget`` is given and the average
    symbol power exceeds it, :class:`PowerBudgetExceeded` is raised.
    """
    if pre.beta <= 0 or pre.mu <= 0:
        raise ValueError("beta and mu must be positive")
    x = np.where(np.asarray(mask, dtype=bool), np.asarray(increment, dtype=float), 0.0)
    out = np.sqrt(rho_u) * pre.alpha * a_k * x
    if budget is not None and out.size and np.mean(np.abs(out) ** 2) > budget * (1 + 1e-9):
        raise PowerBudgetExceeded(f"average symbol power {np.mean(np.abs(out) ** 2):.4g} > {budget:.4g}")
    return out


def choose_beta(g_hats, mus, a, increments, budgets, rho_u: float) -> float:
    """Largest common ``beta`` meeting every device's average power budget.

    ``increments[k]`` are device ``k``'s (masked) values on this sub-block's
    coordinates. Devices with zero increment energy impose no limit; if all are
    zero, 1 is returned.
    """
    best = np.inf
    for g, mu, ak, inc, P in zip(g_hats, mus, a, increments, budgets):
        e = float(np.sum(np.asarray(inc, dtype=float) ** 2))
        if e <= 0 or ak == 0:
            continue
        n = len(inc)
        amp = max(abs(g), mu)
        best = min(best, np.sqrt(P * n * amp ** 2 / (rho_u * ak ** 2 * e)))
    return 1.0 if not np.isfinite(best) else float(best)


def ota_aggregate(transmissions, channels, u, noise_var: float, seed=None) -> np.ndarray:
    """Combine simultaneous transmissions: ``r = u^H sum_k h_k x_k + z``.

    ``transmissions[k]`` is a length-``n`` symbol vector, ``channels[k]`` the
    length-``M`` uplink channel of device ``k``.
    """
    u = np.asarray(u, dtype=complex)
    n = len(transmissions[0]) if len(transmissions) else 0
    r = np.zeros(n, dtype=complex)
    for x, h in zip(transmissions, channels):
        r += np.vdot(u, np.asarray(h, dtype=complex)) * np.asarray(x)
    return r + crandn(as_generator(seed), (n,), noise_var * float(np.vdot(u, u).real))


def estimate_update(r, rho_u: float, beta: float) -> np.ndarray:
    if beta <= 0:
        raise ValueError("beta must be positive")
    return np.asarray(r) / (np.sqrt(rho_u) * beta)


def post_scaling_noise_variance(noise_var: float, rho_u: float, beta: float) -> float:
    return noise_var / (rho_u * beta ** 2)


@dataclass
class UplinkResult:
    update: np.ndarray       # real part of the stacked estimate
    betas: np.ndarray
    noise_var: np.ndarray    # complex post-scaling noise variance per sub-block
    chi: np.ndarray          # (devices, sub-blocks)


def aggregate_round(increments, masks, a, g_hats, h_true, blocks, *, rho_u: float, noise_var: float,
                    mu: float, rng, budgets=None, u=None) -> UplinkResult:
    """Run every uplink sub-block of one round.

    ``g_hats[k][p]`` is the effective scalar channel (estimated) used for
    precoding and ``h_true[k][p]`` the true channel vector of device ``k`` in
    sub-block ``p``.
    """
    rng = as_generator(rng)
    K = len(increments)
    d = len(increments[0])
    M = len(h_true[0][0])
    u = combiner(M) if u is None else u
    budgets = [rho_u] * K if budgets is None else budgets
    out = np.zeros(d)
    betas = np.ones(len(blocks))
    nvs = np.zeros(len(blocks))
    chis = np.ones((K, len(blocks)))
    for p, idx in enumerate(blocks):
        inc = [np.where(masks[k][idx], increments[k][idx], 0.0) for k in range(K)]
        beta = choose_beta([g_hats[k][p] for k in range(K)], [mu] * K, a, inc, budgets, rho_u)
        xs = []
        for k in range(K):
            pre = Precoder(g_hats[k][p], mu, beta)
            chis[k, p] = pre.chi
            xs.append(precode(inc[k], np.ones(len(idx), bool), a[k], pre, rho_u))
        r = ota_aggregate(xs, [h_true[k][p] for k in range(K)], u, noise_var, rng)
        out[idx] = estimate_update(r, rho_u, beta).real
        betas[p] = beta
        nvs[p] = post_scaling_noise_variance(noise_var, rho_u, beta)
    return UplinkResult(out, betas, nvs, chis)
