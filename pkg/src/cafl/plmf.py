"""Local-model reconstruction from partial reception.

With previous-local-model filling a device keeps its stale value for any
coordinate it missed this round. Zero filling is the naive alternative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import HistoryTooShort


@dataclass(frozen=True)
class LocalModelState:
    theta_hat: np.ndarray
    zeta: np.ndarray           # round of last refresh, per coordinate
    refresh_error: np.ndarray  # theta_hat - theta at the refresh round

    @classmethod
    def initial(cls, theta0, t0: int = 0) -> "LocalModelState":
        theta0 = np.array(theta0, dtype=float)
        d = theta0.shape[0]
        return cls(theta0, np.full(d, t0, dtype=np.int64), np.zeros(d))


def _check(state, mask, received):
    mask = np.asarray(mask, dtype=bool)
    received = np.asarray(received, dtype=float)
    d = state.theta_hat.shape[0]
    if mask.shape != (d,) or received.shape != (d,):
        raise ValueError(f"expected length-{d} mask and values, got {mask.shape} and {received.shape}")
    return mask, received


def apply_plmf(state: LocalModelState, mask, received, t: int, theta=None) -> LocalModelState:
    """Overwrite received coordinates, keep the rest.

    ``received`` holds the decoded values (ignored where ``mask`` is False).
    ``theta`` is the true broadcast model, used only to book-keep the decoding
    error of refreshed coordinates.
    """
    mask, received = _check(state, mask, received)
    hat = np.where(mask, received, state.theta_hat)
    err = state.refresh_error
    if theta is not None:
        err = np.where(mask, received - np.asarray(theta, dtype=float), err)
    return LocalModelState(hat, np.where(mask, t, state.zeta).astype(np.int64), err)


def zero_fill(state: LocalModelState, mask, received, t: int, theta=None) -> LocalModelState:
    mask, received = _check(state, mask, received)
    hat = np.where(mask, received, 0.0)
    err = np.zeros_like(hat) if theta is None else np.where(mask, received - np.asarray(theta, float), 0.0)
    return LocalModelState(hat, np.where(mask, t, state.zeta).astype(np.int64), err)


class GlobalHistory:
    """Global models by round, trimmed to the oldest round still referenced."""

    def __init__(self):
        self._models: dict[int, np.ndarray] = {}

    def record(self, t: int, theta) -> None:
        self._models[int(t)] = np.array(theta, dtype=float)

    def get(self, t: int) -> np.ndarray:
        try:
            return self._models[int(t)]
        except KeyError:
            raise HistoryTooShort(f"round {t} no longer in history") from None

    def prune(self, oldest_needed: int) -> None:
        for t in [t for t in self._models if t < oldest_needed]:
            del self._models[t]

    def __len__(self):
        return len(self._models)

    @property
    def rounds(self):
        return sorted(self._models)


def drift(state: LocalModelState, history: GlobalHistory, t: int, check: bool = True) -> np.ndarray:
    """``theta(t) - theta_hat`` per coordinate.

    Computed directly and, when ``check`` is set, again as the sum of global
    increments since each coordinate's refresh minus the decoding error
    recorded at refresh. The two must agree to 1e-12 relative.
    """
    now = history.get(t)
    direct = now - state.theta_hat
    if not check:
        return direct
    tele = np.zeros_like(direct)
    lo = int(state.zeta.min())
    prev = history.get(lo)
    for r in range(lo + 1, t + 1):
        cur = history.get(r)
        tele += np.where(state.zeta < r, cur - prev, 0.0)
        prev = cur
    tele -= state.refresh_error
    scale = max(1.0, float(np.max(np.abs(now))), float(np.max(np.abs(state.theta_hat))))
    if not np.allclose(direct, tele, rtol=0, atol=1e-12 * scale * max(1, t - lo)):
        raise AssertionError("drift telescoping identity violated")
    return direct
