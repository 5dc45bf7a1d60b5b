"""Federated training loop over the simulated downlink and uplink.

One round: schedule devices, broadcast the global model, rebuild local
models (stale or zero filling), run local SGD, aggregate increments over the
air, update the global model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import DYNAMIC, STATIC, CoherenceProfile, sample_channel
from .config import ScenarioConfig
from .downlink import Broadcast, scheme_powers
from .errors import BoundPreconditionError, ConfigError
from .grid import build_superblock, place
from .plmf import GlobalHistory, LocalModelState, apply_plmf, zero_fill
from .rng import DOWNLINK, REPLICA, SGD, STATIC_UL, UPLINK, PROFILE, crandn, substream
from .scheduler import Roster, aggregation_weights, normalized_comm_cost, schedule_round
from .tasks import Task, build_task
from .uplink import aggregate_round, combiner, partition_coordinates, uplink_channel_estimate

STATIC_TILE = 1 << 30


def local_sgd(task: Task, k: int, theta_hat, tau: int, step: float, batch: int, seed) -> np.ndarray:
    """Run ``tau`` minibatch SGD steps from ``theta_hat`` on shard ``k``; return the increment."""
    if tau < 1 or step <= 0:
        raise ValueError("tau must be >= 1 and the step positive")
    n = task.shard_size(k)
    if n < 1:
        raise ValueError(f"device {k} has an empty shard")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta = np.array(theta_hat, dtype=float)
    for _ in range(tau):
        idx = rng.choice(n, size=batch, replace=False) if batch < n else None
        theta -= step * task.device_grad(k, theta, idx)
    return theta - theta_hat


def build_roster(cfg: ScenarioConfig, shard_sizes=None) -> Roster:
    """Static devices get one tile for the whole round; dynamic coherence times span
    ``[L_ts, (1 + spread) L_ts]`` with the first candidate pinned to ``L_ts`` and aligned."""
    rng = substream(cfg.profile_seed, PROFILE)
    statics = tuple(CoherenceProfile(i, STATIC_TILE, STATIC_TILE, STATIC) for i in range(cfg.K_S))
    n_cand = cfg.dynamic_candidates if cfg.dynamic_candidates is not None else cfg.K_D
    dyn = []
    L = cfg.L_ts
    for j in range(n_cand):
        did = cfg.K_S + j
        if L is None:
            dyn.append(CoherenceProfile(did, STATIC_TILE, STATIC_TILE, STATIC))
            continue
        hi = int(round((1 + cfg.coherence_spread) * L))
        if j == 0:
            Lt, off = L, 0
        else:
            Lt = int(rng.integers(L, hi + 1))
            off = int(rng.integers(0, Lt)) if cfg.random_offsets else 0
        dyn.append(CoherenceProfile(did, Lt, STATIC_TILE, DYNAMIC, offset_t=off))
    return Roster(statics, tuple(dyn), dict(shard_sizes or {}))


@dataclass
class RoundReport:
    t: int
    loss: float                 # F(theta(t+1))
    dist_sq: float              # ||theta(t+1) - theta*||^2 (nan if unknown)
    acc: float
    grad_sq: float              # ||grad F(theta(t))||^2, pre-update
    avg_gap: float              # F(mean of theta(1..t)) - F*
    comm_cost: float            # cumulative normalized communication units
    cost_round: float
    sigma_ul2: float            # mean post-scaling uplink noise variance this round
    eta: float
    q: list = field(default_factory=list)
    v: list = field(default_factory=list)
    census: tuple = (0, 0, 0)
    drift_max2: float = 0.0


@dataclass
class RoundOutcome:
    update: np.ndarray
    states: list
    masks: list
    increments: list
    receptions: list
    sigma_ul2: float
    eta: float


class Simulator:
    """Stateful per-seed simulation of a scenario."""

    def __init__(self, cfg: ScenarioConfig, seed: int, task: Task | None = None):
        cfg.validate()
        self.cfg, self.seed = cfg, int(seed)
        self.task = task if task is not None else build_task(cfg.task, cfg.K)
        if self.task.K != cfg.K:
            raise ConfigError(f"task has {self.task.K} shards but the scenario schedules {cfg.K} devices")
        self.d = self.task.d
        self.roster = build_roster(cfg)
        self.scheduled = schedule_round(self.roster, cfg.K_D)
        self.a = np.array([self.task.a[j] for j in range(cfg.K)], dtype=float)
        self.a = self.a / self.a.sum()
        self.ideal = cfg.channel == "ideal"
        self.blocks = partition_coordinates(self.d, cfg.uplink_blocks)
        if not self.ideal:
            if cfg.M > 2:
                raise ConfigError("the symbol-level simulator supports M <= 2")
            self.geometry, _ = build_superblock(self.scheduled, self.d, cfg.M, cfg.N_s, cfg.N, layout=cfg.layout)
            g = self.geometry
            self.powers = scheme_powers(cfg.rho, cfg.M, g.L_ts if g.pilot_rows else None, cfg.noise_var)
            self._placements = {}
            cap = g.capacity
            self._stride = _coprime_stride(cap) if cfg.rotate_placement else 0
            self.cost_round = normalized_comm_cost(g.census())
        else:
            self.cost_round = 1.0
        self.theta = np.array(self.task.theta0, dtype=float)
        self.states = [LocalModelState.initial(self.theta, 0) for _ in self.scheduled]
        self.history = GlobalHistory()
        self.history.record(0, self.theta)
        self.history.record(1, self.theta)
        self.t = 1
        self.cost = 0.0
        self._theta_sum = np.zeros(self.d)
        self._ul_cache = {}

    # ------------------------------------------------------------ helpers
    def eta(self, t: int) -> float:
        return self.cfg.step.eta_at(t, self.task.mu)

    def _rng(self, t, j, purpose, rep=None):
        if rep is None:
            return substream(self.seed, t, j, purpose)
        return substream(self.seed, t, j, purpose, REPLICA, rep)

    def placement(self, t: int):
        g = self.geometry
        rot = ((t - 1) * self._stride) % g.capacity
        if rot not in self._placements:
            self._placements[rot] = place(g, rot)
        return self._placements[rot]

    def _static_uplink(self, t, j):
        epoch = (t - 1) // self.cfg.static_refresh
        key = (epoch, j)
        if key not in self._ul_cache:
            rng = substream(self.seed, epoch, j, STATIC_UL)
            h = crandn(rng, (self.cfg.M,))
            hh, _ = uplink_channel_estimate(h, self.cfg.rho_tau, self.cfg.noise_var, rng)
            self._ul_cache = {k: v for k, v in self._ul_cache.items() if k[0] >= epoch}
            self._ul_cache[key] = (h, hh)
        return self._ul_cache[key]

    # ------------------------------------------------------------ one round
    def compute_round(self, t: int, rep=None, dl_ideal=False, ul_ideal=False) -> RoundOutcome:
        """Evaluate round ``t`` from the current state without committing it."""
        cfg, task = self.cfg, self.task
        eta = self.eta(t)
        K = len(self.scheduled)
        fill = zero_fill if cfg.fill == "zf" else apply_plmf
        states, masks, recs = [], [], []
        if self.ideal or dl_ideal:
            full = np.ones(self.d, dtype=bool)
            for st in self.states:
                states.append(apply_plmf(st, full, self.theta, t, self.theta))
                masks.append(full)
        else:
            g = self.geometry
            b = Broadcast(self.theta, g, self.placement(t), self.powers, cfg.noise_var)
            for j, prof in enumerate(self.scheduled):
                rng = self._rng(t, j, DOWNLINK, rep)
                ch = sample_channel(prof, g, rng, cfg.noise_var)
                rec = b.deliver(ch, rng, prior=self.states[j].theta_hat)
                vals = np.where(rec.mask, rec.values, 0.0)
                states.append(fill(self.states[j], rec.mask, vals, t, self.theta))
                masks.append(rec.mask)
                recs.append(rec)
        incs = [local_sgd(task, j, states[j].theta_hat, cfg.tau, eta / cfg.tau, cfg.batch,
                          self._rng(t, j, SGD, rep)) for j in range(K)]
        sigma_ul2 = 0.0
        if self.ideal or ul_ideal:
            update = np.zeros(self.d)
            for j in range(K):
                update += self.a[j] * np.where(masks[j], incs[j], 0.0)
        else:
            P = len(self.blocks)
            h_true, g_hat = [], []
            est = []
            for j, prof in enumerate(self.scheduled):
                if prof.is_static:
                    h, hh = self._static_uplink(t, j)
                    hs, hhs = [h] * P, [hh] * P
                else:
                    rng = self._rng(t, j, UPLINK, rep)
                    hs = list(crandn(rng, (P, cfg.M)))
                    hhs = [uplink_channel_estimate(h, cfg.rho_tau, cfg.noise_var, rng)[0] for h in hs]
                h_true.append(hs)
                est.append(hhs)
            us = []
            for p in range(P):
                if cfg.combiner == "strongest":
                    best = max(range(K), key=lambda j: np.linalg.norm(est[j][p]))
                    us.append(combiner(cfg.M, "strongest", est[best][p]))
                else:
                    us.append(combiner(cfg.M))
            g_hat = [[complex(np.vdot(us[p], est[j][p])) for p in range(P)] for j in range(K)]
            res = _aggregate_blocks(incs, masks, self.a, g_hat, h_true, self.blocks, us, cfg,
                                    self._rng(t, K, UPLINK, rep))
            update = res[0]
            sigma_ul2 = res[1]
        return RoundOutcome(update, states, masks, incs, recs, sigma_ul2, eta)

    def step(self) -> RoundReport:
        t = self.t
        task = self.task
        theta_t = self.theta
        out = self.compute_round(t)
        self._theta_sum += theta_t
        grad_sq = float(np.sum(task.grad(theta_t) ** 2))
        self.states = out.states
        self.theta = theta_t + out.update
        self.history.record(t + 1, self.theta)
        drift2 = self._track_drift(t + 1)
        self.cost += self.cost_round
        avg = self._theta_sum / t
        loss = task.loss(self.theta)
        ts = task.theta_star
        rep = RoundReport(
            t=t, loss=loss,
            dist_sq=float(np.sum((self.theta - ts) ** 2)) if ts is not None else float("nan"),
            acc=task.accuracy(self.theta) if task.classification else float("nan"),
            grad_sq=grad_sq, avg_gap=task.loss(avg) - task.F_star,
            comm_cost=self.cost, cost_round=self.cost_round, sigma_ul2=out.sigma_ul2, eta=out.eta,
            q=[float(m.mean()) for m in out.masks],
            v=[r.v_mean for r in out.receptions],
            census=self._census(), drift_max2=drift2)
        self.t += 1
        return rep

    def _census(self):
        if self.ideal:
            return (0, 0, 0)
        c = self.geometry.census()
        return (c.pilot, c.data, c.superposed)

    def _track_drift(self, t_now: int) -> float:
        """Largest squared drift on stale coordinates; checks the telescoping identity."""
        if self.cfg.fill == "zf":
            self.history.prune(t_now)
            return 0.0
        lo = min(int(st.zeta.min()) for st in self.states)
        H = np.stack([self.history.get(r) for r in range(lo, t_now + 1)])
        inc = np.diff(H, axis=0)
        rounds = np.arange(lo + 1, t_now + 1)
        now = H[-1]
        worst = 0.0
        for st in self.states:
            direct = now - st.theta_hat
            tele = (inc * (st.zeta[None, :] < rounds[:, None])).sum(axis=0) - st.refresh_error
            scale = max(1.0, float(np.abs(H).max()))
            if not np.allclose(direct, tele, rtol=0, atol=1e-12 * scale * len(rounds)):
                raise AssertionError("drift telescoping identity violated")
            stale = st.zeta < t_now - 1
            if stale.any():
                worst = max(worst, float(np.max(direct[stale] ** 2)))
        self.history.prune(lo)
        return worst

    def run(self, T: int | None = None) -> list[RoundReport]:
        T = self.cfg.T if T is None else T
        return [self.step() for _ in range(T)]


def _coprime_stride(n: int) -> int:
    from math import gcd
    s = max(1, int(round(0.618 * n)))
    while gcd(s, n) != 1:
        s += 1
    return s % n if n > 1 else 0


def _aggregate_blocks(incs, masks, a, g_hat, h_true, blocks, us, cfg, rng):
    """Uplink over all sub-blocks; each sub-block may have its own combiner."""
    d = len(incs[0])
    update = np.zeros(d)
    nvs = []
    for p, idx in enumerate(blocks):
        res = aggregate_round([x[idx] for x in incs], [m[idx] for m in masks], a,
                              [[g[p]] for g in g_hat], [[h[p]] for h in h_true], [np.arange(len(idx))],
                              rho_u=cfg.rho_u, noise_var=cfg.noise_var, mu=cfg.mu_clip, rng=rng, u=us[p])
        update[idx] = res.update
        nvs.append(res.noise_var[0])
    return update, float(np.mean(nvs))


def fedavg_reference(task: Task, cfg: ScenarioConfig, seed: int, T: int) -> list[np.ndarray]:
    """Plain federated averaging with the simulator's SGD streams; returns theta(2..T+1)."""
    theta = np.array(task.theta0, dtype=float)
    a = np.asarray(task.a, dtype=float)
    a = a / a.sum()
    out = []
    for t in range(1, T + 1):
        eta = cfg.step.eta_at(t, task.mu)
        update = np.zeros(task.d)
        for j in range(cfg.K):
            inc = local_sgd(task, j, theta, cfg.tau, eta / cfg.tau, cfg.batch, substream(seed, t, j, SGD))
            update += a[j] * np.where(np.ones(task.d, dtype=bool), inc, 0.0)
        theta = theta + update
        out.append(theta.copy())
    return out


# ------------------------------------------------------------------ bounds

@dataclass
class BoundConstants:
    L: float
    mu: float
    d: int
    sigma_g2: float
    sigma_ul2: float
    sigma_dl2: float
    B: float
    D2: float = 0.0
    q: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @property
    def Xi(self) -> float:
        return self.sigma_g2 + self.d * (self.sigma_ul2 + self.sigma_dl2)

    @property
    def C_err(self) -> float:
        return 2 * self.L * self.Xi + 4 * self.B


def combined_error(L: float, Xi: float, B: float) -> float:
    return 2 * L * Xi + 4 * B


def probe_rounds(T: int, n: int) -> list[int]:
    """Roughly log-spaced rounds in ``[1, T]``."""
    pts = np.unique(np.round(np.geomspace(1, T, n)).astype(int))
    return [int(p) for p in pts]


def measure_error_constants(cfg: ScenarioConfig, n_mc: int | None = None, probes=None,
                            seeds=None, task: Task | None = None) -> BoundConstants:
    """Monte-Carlo estimates of the error constants, in gradient units.

    At each probe round the simulator state is frozen and the round is
    replayed ``n_mc`` times with fresh channel, noise and minibatch draws.
    Each replicate is evaluated three ways with shared minibatches: the real
    pipeline, the same downlink with an ideal uplink, and ideal links both
    ways. Differences of the three give uplink noise, downlink error and the
    ideal update. Variances are divided by ``eta_t^2``; the bias is the mean
    update over ``-eta_t`` minus the true gradient (with the Monte-Carlo noise
    of the mean subtracted).
    """
    n_mc = cfg.bounds.n_mc if n_mc is None else n_mc
    if n_mc < 10:
        raise ValueError("n_mc must be >= 10")
    task = task if task is not None else build_task(cfg.task, cfg.K)
    seeds = list(cfg.seeds[:cfg.bounds.trajectories]) if seeds is None else list(seeds)
    probes = probe_rounds(cfg.T, cfg.bounds.probes) if probes is None else sorted(probes)
    ul, dl, sg = 0.0, 0.0, 0.0
    bias_by_round: dict[int, list] = {}
    D2 = 0.0
    q, v = [], []
    for seed in seeds:
        sim = Simulator(cfg, seed, task)
        for t in range(1, max(probes) + 1):
            if t in probes:
                eta = sim.eta(t)
                full, half, star = [], [], []
                for r in range(n_mc):
                    full.append(sim.compute_round(t, rep=r).update)
                    half.append(sim.compute_round(t, rep=r, ul_ideal=True).update)
                    star.append(sim.compute_round(t, rep=r, dl_ideal=True, ul_ideal=True).update)
                full, half, star = np.array(full), np.array(half), np.array(star)
                ul = max(ul, float(np.max(np.var(full - half, axis=0, ddof=1))) / eta ** 2)
                dl = max(dl, float(np.max(np.var(half - star, axis=0, ddof=1))) / eta ** 2)
                sg = max(sg, float(np.sum(np.var(star, axis=0, ddof=1))) / eta ** 2)
                mean_dir = -full.mean(axis=0) / eta
                bvec = mean_dir - task.grad(sim.theta)
                noise = float(np.sum(np.var(full, axis=0, ddof=1))) / (n_mc * eta ** 2)
                bias_by_round.setdefault(t, []).append(max(0.0, float(bvec @ bvec) - noise))
            rep = sim.step()
            D2 = max(D2, rep.drift_max2)
            if t == 1:
                q, v = rep.q, rep.v
    B = max((float(np.mean(b)) for b in bias_by_round.values()), default=0.0)
    return BoundConstants(L=task.L, mu=task.mu, d=task.d, sigma_g2=sg, sigma_ul2=ul, sigma_dl2=dl,
                          B=B, D2=D2, q=q, v=v)


def evaluate_bounds(T: int, c: BoundConstants, *, dist1_sq: float, gap1: float,
                    eta: float | None = None, beta: float | None = None, gamma: float | None = None,
                    mu: float | None = None) -> dict:
    """Bound curves for ``T' = 1..T``.

    ``eta`` gives the constant-step bounds (convex and nonconvex); ``beta`` and
    ``gamma`` give the diminishing-step strongly convex bound. Steps above
    ``1 / (4L)`` are refused.
    """
    Ts = np.arange(1, T + 1, dtype=float)
    out = {"T": Ts}
    limit = 1.0 / (4 * c.L)
    if eta is not None:
        if eta > limit * (1 + 1e-12):
            raise BoundPreconditionError(f"step {eta:.4g} exceeds 1/(4L) = {limit:.4g}")
        out["convex"] = dist1_sq / (2 * eta * Ts) + eta * (c.L * c.Xi + 2 * c.B)
        out["nonconvex"] = 4 * gap1 / (eta * Ts) + 4 * c.B + 2 * c.L * eta * c.Xi
    if beta is not None:
        mu = c.mu if mu is None else mu
        eta1 = beta / (mu * (1 + gamma))
        if eta1 > limit * (1 + 1e-12):
            raise BoundPreconditionError(f"first step {eta1:.4g} exceeds 1/(4L) = {limit:.4g}")
        nu = max((gamma + 1) * dist1_sq, beta ** 2 * c.C_err / (mu ** 2 * (beta - 1)))
        out["sconvex"] = nu / (Ts + gamma)
        out["nu"] = nu
    return out


def propagation_constant(task: Task, k: int, theta, tau: int, step: float, batch: int, seed: int,
                         n_dirs: int = 8, radii=(1e-3, 1e-2, 1e-1)) -> float:
    """Empirical Lipschitz factor of the local-update map.

    Perturbs the starting model by ``delta`` along random directions, reruns
    local SGD with the same minibatches, and returns the least-squares slope of
    ``||u(theta + delta) - u(theta)||`` against ``||delta||``.
    """
    theta = np.asarray(theta, dtype=float)
    dirs = substream(seed, 0).standard_normal((n_dirs, theta.size))
    xs, ys = [], []
    for j, v in enumerate(dirs):
        v = v / np.linalg.norm(v)
        ref = local_sgd(task, k, theta, tau, step, batch, substream(seed, 1, j))
        for r in radii:
            pert = local_sgd(task, k, theta + r * v, tau, step, batch, substream(seed, 1, j))
            xs.append(r)
            ys.append(float(np.linalg.norm(pert - ref)))
    xs, ys = np.array(xs), np.array(ys)
    return float(xs @ ys / (xs @ xs))
