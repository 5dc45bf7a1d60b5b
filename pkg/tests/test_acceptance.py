"""End-to-end acceptance checks; one summary line per criterion is printed at the end of the run."""

import subprocess
import sys
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from cafl.channel import STATIC, CoherenceProfile, sample_channel
from cafl.config import ScenarioConfig
from cafl.downlink import Broadcast, dft_pilot, estimate_equivalent_channel, optimal_power_split, scheme_powers
from cafl.errors import NegativePilotPower
from cafl.grid import ADDITIVE, BASELINE, SUPERPOSED, build_superblock, place
from cafl.harness import compare_schemes, cost_to_reach, loss_at_budget, run_scenario, to_csv
from cafl.learner import Simulator, fedavg_reference
from cafl.rng import crandn, substream
from cafl.tasks import build_task
from cafl.uplink import (Precoder, aggregate_round, choose_beta, combiner, estimate_update, ota_aggregate,
                         partition_coordinates, post_scaling_noise_variance, precode, uplink_channel_estimate)

C = pytest.mark.criterion
TESTS = Path(__file__).parent


# ------------------------------------------------------------------ 1

def _golden_argmin(f, a, b, tol):
    inv = (mpmath.sqrt(5) - 1) / 2
    c, d = b - inv * (b - a), a + inv * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = f(d)
    return (a + b) / 2


@C(1, "pilot/data power split matches a golden-section optimum")
def test_power_split_matches_golden_section():
    t0 = time.perf_counter()
    rng = substream(2024, 1)
    checked = 0
    mpmath.mp.dps = 40
    while checked < 50:
        rho, M, nv = rng.uniform(0.1, 100), int(rng.choice([1, 2, 4, 8])), rng.uniform(0.1, 10)
        L = int(rng.integers(M + 1, 65))
        try:
            rp, rd = optimal_power_split(rho, M, L, nv)
        except NegativePilotPower:
            continue       # optimum sits outside the feasible region; no interior point to compare with
        R, Mm, S = mpmath.mpf(rho), mpmath.mpf(M), mpmath.mpf(nv)

        def inv_snr(x):     # 1 / effective SNR with the pilot power on the budget line
            p = R * L / Mm - x * (L - Mm)
            return S * (S + Mm * p + Mm * x) / (x * (S + Mm * p))

        hi = R * L / (Mm * (L - Mm))
        best = _golden_argmin(inv_snr, hi * mpmath.mpf("1e-12"), hi, hi * mpmath.mpf("1e-25"))
        assert abs(rd - float(best)) / rd <= 1e-9
        assert abs(M * (rp + rd * (L - M)) - rho * L) <= 1e-12 * rho * L
        checked += 1
    assert time.perf_counter() - t0 < 5


# ------------------------------------------------------------------ 2

@C(2, "MMSE error variance laws (downlink equivalent channel, uplink)")
@pytest.mark.parametrize("M,rho_p,nv", [(1, 1.0, 1.0), (2, 4.0, 2.0), (2, 0.3, 1.0), (4, 2.0, 0.5), (8, 1.0, 3.0)])
def test_downlink_mmse_variance(M, rho_p, nv):
    n = 100_000
    rng = substream(11, M, int(rho_p * 100))
    U = dft_pilot(M)
    p = rng.choice([-1.0, 1.0], size=M) * np.sqrt(M)
    f = np.conj(crandn(rng, (n, M))) * p
    y = np.sqrt(rho_p) * f @ U + crandn(rng, (n, M), nv)
    est = estimate_equivalent_channel(y, U, rho_p, nv)
    mse = np.mean(np.sum(np.abs(f - est.f_bar) ** 2, axis=1))
    assert abs(mse / (M * est.sigma_e2) - 1) <= 0.02


@C(2, "MMSE error variance laws (downlink equivalent channel, uplink)")
@pytest.mark.parametrize("M,rho_tau,nv", [(1, 1.0, 1.0), (2, 10.0, 1.0), (2, 0.5, 2.0), (4, 3.0, 0.3), (8, 100.0, 5.0)])
def test_uplink_mmse_variance(M, rho_tau, nv):
    rng = substream(12, M, int(rho_tau * 10))
    h = crandn(rng, (100_000, M))
    hh, _ = uplink_channel_estimate(h, rho_tau, nv, rng)
    mse = np.mean(np.sum(np.abs(h - hh) ** 2, axis=1))
    assert abs(mse / (M * nv / (rho_tau + nv)) - 1) <= 0.02


# ------------------------------------------------------------------ 3

@C(3, "noiseless exactness of decode, round pipeline and uplink")
@pytest.mark.parametrize("layout", [SUPERPOSED, BASELINE, ADDITIVE])
def test_noiseless_static_decode(layout):
    g, _ = build_superblock([CoherenceProfile(9, 5, 1 << 20)], s=301, M=2, N_s=4096, N=3, layout=layout)
    theta = substream(3, 1).standard_normal(g.s) * 4
    for rot in (0, 17):
        b = Broadcast(theta, g, place(g, rot), scheme_powers(100.0, 2, g.L_ts, 0.0), 0.0)
        for dev in range(5):
            ch = sample_channel(CoherenceProfile(dev, 1 << 20, 1 << 20, STATIC), g, substream(4, dev), 0.0)
            rec = b.deliver(ch, substream(5, dev))
            assert rec.mask.all() and np.max(np.abs(rec.values - theta)) <= 1e-10


@C(3, "noiseless exactness of decode, round pipeline and uplink")
@pytest.mark.parametrize("scheme", ["superposed_plmf", "baseline", "additive"])
def test_noiseless_pipeline_matches_ideal(scheme):
    t0 = time.perf_counter()
    cfg = ScenarioConfig(scheme=scheme, K_S=6, K_D=0, T=4, noise_var=0.0, mu_clip=1e-9,
                         task=dict(kind="logistic", d=12, samples_per_device=40))
    sim = Simulator(cfg, 7)
    ref = fedavg_reference(sim.task, cfg.replace(channel="ideal"), 7, cfg.T)
    for t in range(cfg.T):
        sim.step()
        assert np.max(np.abs(sim.theta - ref[t])) <= 1e-10
    assert time.perf_counter() - t0 < 5


@C(3, "noiseless exactness of decode, round pipeline and uplink")
def test_ideal_uplink_reproduces_weighted_sum():
    rng = substream(8, 1)
    K, d = 7, 50
    incs = [rng.standard_normal(d) for _ in range(K)]
    a = rng.dirichlet(np.ones(K))
    blocks = partition_coordinates(d, 4)
    h = [[crandn(rng, (2,)) for _ in blocks] for _ in range(K)]
    g = [[complex(x[0]) for x in hk] for hk in h]
    full = [np.ones(d, bool)] * K
    res = aggregate_round(incs, full, a, g, h, blocks, rho_u=10.0, noise_var=0.0, mu=1e-12, rng=rng)
    assert np.max(np.abs(res.update - sum(ak * x for ak, x in zip(a, incs)))) <= 1e-10


# ------------------------------------------------------------------ 4

@C(4, "uplink post-scaling noise variance")
@pytest.mark.parametrize("rho_u,nv", [(10.0, 1.0), (100.0, 0.5), (2.0, 3.0)])
def test_uplink_noise_variance(rho_u, nv):
    t0 = time.perf_counter()
    n, K = 100_000, 3
    rng = substream(9, int(rho_u))
    incs = [rng.standard_normal(n) * 0.1 for _ in range(K)]
    a = np.full(K, 1 / K)
    h = [crandn(rng, (2,)) for _ in range(K)]
    gh = [complex(x[0]) for x in h]
    beta = choose_beta(gh, [0.1] * K, a, incs, [rho_u] * K, rho_u)
    xs = [precode(x, np.ones(n, bool), ak, Precoder(gk, 0.1, beta), rho_u) for x, ak, gk in zip(incs, a, gh)]
    u = combiner(2)
    clean = estimate_update(ota_aggregate(xs, h, u, 0.0), rho_u, beta)
    noisy = estimate_update(ota_aggregate(xs, h, u, nv, substream(9, 2)), rho_u, beta)
    emp = np.mean(np.abs(noisy - clean) ** 2)
    assert abs(emp / post_scaling_noise_variance(nv, rho_u, beta) - 1) <= 0.02
    assert time.perf_counter() - t0 < 10


# ------------------------------------------------------------------ 5

C5 = dict(name="sconvex_rate", T=500, K_S=5, K_D=5, coherence_spread=0.0, random_offsets=False,
          seeds=list(range(20)), snr_db=20.0,
          task=dict(kind="quadratic", d=5, mu=0.5, L=2.0, samples_per_device=50),
          step=dict(schedule="diminishing", beta=2.0, gamma=31.0),
          bounds=dict(enabled=True, n_mc=20, probes=8, trajectories=2))


@pytest.mark.slow
@C(5, "diminishing-step distance stays under nu/(T+gamma) with ~1/T slope")
def test_strongly_convex_rate():
    t0 = time.perf_counter()
    cfg = ScenarioConfig.from_dict(C5)
    res = run_scenario(cfg)
    assert cfg.step.eta_at(1, res.constants.mu) == pytest.approx(1 / (4 * res.constants.L))
    dist = res.curve("dist_sq").mean(axis=0)
    bound = res.bounds["sconvex"]
    print(f"max dist/bound ratio {np.max(dist / bound):.3f}")
    assert np.all(dist <= bound)
    Ts = np.arange(1, cfg.T + 1)
    win = (Ts >= 50) & (Ts <= 500)
    slope = np.polyfit(np.log(Ts[win]), np.log(dist[win]), 1)[0]
    print(f"log-log slope {slope:.3f}")
    assert -1.3 <= slope <= -0.7
    assert time.perf_counter() - t0 < 120


# ------------------------------------------------------------------ 6

def _floor_cfg(kind, **task):
    base = ScenarioConfig.from_dict(dict(name=f"floor_{kind}", T=150, K_S=5, K_D=5, coherence_spread=0.0,
                                         random_offsets=False, seeds=list(range(5)),
                                         task=dict(kind=kind, samples_per_device=50, **task),
                                         bounds=dict(enabled=True, n_mc=10, probes=5, trajectories=1)))
    L = build_task(base.task, base.K).L
    return base.replace(**{"step.eta": 0.9 / (4 * L)})


@pytest.mark.slow
@C(6, "constant-step floors: convex gap and nonconvex gradient norm under their bounds")
def test_constant_step_floors():
    t0 = time.perf_counter()
    logi = run_scenario(_floor_cfg("logistic", d=10))
    gap = logi.curve("avg_gap").mean(axis=0)[-1]
    g = logi.curve("grad_sq").mean(axis=0).mean()
    print(f"logistic: gap {gap:.4g} <= {logi.bounds['convex'][-1]:.4g}; "
          f"avg grad^2 {g:.4g} <= {logi.bounds['nonconvex'][-1]:.4g}")
    assert logi.bound_checks() == {"convex": True, "nonconvex": True}
    mlp = run_scenario(_floor_cfg("mlp", hidden=8, noise=0.15, reg=1e-3))
    g = mlp.curve("grad_sq").mean(axis=0).mean()
    print(f"mlp: avg grad^2 {g:.4g} <= {mlp.bounds['nonconvex'][-1]:.4g}")
    assert mlp.bound_checks()["nonconvex"]
    assert time.perf_counter() - t0 < 180


# ------------------------------------------------------------------ 7 / 8

SCHEMES = ("superposed_plmf", "baseline", "superposed_zf", "additive")


def _comparison_cfg(lam):
    return ScenarioConfig(name=f"compare_{lam}", T=100, K_S=10, K_D=10, pilot_fraction=lam, snr_db=20.0,
                          coherence_spread=0.0, random_offsets=False, seeds=list(range(20))).replace(
        **{"task.signal": 12.0, "step.eta": 1.25, "task.reg": 0.001, "batch": 50})


class Sweep:
    """Lazily runs and times each ``(lambda, scheme)`` scenario once per session."""

    def __init__(self):
        self.results, self.seconds = {}, {}
        self.task = build_task(_comparison_cfg(0.4).task, 20)

    def get(self, lam, scheme, T=100):
        key = (lam, scheme)
        if key not in self.results or self.results[key].cfg.T < T:
            t0 = time.perf_counter()
            self.results[key] = run_scenario(_comparison_cfg(lam).replace(scheme=scheme, T=T), task=self.task)
            self.seconds[key] = time.perf_counter() - t0
        return self.results[key]

    def elapsed(self, keys):
        return sum(self.seconds[k] for k in keys)


@pytest.fixture(scope="session")
def sweep():
    return Sweep()


def _at_budget(results, budget=100.0):
    table = compare_schemes(results, budgets=[budget])
    return {r["scheme"]: (r["mean"], r["std"]) for r in table}


@pytest.mark.slow
@C(7, "scheme ordering at lambda = 0.4 and communication saving")
def test_scheme_ordering(sweep):
    # PLMF runs until it has spent what 100 baseline rounds cost; rounds 1..100 do not depend on T
    long_T = int(np.ceil(100 / (1 - 0.4)))
    res = {s: sweep.get(0.4, s, T=long_T if s == "superposed_plmf" else 100) for s in SCHEMES}
    m = _at_budget(res)
    for s in SCHEMES:
        print(f"{s:16s} {m[s][0]:.5f} +- {m[s][1]:.5f}")
    assert m["superposed_plmf"][0] <= m["baseline"][0] <= m["superposed_zf"][0] <= m["additive"][0]
    assert m["superposed_plmf"][0] + m["superposed_plmf"][1] < m["additive"][0] - m["additive"][1]
    base = res["baseline"]
    target = base.curve("loss").mean(axis=0)[-1]
    base_cost = base.curve("comm_cost")[0, -1]
    plmf_cost = cost_to_reach(res["superposed_plmf"], target)
    print(f"baseline terminal loss {target:.5f} at cost {base_cost:.1f}; PLMF reaches it at {plmf_cost:.1f}")
    assert plmf_cost <= 0.9 * base_cost
    assert sweep.elapsed((0.4, s) for s in SCHEMES) < 300


@pytest.mark.slow
@C(8, "degradation with pilot fraction")
def test_lambda_degradation(sweep):
    lams = (0.0, 0.2, 0.4)
    tracked = ("superposed_plmf", "baseline", "superposed_zf")
    means = {lam: _at_budget({s: sweep.get(lam, s) for s in tracked}) for lam in lams}
    for lam in lams:
        print(lam, {s: round(means[lam][s][0], 5) for s in tracked})
    for s in ("baseline", "superposed_zf"):
        seq = [means[lam][s][0] for lam in lams]
        assert seq[0] < seq[1] < seq[2], s
    deg = {s: means[0.4][s][0] - means[0.0][s][0] for s in tracked}
    assert deg["superposed_plmf"] < deg["baseline"]
    # at lambda = 0 every scheme sends the same symbols: agreement within Monte-Carlo noise
    ref = loss_at_budget(sweep.get(0.0, "superposed_plmf"), 100.0)
    for s in SCHEMES:
        other = loss_at_budget(sweep.get(0.0, s), 100.0)
        se = np.sqrt((ref.var(ddof=1) + other.var(ddof=1)) / len(ref))
        assert abs(ref.mean() - other.mean()) <= 3 * se + 1e-12
    used = [(lam, s) for lam in lams for s in tracked] + [(0.0, "additive")]
    print(f"simulation time {sweep.elapsed(used):.0f} s")
    assert sweep.elapsed(used) < 300


# ------------------------------------------------------------------ 9

@C(9, "byte-identical CSV on rerun and under threads")
def test_determinism():
    cfg = ScenarioConfig(name="det", T=6, K_S=3, K_D=3, seeds=[0, 1, 2, 3, 4],
                         task=dict(kind="logistic", d=10, samples_per_device=40))
    a = to_csv(run_scenario(cfg).rows())
    b = to_csv(run_scenario(cfg).rows())
    c = to_csv(run_scenario(cfg, threads=4).rows())
    assert a == b == c


# ------------------------------------------------------------------ 10

INVARIANTS = [
    "test_channel.py::test_tile_constancy_bruteforce",
    "test_grid.py::test_placement_injective_and_deterministic",
    "test_grid.py::test_slot_census_identity",
    "test_plmf.py::test_telescoping_identity",
    "test_uplink.py::test_chi_range",
    "test_uplink.py::test_masked_coordinates_are_silent",
    "test_learner.py::test_gradients_match_finite_differences",
]


@C(10, "invariant property suites with >= 200 cases each")
def test_invariant_suites():
    t0 = time.perf_counter()
    out = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                          "--hypothesis-show-statistics", *[str(TESTS / n) for n in INVARIANTS]],
                         capture_output=True, text=True, cwd=TESTS.parent)
    assert out.returncode == 0, out.stdout[-3000:]
    counts = [int(line.split()[1]) for line in out.stdout.splitlines() if "passing examples" in line]
    assert len(counts) == len(INVARIANTS) and min(counts) >= 200, out.stdout
    assert time.perf_counter() - t0 < 120
