"""Fast end-to-end sanity checks used by ``cafl selftest``."""

from __future__ import annotations

import numpy as np
from scipy import optimize

from .config import ScenarioConfig
from .downlink import optimal_power_split
from .harness import run_scenario, to_csv
from .learner import Simulator, fedavg_reference
from .rng import substream


def _check_power_split() -> tuple[bool, str]:
    rng = substream(0, 99)
    worst = 0.0
    for _ in range(10):
        rho, M, nv = rng.uniform(0.1, 100), int(rng.choice([1, 2, 4, 8])), rng.uniform(0.1, 10)
        L = int(rng.integers(M + 1, 65))
        c = rho * L / M

        def g(rd):
            return nv / rd + nv * M / (nv + M * (c - rd * (L - M)))

        hi = c / (L - M)
        res = optimize.minimize_scalar(g, bounds=(hi * 1e-12, hi * (1 - 1e-12)), method="bounded",
                                       options={"xatol": 1e-14 * hi})
        _, rd = optimal_power_split(rho, M, L, nv)
        worst = max(worst, abs(rd - res.x) / rd)
    return worst < 1e-5, f"max relative gap {worst:.2e}"


def _check_ideal() -> tuple[bool, str]:
    cfg = ScenarioConfig(channel="ideal", T=5, K_S=3, K_D=2)
    sim = Simulator(cfg, 1)
    sim.run()
    ref = fedavg_reference(sim.task, cfg, 1, cfg.T)[-1]
    return bool(np.array_equal(sim.theta, ref)), "ideal links match federated averaging"


def _check_noiseless() -> tuple[bool, str]:
    cfg = ScenarioConfig(T=3, K_S=4, K_D=0, noise_var=0.0)
    sim = Simulator(cfg, 2)
    ref = ScenarioConfig(channel="ideal", T=3, K_S=4, K_D=0)
    sim.run()
    want = fedavg_reference(sim.task, ref, 2, 3)[-1]
    err = float(np.max(np.abs(sim.theta - want)))
    return err < 1e-10, f"max deviation {err:.2e}"


def _check_determinism() -> tuple[bool, str]:
    cfg = ScenarioConfig(T=3, K_S=2, K_D=2, seeds=[0, 1, 2])
    a = to_csv(run_scenario(cfg, threads=1).rows())
    b = to_csv(run_scenario(cfg, threads=3).rows())
    return a == b, "serial and threaded CSV identical"


CHECKS = {
    "power_split": _check_power_split,
    "ideal_equals_fedavg": _check_ideal,
    "noiseless_pipeline": _check_noiseless,
    "determinism": _check_determinism,
}


def run_selftest(echo=print) -> bool:
    ok_all = True
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as e:  # report and keep going
            ok, detail = False, f"{type(e).__name__}: {e}"
        ok_all &= ok
        echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok_all
