import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cafl.config import ScenarioConfig
from cafl.errors import BoundPreconditionError, ConfigError
from cafl.learner import (BoundConstants, Simulator, combined_error, evaluate_bounds, fedavg_reference, local_sgd,
                          measure_error_constants, probe_rounds, propagation_constant)
from cafl.tasks import LogisticTask, MLPTask, QuadraticTask, Task


class Bowl(Task):
    """F_k = 0.5 ||theta - c_k||^2 with one sample per device."""

    kind = "bowl"

    def __init__(self, centres):
        self.c = np.asarray(centres, dtype=float)
        self.K, self.d = self.c.shape
        self.a = np.full(self.K, 1 / self.K)
        self.L = self.mu = 1.0
        self.theta0 = np.zeros(self.d)
        self.theta_star = self.c.mean(axis=0)
        self.F_star = self.loss(self.theta_star)

    def shard_size(self, k):
        return 1

    def device_grad(self, k, theta, idx=None):
        return theta - self.c[k]

    def device_loss(self, k, theta):
        return 0.5 * float(np.sum((theta - self.c[k]) ** 2))


def test_local_sgd_example():
    task = Bowl([[0.0]])
    assert local_sgd(task, 0, np.array([1.0]), 1, 0.5, 4, 0)[0] == pytest.approx(-0.5)
    assert local_sgd(task, 0, np.array([1.0]), 2, 0.5, 4, 0)[0] == pytest.approx(-0.75)
    with pytest.raises(ValueError):
        local_sgd(task, 0, np.array([1.0]), 0, 0.5, 4, 0)


def test_hand_trace_two_devices():
    task = Bowl([[1.0, 0.0], [0.0, 2.0]])
    cfg = ScenarioConfig(channel="ideal", K_S=2, K_D=0, tau=2, step=dict(eta=0.5), T=2)
    sim = Simulator(cfg, 0, task)
    sim.step()
    # two local steps of 0.25 from 0: 0.4375 c_k, averaged
    assert np.allclose(sim.theta, [0.21875, 0.4375])
    sim.step()
    th = np.array([0.21875, 0.4375])
    want = np.mean([th + (1 - 0.75 ** 2) * (c - th) for c in task.c], axis=0)
    assert np.allclose(sim.theta, want)


QUAD = QuadraticTask(d=6, K=3, n=20, heterogeneity=0.5, curvature_spread=0.5)
LOGI = LogisticTask(d=6, K=3, n=20)
MLP = MLPTask(hidden=4, K=3, n=20, fstar_iters=200)


@settings(max_examples=200)
@given(which=st.sampled_from(["quad", "logi", "mlp"]), seed=st.integers(0, 2**31), k=st.integers(0, 2))
def test_gradients_match_finite_differences(which, seed, k):
    task = {"quad": QUAD, "logi": LOGI, "mlp": MLP}[which]
    rng = np.random.default_rng(seed)
    theta = task.theta0 + 0.5 * rng.standard_normal(task.d)
    g = task.device_grad(k, theta)
    h = 1e-6
    fd = np.array([(task.device_loss(k, theta + h * e) - task.device_loss(k, theta - h * e)) / (2 * h)
                   for e in np.eye(task.d)])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-6)


def test_ideal_mode_is_fedavg_bit_for_bit():
    cfg = ScenarioConfig(channel="ideal", K_S=3, K_D=2, T=12, task=dict(kind="logistic", d=8, samples_per_device=30))
    sim = Simulator(cfg, 4)
    ref = fedavg_reference(sim.task, cfg, 4, 12)
    for t in range(12):
        sim.step()
        assert np.array_equal(sim.theta, ref[t])


def test_simulator_deterministic():
    cfg = ScenarioConfig(K_S=2, K_D=2, T=5, task=dict(kind="quadratic", d=10))
    a = [r.loss for r in Simulator(cfg, 3).run()]
    b = [r.loss for r in Simulator(cfg, 3).run()]
    c = [r.loss for r in Simulator(cfg, 4).run()]
    assert a == b and a != c


def test_simulator_rejects_bad_setup():
    with pytest.raises(ConfigError):
        Simulator(ScenarioConfig(M=3, task=dict(kind="quadratic", d=4)), 0)
    with pytest.raises(ConfigError):
        Simulator(ScenarioConfig(K_S=1, K_D=1), 0, Bowl([[0.0]]))


def test_reports_track_cost_and_coverage():
    cfg = ScenarioConfig(scheme="baseline", K_S=1, K_D=1, T=3, coherence_spread=0.0, random_offsets=False,
                         task=dict(kind="quadratic", d=20))
    reps = Simulator(cfg, 0).run()
    assert [r.comm_cost for r in reps] == pytest.approx([5 / 3, 10 / 3, 5.0])
    assert all(r.q[0] == 1.0 for r in reps)


def test_combined_error_example():
    assert combined_error(2.0, 3.0, 1.0) == 16.0
    c = BoundConstants(L=2.0, mu=0.5, d=4, sigma_g2=1.0, sigma_ul2=0.25, sigma_dl2=0.25, B=1.0)
    assert c.Xi == pytest.approx(3.0) and c.C_err == pytest.approx(16.0)


def test_bounds_examples_and_preconditions():
    c = BoundConstants(L=2.0, mu=0.5, d=4, sigma_g2=1.0, sigma_ul2=0.25, sigma_dl2=0.25, B=1.0)
    b = evaluate_bounds(4, c, eta=0.1, dist1_sq=2.0, gap1=1.0)
    assert b["convex"][0] == pytest.approx(2.0 / 0.2 + 0.1 * (6 + 2))
    assert b["nonconvex"][3] == pytest.approx(4 / 0.4 + 4 + 2 * 2 * 0.1 * 3)
    with pytest.raises(BoundPreconditionError):
        evaluate_bounds(4, c, eta=0.126, dist1_sq=2.0, gap1=1.0)
    s = evaluate_bounds(10, c, beta=2.0, gamma=31.0, mu=0.5, dist1_sq=1.0, gap1=1.0)
    nu = max(32.0, 4 * 16 / (0.25 * 1))
    assert s["nu"] == pytest.approx(nu) and s["sconvex"][0] == pytest.approx(nu / 32)
    with pytest.raises(BoundPreconditionError):
        evaluate_bounds(10, c, beta=2.0, gamma=1.0, mu=0.5, dist1_sq=1.0, gap1=1.0)
    assert probe_rounds(100, 3) == [1, 10, 100]


def _bound_cfg(**kw):
    base = dict(K_S=2, K_D=2, T=4, coherence_spread=0.0, random_offsets=False, seeds=[0],
                task=dict(kind="quadratic", d=6, samples_per_device=20), step=dict(eta=0.1),
                bounds=dict(enabled=True, n_mc=10, probes=2, trajectories=1))
    base.update(kw)
    return ScenarioConfig.from_dict(base)


def test_constants_vanish_for_ideal_full_batch():
    cfg = _bound_cfg(channel="ideal", tau=1, batch=20)
    c = measure_error_constants(cfg)
    assert c.sigma_ul2 == 0 and c.sigma_dl2 == 0
    assert c.sigma_g2 < 1e-20 and c.B < 1e-20


def test_uplink_noise_constant_falls_with_snr():
    vals = [measure_error_constants(_bound_cfg(uplink_snr_db=db)).sigma_ul2 for db in (0.0, 10.0, 20.0)]
    assert vals[0] > vals[1] > vals[2] > 0


def test_plmf_beats_zero_fill_every_seed():
    for seed in range(5):
        kw = dict(K_S=2, K_D=3, T=30, task=dict(kind="quadratic", d=10), step=dict(eta=0.2),
                  coherence_spread=0.0, random_offsets=False)
        plmf = Simulator(ScenarioConfig.from_dict(dict(kw, scheme="superposed_plmf")), seed).run()[-1]
        zf = Simulator(ScenarioConfig.from_dict(dict(kw, scheme="superposed_zf")), seed).run()[-1]
        assert plmf.loss <= zf.loss


def test_propagation_constant_exact_on_bowl():
    task = Bowl([[0.0, 0.0]])
    got = propagation_constant(task, 0, np.array([1.0, -1.0]), tau=3, step=0.2, batch=1, seed=0)
    assert got == pytest.approx(1 - 0.8 ** 3)
