"""Scenario configuration: dataclasses with explicit defaults, YAML in and out."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError

SCHEMES = ("superposed_plmf", "superposed_zf", "additive", "baseline")
TASKS = ("quadratic", "logistic", "mlp")


@dataclass
class TaskConfig:
    kind: str = "logistic"
    d: int = 20                      # parameter count (quadratic, logistic)
    hidden: int = 16                 # mlp hidden units
    samples_per_device: int = 100
    heterogeneity: float = 0.5
    noise: float = 1.0               # quadratic centre spread / two-moons jitter
    center_scale: float = 1.0
    curvature_spread: float = 0.0
    mu: float = 0.5                  # quadratic spectrum
    L: float = 2.0
    reg: float = 0.01
    label_noise: float = 0.0
    signal: float = 2.0              # logistic teacher weight norm
    data_seed: int = 0


@dataclass
class StepConfig:
    schedule: str = "constant"       # constant | diminishing
    eta: float = 0.1                 # constant effective step
    beta: float = 2.0                # diminishing: eta_t = beta / (mu (t + gamma))
    gamma: float = 31.0
    mu: float | None = None          # strong convexity used by the schedule; task value if None

    def eta_at(self, t: int, mu_task: float) -> float:
        if self.schedule == "constant":
            return self.eta
        mu = self.mu if self.mu is not None else mu_task
        return self.beta / (mu * (t + self.gamma))


@dataclass
class BoundsConfig:
    enabled: bool = False
    n_mc: int = 20
    probes: int = 8
    trajectories: int = 2


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    scheme: str = "superposed_plmf"
    channel: str = "physical"        # physical | ideal
    task: TaskConfig = field(default_factory=TaskConfig)
    step: StepConfig = field(default_factory=StepConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)
    K_S: int = 10
    K_D: int = 10
    dynamic_candidates: int | None = None
    M: int = 2
    N: int = 1
    N_s: int = 4096
    pilot_fraction: float = 0.4
    coherence_spread: float = 1.0    # dynamic L_t drawn from [L_ts, (1 + spread) L_ts]
    random_offsets: bool = True
    profile_seed: int = 0
    snr_db: float = 20.0
    noise_var: float = 1.0
    uplink_snr_db: float | None = None
    uplink_pilot_snr_db: float | None = None
    mu_clip: float = 0.1
    uplink_blocks: int = 2
    static_refresh: int = 10
    combiner: str = "first"
    rotate_placement: bool = True
    tau: int = 5
    batch: int = 16
    T: int = 100
    seeds: list = field(default_factory=lambda: [0])

    def __post_init__(self):
        # accept plain mappings for the nested sections
        for key, klass in (("task", TaskConfig), ("step", StepConfig), ("bounds", BoundsConfig)):
            val = getattr(self, key)
            if not isinstance(val, klass):
                setattr(self, key, _nested(klass, val, key))

    # -------------------------------------------------------------- derived
    @property
    def K(self) -> int:
        return self.K_S + self.K_D

    @property
    def rho(self) -> float:
        # powers are relative to unit noise so that noise_var = 0 gives a noiseless link
        return 10 ** (self.snr_db / 10)

    @property
    def rho_u(self) -> float:
        db = self.snr_db if self.uplink_snr_db is None else self.uplink_snr_db
        return 10 ** (db / 10)

    @property
    def rho_tau(self) -> float:
        db = self.snr_db if self.uplink_pilot_snr_db is None else self.uplink_pilot_snr_db
        return 10 ** (db / 10)

    @property
    def L_ts(self) -> int | None:
        """Shortest dynamic coherence time implied by the pilot fraction (None when pilot-free)."""
        if self.pilot_fraction == 0:
            return None
        return int(round(self.M / self.pilot_fraction))

    @property
    def layout(self) -> str:
        return {"superposed_plmf": "superposed", "superposed_zf": "superposed",
                "additive": "additive", "baseline": "baseline"}[self.scheme]

    @property
    def fill(self) -> str:
        return "zf" if self.scheme == "superposed_zf" else "plmf"

    # -------------------------------------------------------------- io
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        if not isinstance(raw, dict):
            raise ConfigError("scenario must be a mapping")
        raw = dict(raw)
        nested = {"task": TaskConfig, "step": StepConfig, "bounds": BoundsConfig}
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for key, val in raw.items():
            if key not in names:
                raise ConfigError(f"unknown scenario key {key!r}")
            if key in nested:
                kwargs[key] = _nested(nested[key], val, key)
            else:
                kwargs[key] = val
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def loads(cls, text: str) -> "ScenarioConfig":
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse scenario: {e}") from None
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.loads(fh.read())

    def replace(self, **changes) -> "ScenarioConfig":
        d = self.to_dict()
        for k, v in changes.items():
            if "." in k:
                outer, inner = k.split(".", 1)
                d[outer][inner] = v
            else:
                d[k] = v
        return ScenarioConfig.from_dict(d)

    # -------------------------------------------------------------- checks
    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.scheme in SCHEMES, f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        need(self.channel in ("physical", "ideal"), "channel must be 'physical' or 'ideal'")
        need(self.task.kind in TASKS, f"task.kind must be one of {TASKS}")
        need(self.step.schedule in ("constant", "diminishing"), "step.schedule must be constant or diminishing")
        for name in ("K_S", "K_D", "T", "tau", "batch", "M", "N", "N_s", "uplink_blocks", "static_refresh"):
            need(isinstance(getattr(self, name), int), f"{name} must be an integer")
        need(self.K_S >= 0 and self.K_D >= 0 and self.K >= 1, "need at least one device")
        need(self.T >= 1 and self.tau >= 1 and self.batch >= 1, "T, tau and batch must be >= 1")
        need(self.M >= 1 and self.N >= 1 and self.N_s >= 1, "M, N, N_s must be >= 1")
        need(0.0 <= self.pilot_fraction < 1.0, "pilot_fraction must lie in [0, 1)")
        need(self.noise_var >= 0, "noise_var must be non-negative")
        need(self.mu_clip > 0, "mu_clip must be positive")
        need(self.uplink_blocks >= 1 and self.static_refresh >= 1, "uplink_blocks and static_refresh must be >= 1")
        need(self.combiner in ("first", "strongest"), "combiner must be 'first' or 'strongest'")
        need(self.coherence_spread >= 0, "coherence_spread must be >= 0")
        need(isinstance(self.seeds, list) and self.seeds and all(isinstance(s, int) and s >= 0 for s in self.seeds),
             "seeds must be a non-empty list of non-negative integers")
        cand = self.dynamic_candidates if self.dynamic_candidates is not None else self.K_D
        need(cand >= self.K_D, "dynamic_candidates must be >= K_D")
        for name in ("snr_db",):
            need(math.isfinite(getattr(self, name)), f"{name} must be finite")
        if self.step.schedule == "constant":
            need(self.step.eta > 0, "step.eta must be positive")
        else:
            need(self.step.beta > 1 and self.step.gamma >= 0, "diminishing steps need beta > 1, gamma >= 0")
        need(self.bounds.n_mc >= 10 or not self.bounds.enabled, "bounds.n_mc must be >= 10")


def _nested(klass, val, key):
    if val is None:
        return klass()
    if not isinstance(val, dict):
        raise ConfigError(f"{key} must be a mapping")
    names = {f.name for f in dataclasses.fields(klass)}
    bad = set(val) - names
    if bad:
        raise ConfigError(f"unknown {key} keys: {sorted(bad)}")
    return klass(**val)
