"""Experiment orchestration: seeds, sweeps, scheme comparison and output files."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml
from scipy.stats import rankdata

from .config import ScenarioConfig
from .errors import BoundPreconditionError, ConfigError
from .learner import BoundConstants, Simulator, evaluate_bounds, measure_error_constants
from .tasks import Task, build_task

CSV_COLUMNS = ("scenario_id", "seed", "round", "scheme", "lambda", "snr_db", "loss", "dist_sq", "acc",
               "comm_cost", "sigma_ul2", "bound_convex", "bound_sconvex", "bound_nonconvex")


class BudgetMismatch(ConfigError):
    """Schemes cannot be compared at the requested communication budget."""


@dataclass
class ScenarioResult:
    cfg: ScenarioConfig
    scenario_id: str
    reports: dict                      # seed -> list[RoundReport]
    constants: BoundConstants | None = None
    bounds: dict = field(default_factory=dict)

    @property
    def seeds(self) -> list[int]:
        return list(self.reports)

    def curve(self, attr: str) -> np.ndarray:
        """``(seeds, rounds)`` array of a report attribute."""
        return np.array([[getattr(r, attr) for r in reps] for reps in self.reports.values()], dtype=float)

    def rows(self) -> list[dict]:
        cfg = self.cfg
        out = []
        for seed, reps in self.reports.items():
            for r in reps:
                out.append({
                    "scenario_id": self.scenario_id, "seed": seed, "round": r.t, "scheme": cfg.scheme,
                    "lambda": cfg.pilot_fraction, "snr_db": cfg.snr_db, "loss": r.loss,
                    "dist_sq": r.dist_sq, "acc": r.acc, "comm_cost": r.comm_cost, "sigma_ul2": r.sigma_ul2,
                    "bound_convex": self._bound("convex", r.t),
                    "bound_sconvex": self._bound("sconvex", r.t),
                    "bound_nonconvex": self._bound("nonconvex", r.t),
                })
        return out

    def _bound(self, key, t):
        arr = self.bounds.get(key)
        return float(arr[t - 1]) if arr is not None else float("nan")

    def summary(self) -> list[dict]:
        """Mean and standard deviation across seeds per round."""
        loss, cost = self.curve("loss"), self.curve("comm_cost")
        dist, acc = self.curve("dist_sq"), self.curve("acc")
        rows = []
        for i in range(loss.shape[1]):
            rows.append({"round": i + 1, "comm_cost": float(cost[0, i]),
                         "loss_mean": float(loss[:, i].mean()), "loss_std": float(loss[:, i].std()),
                         "dist_sq_mean": float(dist[:, i].mean()), "acc_mean": float(acc[:, i].mean())})
        return rows

    def bound_checks(self) -> dict:
        """Compare seed-averaged measurements with the evaluated bounds."""
        out = {}
        if "convex" in self.bounds and not np.isnan(self.bounds["convex"]).all():
            gap = self.curve("avg_gap").mean(axis=0)
            out["convex"] = bool(gap[-1] <= self.bounds["convex"][-1])
        if "nonconvex" in self.bounds:
            g = self.curve("grad_sq").mean(axis=0)
            run_avg = np.cumsum(g) / np.arange(1, len(g) + 1)
            out["nonconvex"] = bool(run_avg[-1] <= self.bounds["nonconvex"][-1])
        if "sconvex" in self.bounds:
            dist = self.curve("dist_sq").mean(axis=0)
            out["sconvex"] = bool(np.all(dist <= self.bounds["sconvex"]))
        return out


def _seed_run(cfg, task, seed):
    return Simulator(cfg, seed, task).run()


def run_scenario(cfg: ScenarioConfig, seeds=None, threads: int = 1, task: Task | None = None,
                 scenario_id: str | None = None) -> ScenarioResult:
    """Run every seed of a scenario; reports come back in seed order regardless of threading."""
    cfg.validate()
    seeds = list(cfg.seeds if seeds is None else seeds)
    task = task if task is not None else build_task(cfg.task, cfg.K)
    constants, bounds = None, {}
    if cfg.bounds.enabled:
        constants, bounds = _bounds_for(cfg, task)
    if threads > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            runs = list(ex.map(lambda s: _seed_run(cfg, task, s), seeds))
    else:
        runs = [_seed_run(cfg, task, s) for s in seeds]
    return ScenarioResult(cfg, scenario_id or cfg.name, dict(zip(seeds, runs)), constants, bounds)


def _bounds_for(cfg: ScenarioConfig, task: Task):
    limit = 1 / (4 * task.L)
    eta1 = cfg.step.eta_at(1, task.mu)
    if eta1 > limit * (1 + 1e-12):
        raise BoundPreconditionError(f"bound evaluation needs eta <= 1/(4L) = {limit:.4g}, got {eta1:.4g}")
    c = measure_error_constants(cfg, task=task)
    gap1 = task.loss(task.theta0) - task.F_star
    dist1 = float(np.sum((task.theta0 - task.theta_star) ** 2)) if task.theta_star is not None else float("nan")
    if cfg.step.schedule == "constant":
        b = evaluate_bounds(cfg.T, c, eta=cfg.step.eta, dist1_sq=dist1, gap1=gap1)
    else:
        mu = cfg.step.mu if cfg.step.mu is not None else task.mu
        b = evaluate_bounds(cfg.T, c, beta=cfg.step.beta, gamma=cfg.step.gamma, mu=mu,
                            dist1_sq=dist1, gap1=gap1)
    return c, {k: v for k, v in b.items() if k in ("convex", "sconvex", "nonconvex")}


# ------------------------------------------------------------------ comparison

def loss_at_budget(result: ScenarioResult, budget: float, metric: str = "loss") -> np.ndarray:
    """Per-seed metric at the last round whose cumulative cost fits in ``budget``."""
    cost = result.curve("comm_cost")[0]
    fits = np.nonzero(cost <= budget * (1 + 1e-9))[0]
    if not len(fits) or cost[-1] < budget * (1 - 1e-9):
        raise BudgetMismatch(f"{result.scenario_id}: budget {budget:g} outside run range "
                             f"[{cost[0]:g}, {cost[-1]:g}]")
    return result.curve(metric)[:, fits[-1]]


def compare_schemes(results: dict, budgets=None, metric: str = "loss") -> list[dict]:
    """Rank runs by mean ``metric`` at fixed communication budgets (lower is better).

    The default budget is the largest one every run reaches. Equal means share a rank.
    """
    if not results:
        return []
    if budgets is None:
        budgets = [min(float(r.curve("comm_cost")[0, -1]) for r in results.values())]
    table = []
    names = list(results)
    for b in budgets:
        vals = {n: loss_at_budget(results[n], b, metric) for n in names}
        means = np.array([vals[n].mean() for n in names])
        ranks = rankdata(means, method="min")
        for n, m, rk in zip(names, means, ranks):
            table.append({"budget": float(b), "scheme": n, "rank": int(rk), "mean": float(m),
                          "std": float(vals[n].std()), "seeds": len(vals[n])})
    return table


def cost_to_reach(result: ScenarioResult, target: float, metric: str = "loss") -> float:
    """Cumulative cost at which the seed-mean ``metric`` first drops to ``target`` (inf if never)."""
    m = result.curve(metric).mean(axis=0)
    cost = result.curve("comm_cost")[0]
    hit = np.nonzero(m <= target)[0]
    return float(cost[hit[0]]) if len(hit) else math.inf


# ------------------------------------------------------------------ sweeps

def parse_grid(spec: str) -> dict:
    """``"scheme=a,b;pilot_fraction=0.2,0.4"`` -> ``{"scheme": ["a", "b"], "pilot_fraction": [0.2, 0.4]}``."""
    grid = {}
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        if "=" not in part:
            raise ConfigError(f"grid entry {part!r} is not key=v1,v2")
        key, vals = part.split("=", 1)
        grid[key.strip()] = [yaml.safe_load(v.strip()) for v in vals.split(",") if v.strip()]
        if not grid[key.strip()]:
            raise ConfigError(f"grid entry {key!r} has no values")
    return grid


def expand_grid(template: ScenarioConfig, grid: dict) -> list[tuple[str, ScenarioConfig]]:
    keys = list(grid)
    points = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        changes = dict(zip(keys, combo))
        tag = "__".join(f"{k}={v}" for k, v in changes.items())
        cfg = template.replace(**changes)
        sid = f"{template.name}__{tag}" if tag else template.name
        points.append((sid, cfg.replace(name=sid)))
    return points


# ------------------------------------------------------------------ output

def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def _clean(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) or math.isinf(obj) else obj
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def to_json(result: ScenarioResult) -> str:
    doc = {
        "scenario_id": result.scenario_id,
        "config": result.cfg.to_dict(),
        "rows": result.rows(),
        "summary": result.summary(),
        "reports": {str(s): [asdict(r) for r in reps] for s, reps in result.reports.items()},
    }
    if result.constants is not None:
        c = result.constants
        doc["constants"] = dict(asdict(c), Xi=c.Xi, C_err=c.C_err)
        doc["bound_checks"] = result.bound_checks()
    return json.dumps(_clean(doc), indent=1, sort_keys=True) + "\n"


def write_atomic(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_result(result: ScenarioResult, out_dir: str, fmt: str = "csv") -> str:
    if fmt not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    path = os.path.join(out_dir, f"{result.scenario_id}.{fmt}")
    write_atomic(path, to_csv(result.rows()) if fmt == "csv" else to_json(result))
    return path
