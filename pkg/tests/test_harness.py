import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cafl.cli import main
from cafl.config import SCHEMES, ScenarioConfig
from cafl.errors import ConfigError
from cafl.harness import (CSV_COLUMNS, BudgetMismatch, compare_schemes, cost_to_reach, expand_grid, loss_at_budget,
                          parse_grid, run_scenario, to_csv, to_json, write_result)

SMALL = dict(K_S=2, K_D=1, T=3, task=dict(kind="quadratic", d=8, samples_per_device=20), seeds=[0, 1])


@settings(max_examples=200)
@given(scheme=st.sampled_from(SCHEMES), lam=st.sampled_from([0.2, 0.25, 0.4, 0.5]), T=st.integers(1, 500),
       snr=st.floats(-10, 40, allow_nan=False), seeds=st.lists(st.integers(0, 10**6), min_size=1, max_size=5),
       eta=st.floats(1e-4, 1.0), kind=st.sampled_from(["quadratic", "logistic", "mlp"]))
def test_config_round_trip_is_byte_identical(scheme, lam, T, snr, seeds, eta, kind):
    cfg = ScenarioConfig.from_dict(dict(scheme=scheme, pilot_fraction=lam, T=T, snr_db=snr, seeds=seeds,
                                        step=dict(eta=eta), task=dict(kind=kind)))
    text = cfg.dump()
    again = ScenarioConfig.loads(text)
    assert again == cfg and again.dump() == text


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown scenario key"):
        ScenarioConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="unknown task keys"):
        ScenarioConfig.from_dict({"task": {"bogus": 1}})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"scheme": "nope"})
    with pytest.raises(ConfigError):
        ScenarioConfig.loads("T: [")
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"pilot_fraction": 1.0})


def test_single_round_rows_and_header():
    res = run_scenario(ScenarioConfig.from_dict(dict(SMALL, T=1)))
    rows = list(csv.DictReader(io.StringIO(to_csv(res.rows()))))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 2 and {r["seed"] for r in rows} == {"0", "1"}
    assert all(r["round"] == "1" and r["bound_convex"] == "" for r in rows)


def test_json_output_is_strict(tmp_path):
    res = run_scenario(ScenarioConfig.from_dict(SMALL))
    doc = json.loads(to_json(res))
    assert doc["config"]["T"] == 3 and len(doc["rows"]) == 6
    path = write_result(res, str(tmp_path), "json")
    assert path.endswith(".json") and "NaN" not in open(path).read()
    with pytest.raises(ConfigError):
        write_result(res, str(tmp_path), "xml")


def test_threaded_runs_match_serial():
    cfg = ScenarioConfig.from_dict(dict(SMALL, seeds=[0, 1, 2, 3]))
    assert to_csv(run_scenario(cfg).rows()) == to_csv(run_scenario(cfg, threads=3).rows())


def test_compare_schemes_ties_in_ideal_mode_and_budget_mismatch():
    res = {s: run_scenario(ScenarioConfig.from_dict(dict(SMALL, scheme=s, channel="ideal"))) for s in SCHEMES}
    table = compare_schemes(res)
    assert {r["rank"] for r in table} == {1}
    real = {s: run_scenario(ScenarioConfig.from_dict(dict(SMALL, scheme=s))) for s in ("baseline", "superposed_plmf")}
    table = compare_schemes(real)
    assert table[0]["budget"] == pytest.approx(3.0)
    with pytest.raises(BudgetMismatch):
        loss_at_budget(real["baseline"], 1.0)     # one baseline round already costs 5/3
    with pytest.raises(BudgetMismatch):
        compare_schemes(real, budgets=[100.0])
    assert cost_to_reach(real["superposed_plmf"], -1.0) == np.inf
    assert cost_to_reach(real["superposed_plmf"], 1e9) == 1.0


def test_grid_parsing_and_expansion():
    g = parse_grid("scheme=baseline,additive; pilot_fraction=0.2,0.4")
    assert g == {"scheme": ["baseline", "additive"], "pilot_fraction": [0.2, 0.4]}
    pts = expand_grid(ScenarioConfig(name="x"), g)
    assert len(pts) == 4 and pts[0][0] == "x__scheme=baseline__pilot_fraction=0.2"
    assert pts[3][1].scheme == "additive" and pts[3][1].pilot_fraction == 0.4
    with pytest.raises(ConfigError):
        parse_grid("scheme")
    with pytest.raises(ConfigError):
        expand_grid(ScenarioConfig(), {"nope": [1]})


# ------------------------------------------------------------------ CLI

def _write(tmp_path, **kw):
    p = tmp_path / "s.yaml"
    p.write_text(ScenarioConfig.from_dict(dict(SMALL, **kw)).dump())
    return str(p)


def test_cli_run_and_sweep(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", _write(tmp_path, name="one"), "--out-dir", str(out), "--seed", "5"]) == 0
    rows = list(csv.DictReader(open(out / "one.csv")))
    assert {r["seed"] for r in rows} == {"5"} and len(rows) == 3
    assert main(["sweep", _write(tmp_path, name="sw"), "--out-dir", str(out), "--threads", "2",
                 "--grid", "scheme=baseline,additive;snr_db=10,20"]) == 0
    assert len(list(out.glob("sw__*.csv"))) == 4


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("bogus: 1\n")
    assert main(["run", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2
    assert main(["run", _write(tmp_path, N_s=4), "--out-dir", str(tmp_path)]) == 3
    assert main(["bounds", _write(tmp_path, step=dict(eta=1.0)), "--out-dir", str(tmp_path)]) == 2
    assert main(["selftest"]) == 0


def test_cli_selftest_failure_code(monkeypatch):
    import cafl.selftest
    monkeypatch.setattr(cafl.selftest, "run_selftest", lambda: False)
    assert main(["selftest"]) == 4


def test_cli_bounds(tmp_path, capsys):
    cfg = _write(tmp_path, name="b", step=dict(eta=0.05), bounds=dict(n_mc=10, probes=2, trajectories=1))
    assert main(["bounds", cfg, "--out-dir", str(tmp_path), "--format", "json"]) == 0
    out = capsys.readouterr().out
    assert "Xi=" in out and "nonconvex:" in out
    doc = json.loads((tmp_path / "b.json").read_text())
    assert doc["constants"]["sigma_ul2"] > 0
