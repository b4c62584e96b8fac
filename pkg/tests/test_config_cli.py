import json
from fractions import Fraction
from pathlib import Path

import pytest

from wsnqcd import cli, nodm
from wsnqcd.config import ConfigError, config_from_dict, load_config, baseline_scenario, period_for_node_rate
from wsnqcd.experiments import read_sweep_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

BASE = {
    "network": {"n_sensors": 2, "period": 4, "sigma": 0.8},
    "change": {"rho": 0.0, "p": 0.02},
    "observation": {"family": "gaussian", "pre_mean": 0, "pre_var": 1, "post_mean": 1, "post_var": 1},
    "alpha": 0.05,
    "seed": 1,
    "episodes": 200,
    "calibration_episodes": 200,
}


def write(tmp_path, d, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(d, indent=2))
    return path


@pytest.mark.parametrize("name", ["baseline", "nodes_third", "nodes_hundredth", "unstable"])
def test_shipped_configs_load(name):
    scn = load_config(CONFIGS / f"{name}.json")
    assert scn.net.n_sensors == 10 and scn.change.p == 0.0005


def test_round_trip_through_dict():
    scn = load_config(CONFIGS / "nodes_third.json")
    again = config_from_dict(json.loads(json.dumps(scn.to_dict())))
    assert again == scn
    assert again.sweep.node_rate == Fraction(1, 3)


def test_bad_value_reports_field_and_line(tmp_path):
    d = json.loads(json.dumps(BASE))
    d["change"]["p"] = "x"
    path = write(tmp_path, d)
    with pytest.raises(ConfigError) as ei:
        load_config(path)
    e = ei.value
    assert e.field_path == "change.p"
    assert path.read_text().splitlines()[e.line - 1].strip().startswith('"p"')
    assert "line" in str(e) and "change.p" in str(e)


def test_invalid_json_reports_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "network": {"n_sensors": 2,,}\n}\n')
    with pytest.raises(ConfigError) as ei:
        load_config(path)
    assert ei.value.line == 2


@pytest.mark.parametrize("mutate, field", [
    (lambda d: d.update(bogus=1), "bogus"),
    (lambda d: d.pop("network"), "network"),
    (lambda d: d["network"].update(n_sensors=2.5), "network.n_sensors"),
    (lambda d: d["observation"].update(family="cauchy"), "observation.family"),
    (lambda d: d.update(alpha=0.99, change={"rho": 0.5, "p": 0.02}), "alpha"),
    (lambda d: d.update(sweep={"periods": [3, -1]}), "sweep.periods"),
    (lambda d: d.update(sweep={"node_rate": "a/b"}), "sweep.node_rate"),
    (lambda d: d.update(allow_unstable="yes"), "allow_unstable"),
])
def test_field_diagnostics(mutate, field):
    d = json.loads(json.dumps(BASE))
    mutate(d)
    with pytest.raises(ConfigError) as ei:
        config_from_dict(d, json.dumps(d, indent=2))
    assert ei.value.field_path == field


def test_period_for_node_rate():
    assert period_for_node_rate(1, Fraction(1, 3)) == 3
    assert period_for_node_rate(20, Fraction(1, 3)) == 60
    assert period_for_node_rate(10, Fraction(1, 100)) == 1000
    with pytest.raises(ConfigError):
        period_for_node_rate(3, Fraction(2, 7))


def test_int_list_parser():
    assert cli._int_list("28-31,34") == [28, 29, 30, 31, 34]
    with pytest.raises(Exception):
        cli._int_list("0-2")


def test_unstable_config_exits_3(capsys):
    assert cli.main(["run", "--config", str(CONFIGS / "unstable.json")]) == cli.EXIT_UNSTABLE
    err = capsys.readouterr().err
    assert "27" in err and "0.3636" in err


def test_bad_config_exits_2(tmp_path, capsys):
    d = json.loads(json.dumps(BASE))
    d["network"]["sigma"] = 1.5
    assert cli.main(["run", "--config", str(write(tmp_path, d))]) == cli.EXIT_CONFIG
    assert "network.sigma" in capsys.readouterr().err


def test_run_writes_csv_and_trace(tmp_path, capsys):
    cfg = write(tmp_path, BASE)
    out, trace = tmp_path / "run.csv", tmp_path / "trace.csv"
    rc = cli.main(["run", "--config", str(cfg), "--out", str(out), "--trace", str(trace), "--trace-slots", "50"])
    assert rc == cli.EXIT_OK
    head, rows = read_sweep_csv(out)
    assert "seed=1" in head
    assert [r["detector"] for r in rows] == ["nodm", "nadm"]
    assert all(r["delay_ci"] and r["pfa_lo"] and r["pfa_hi"] for r in rows)
    assert len(trace.read_text().splitlines()) > 50


def test_csv_is_bit_identical_on_rerun(tmp_path):
    cfg = write(tmp_path, BASE)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["sweep-rate", "--config", str(cfg), "--periods", "4,6", "--out", str(a)]) == 0
    assert cli.main(["sweep-rate", "--config", str(cfg), "--periods", "4,6", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_sweep_nodes_decision_only(tmp_path):
    cfg = write(tmp_path, BASE)
    out = tmp_path / "n.csv"
    rc = cli.main(["sweep-nodes", "--config", str(cfg), "--nodes", "1-2", "--node-rate", "1/4",
                   "--decision-only", "--out", str(out)])
    assert rc == 0
    _, rows = read_sweep_csv(out)
    assert [(r["n_sensors"], r["period"]) for r in rows] == [("1", "4"), ("2", "8")]


def test_sweep_nodes_needs_rate(tmp_path):
    assert cli.main(["sweep-nodes", "--config", str(write(tmp_path, BASE)), "--nodes", "1-2"]) == cli.EXIT_CONFIG


def test_validate_passes(capsys):
    assert cli.main(["validate"]) == cli.EXIT_OK
    assert "5/5 checks passed" in capsys.readouterr().out


def test_validate_passes_under_other_seed(capsys):
    assert cli.main(["validate", "--seed", "17"]) == cli.EXIT_OK


def test_validate_catches_mutated_lag(monkeypatch, capsys):
    real = nodm.l_of_r
    monkeypatch.setattr(nodm, "l_of_r", lambda p, period: real(p, period) + 1e-6)
    assert cli.main(["validate"]) == cli.EXIT_VALIDATION
    out = capsys.readouterr().out
    assert "FAIL  l_of_r" in out
    assert "PASS  lemma_round_trip" in out


def test_dp_solve(tmp_path, capsys):
    out = tmp_path / "dp.csv"
    assert cli.main(["dp-solve", "--period", "2", "--delta-cap", "4", "--grid", "51", "--out", str(out)]) == 0
    assert "all up-sets=True" in capsys.readouterr().out
    assert out.read_text().startswith("# wsnqcd dp-thresholds v1")


def test_dp_solve_rejects_large_instance():
    assert cli.main(["dp-solve", "--nodes", "3"]) == cli.EXIT_CONFIG


def test_default_scenario_is_the_baseline():
    s = baseline_scenario()
    assert (s.net.n_sensors, s.net.period, s.net.sigma, s.change.p, s.alpha) == (10, 34, 0.3636, 0.0005, 0.01)
