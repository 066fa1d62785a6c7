import json

import numpy as np
import pytest

from hefty.causal import dml_estimate, make_crossfit_plan
from hefty.cli import main, read_experiment_csv
from hefty.simharness import PairedPeriodSpec, SimulationReport, fmt, paired_period_dataset
from hefty.tail_model import MixtureParams, sample_mixture

HEAVY = MixtureParams(0.3, 0.65, 0.05, 0.002, 5000.0, 1.5)


@pytest.fixture
def params_file(tmp_path):
    path = tmp_path / "params.json"
    path.write_text(HEAVY.to_json())
    return path


def write_experiment(path, data):
    cols = ["unit_id", "y", "t"] + [f"x{j + 1}" for j in range(0 if data.covariates is None else data.covariates.shape[1])]
    lines = [",".join(cols)]
    for i in range(data.n):
        row = [str(i), repr(float(data.response[i])), str(int(data.assignment[i]))]
        if data.covariates is not None:
            row += [repr(float(v)) for v in data.covariates[i]]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def test_fit_round_trip(tmp_path, capsys):
    y = sample_mixture(HEAVY, 200_000, 1)
    inp, out = tmp_path / "y.csv", tmp_path / "fit.json"
    inp.write_text("y\n" + "\n".join(repr(float(v)) for v in y) + "\n")
    assert main(["fit", "--input", str(inp), "--cutoff", "5000", "--output", str(out)]) == 0
    fitted = MixtureParams.from_json(out.read_text())
    assert MixtureParams.from_json(fitted.to_json()) == fitted
    assert abs(fitted.alpha / 1.5 - 1) < 0.05
    printed = capsys.readouterr().out
    assert "tail=" in printed and "qq max abs gap" in printed


def test_fit_negative_value_names_row(tmp_path, capsys):
    inp = tmp_path / "y.csv"
    inp.write_text("y\n1.0\n2.0\n-3.0\n")
    assert main(["fit", "--input", str(inp), "--cutoff", "1", "--output", str(tmp_path / "o.json")]) == 2
    assert "row 4" in capsys.readouterr().err


def test_fit_failure_is_exit_3(tmp_path):
    inp = tmp_path / "y.csv"
    inp.write_text("y\n0\n0.5\n0.7\n")
    assert main(["fit", "--input", str(inp), "--cutoff", "1", "--output", str(tmp_path / "o.json")]) == 3


def test_missing_input_is_exit_2(tmp_path):
    assert main(["fit", "--input", str(tmp_path / "nope.csv"), "--cutoff", "1", "--output", str(tmp_path / "o")]) == 2


def test_estimate_toy_file(tmp_path, capsys):
    inp = tmp_path / "toy.csv"
    inp.write_text("unit_id,y,t\na,2,1\nb,4,1\nc,1,0\nd,3,0\n")
    assert main(["estimate", "--input", str(inp), "--method", "naive"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "method,effect_abs,lift,std_err,z,p"
    assert lines[1].split(",")[:3] == ["naive", "1", "0.5"]
    assert main(["estimate", "--input", str(inp), "--method", "winsorized", "--percentile", "1.0"]) == 0
    wins = capsys.readouterr().out.splitlines()[1]
    assert wins.split(",")[1:] == lines[1].split(",")[1:]


def test_estimate_covariate_method_without_covariates(tmp_path):
    inp = tmp_path / "toy.csv"
    inp.write_text("unit_id,y,t\na,2,1\nb,4,1\nc,1,0\nd,3,0\n")
    assert main(["estimate", "--input", str(inp), "--method", "dml_huber"]) == 4


def test_estimate_malformed_assignment(tmp_path, capsys):
    inp = tmp_path / "bad.csv"
    inp.write_text("unit_id,y,t\na,2,1\nb,4,2\n")
    assert main(["estimate", "--input", str(inp)]) == 2
    assert "row 3" in capsys.readouterr().err


def test_estimate_dml_huber_matches_library(tmp_path, capsys):
    data = paired_period_dataset(PairedPeriodSpec(HEAVY), 400, 11)
    inp = tmp_path / "exp.csv"
    write_experiment(inp, data)
    assert main(["estimate", "--input", str(inp), "--method", "dml_huber", "--seed", "17"]) == 0
    line = capsys.readouterr().out.splitlines()[1].split(",")
    parsed = read_experiment_csv(inp)
    r = dml_estimate(parsed, make_crossfit_plan(parsed.n, parsed.assignment, 5, 17), "huber")
    assert line[1:] == [fmt(v) for v in (r.effect_abs, r.lift, r.std_err, r.z_stat, r.p_value)]


def test_estimate_seed_from_environment(tmp_path, capsys, monkeypatch):
    data = paired_period_dataset(PairedPeriodSpec(HEAVY), 200, 12)
    inp = tmp_path / "exp.csv"
    write_experiment(inp, data)
    monkeypatch.setenv("HEFTY_SEED", "17")
    main(["estimate", "--input", str(inp), "--method", "dml"])
    from_env = capsys.readouterr().out
    monkeypatch.delenv("HEFTY_SEED")
    main(["estimate", "--input", str(inp), "--method", "dml", "--seed", "17"])
    assert capsys.readouterr().out == from_env


def test_simulate_single_rep(tmp_path, params_file):
    out = tmp_path / "r.csv"
    code = main(["simulate", "--params", str(params_file), "--n-per-arm", "1000", "--reps", "1",
                 "--methods", "naive,huber,winsor_unified", "--output", str(out), "--workers", "1"])
    assert code == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 4
    rep = SimulationReport.from_csv(out.read_text())
    assert all(np.isfinite(rep[m].mse) for m in rep.labels)


def test_simulate_config_flags_override_and_repeatable(tmp_path, params_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"params": str(params_file), "n_per_arm": 800, "reps": 50, "seed": 9,
                               "methods": ["naive", {"kind": "winsor_unified", "label": "w95", "percentile": 0.95}]}))
    a, b, pv = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "p.csv"
    base = ["simulate", "--config", str(cfg), "--reps", "6", "--workers", "1"]
    assert main(base + ["--output", str(a), "--pvalues", str(pv)]) == 0
    assert main(base + ["--output", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert "w95,6," in a.read_text()
    assert len(pv.read_text().splitlines()) == 1 + 12


def test_simulate_paired_generator(tmp_path, params_file):
    out = tmp_path / "r.csv"
    code = main(["simulate", "--params", str(params_file), "--generator", "paired", "--n-per-arm", "300",
                 "--reps", "3", "--methods", "post_strat,dml_huber", "--output", str(out), "--workers", "1"])
    assert code == 0
    assert out.read_text().splitlines()[1].startswith("post_strat,3,")


def test_simulate_configuration_errors(tmp_path, params_file):
    out = str(tmp_path / "r.csv")
    assert main(["simulate", "--params", str(params_file), "--methods", "psm", "--output", out]) == 4
    assert main(["simulate", "--params", str(params_file), "--methods", "lasso", "--output", out]) == 4
    assert main(["simulate", "--params", str(tmp_path / "none.json"), "--output", out]) == 4
    assert main(["simulate", "--params", str(params_file), "--output", str(tmp_path / "no" / "r.csv")]) == 4
    assert main(["simulate", "--config", str(tmp_path / "none.json")]) == 4


def test_simulate_excessive_failures_exit_5(tmp_path, params_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"methods": [{"kind": "winsorized", "label": "bad", "bogus": 1}]}))
    code = main(["simulate", "--config", str(cfg), "--params", str(params_file), "--n-per-arm", "200",
                 "--reps", "2", "--output", str(tmp_path / "r.csv"), "--workers", "1"])
    assert code == 5


def test_gridsearch_single_point_and_repeatable(tmp_path, params_file):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["gridsearch", "--params", str(params_file), "--sizes", "2000", "--lifts", "0.015",
            "--grid", "0.99", "--reps", "5", "--seed", "3", "--workers", "1"]
    assert main(args + ["--output", str(a)]) == 0
    assert main(args + ["--output", str(b)]) == 0
    assert a.read_text().splitlines()[0] == "percentile,mse"
    assert len(a.read_text().splitlines()) == 2
    assert a.read_bytes() == b.read_bytes()


def test_gridsearch_default_grid_and_lookup(tmp_path, params_file, capsys):
    out, lookup = tmp_path / "curves.csv", tmp_path / "lookup.csv"
    code = main(["gridsearch", "--params", str(params_file), "--sizes", "20000", "--lifts", "0.01,0.06",
                 "--reps", "20", "--output", str(out), "--lookup", str(lookup), "--workers", "1"])
    assert code == 0
    rows = lookup.read_text().splitlines()
    assert rows[0] == "n_per_arm,lift,optimal_percentile,min_mse" and len(rows) == 3
    assert len(out.read_text().splitlines()) == 1 + 20
    assert all(float(r.split(",")[2]) < 1.0 for r in rows[1:])
