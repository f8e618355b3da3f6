import csv
import json
import os

import numpy as np
import pytest

from polyssm import cli
from polyssm import experiments as ex
from polyssm import polymodel as pm
from polyssm import config as cf


def write_config(tmp_path, text, name="cfg.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# small, stable and quick: a sparse linear system fitted at degree 1
CHEAP = """
[experiment]
system = random
T = 30
replicates = 3
seed = 7
[system]
degree = 1
[fit]
d = 1
K = 20
S = 4
lam = 0.01
"""


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_simulate_writes_states_and_observations(tmp_path):
    cfg = write_config(tmp_path, "[experiment]\nT = 50\nreplicates = 1\n")
    out = tmp_path / "o"
    assert cli.run(["simulate", "--config", cfg, "--out", str(out)]) == 0
    rows = read_rows(out / "simulate" / "rep-0" / "trajectory.csv")
    assert len(rows) == 51  # x_0..x_50
    assert sum(1 for r in rows if r["y_1"] != "") == 50
    manifest = json.loads((out / "simulate" / "rep-0" / "manifest.json").read_text())
    assert manifest["seed"] == 0 and "redraws" in manifest and "truth" in manifest


def test_simulate_is_deterministic_across_runs_and_jobs(tmp_path):
    cfg = write_config(tmp_path, "[experiment]\nT = 20\nreplicates = 2\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run(["simulate", "--config", cfg, "--out", str(a)]) == 0
    assert cli.run(["simulate", "--config", cfg, "--out", str(b), "--jobs", "2"]) == 0
    for rep in ("rep-0", "rep-1"):
        assert (a / "simulate" / rep / "trajectory.csv").read_bytes() == \
            (b / "simulate" / rep / "trajectory.csv").read_bytes()


def test_nonpositive_dt_is_a_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, "[system]\ndt = -1\n")
    assert cli.run(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "system.dt" in capsys.readouterr().err


def test_unknown_key_is_a_config_error(tmp_path):
    cfg = write_config(tmp_path, "[fit]\nlearning_rate = 1\n")
    assert cli.run(["fit", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_fit_writes_artifacts_for_each_replicate_seed(tmp_path):
    cfg = write_config(tmp_path, CHEAP)
    out = tmp_path / "o"
    assert cli.run(["fit", "--config", cfg, "--out", str(out)]) == 0
    for seed in (7, 8, 9):
        d = out / "fit" / "graphgrad" / f"rep-{seed}"
        C, D = pm.load_json(d / "coefficients.json")
        assert C.shape == (3, 4)
        report = json.loads((d / "report.json").read_text())
        assert report["seed"] == seed and report["lam"] == 0.01 and report["lam_tuned"] is False
        trace = read_rows(d / "loss_trace.csv")
        assert len(trace) == report["n_steps"] > 0


def test_fit_is_deterministic(tmp_path):
    cfg = write_config(tmp_path, CHEAP)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run(["fit", "--config", cfg, "--out", str(a)]) == 0
    assert cli.run(["fit", "--config", cfg, "--out", str(b), "--jobs", "2"]) == 0
    for seed in (7, 8, 9):
        rel = os.path.join("fit", "graphgrad", f"rep-{seed}")
        assert (a / rel / "coefficients.json").read_bytes() == (b / rel / "coefficients.json").read_bytes()
        assert (a / rel / "loss_trace.csv").read_bytes() == (b / rel / "loss_trace.csv").read_bytes()


def test_pmle_ignores_lambda(tmp_path):
    outs = []
    for lam in ("0.01", "5"):
        text = CHEAP.replace("lam = 0.01", f"lam = {lam}").replace("seed = 7", "seed = 7\nmethod = pmle")
        cfg = write_config(tmp_path, text, name=f"p{lam}.ini")
        out = tmp_path / f"o{lam}"
        assert cli.run(["fit", "--config", cfg, "--out", str(out)]) == 0
        outs.append(pm.load_json(out / "fit" / "pmle" / "rep-7" / "coefficients.json")[0])
    assert np.array_equal(outs[0], outs[1])


def test_tuned_lambda_is_recorded(tmp_path):
    text = CHEAP.replace("lam = 0.01", "lam = tune") + "[tune]\nT = 20\niterations = 2\n"
    cfg = write_config(tmp_path, text.replace("replicates = 3", "replicates = 1"))
    out = tmp_path / "o"
    assert cli.run(["tune-lambda", "--config", cfg, "--out", str(out)]) == 0
    tuned = json.loads((out / "tune" / "lambda.json").read_text())
    assert tuned["lam"] > 0 and len(tuned["probes"]) >= 2
    assert cli.run(["fit", "--config", cfg, "--out", str(out)]) == 0
    report = json.loads((out / "fit" / "graphgrad" / "rep-7" / "report.json").read_text())
    assert report["lam_tuned"] is True and report["lam"] == tuned["lam"]


def test_evaluate_scores_a_perfect_fit_as_one(tmp_path):
    cfg_path = write_config(tmp_path, CHEAP)
    out = tmp_path / "o"
    cfg = cf.load(cfg_path).with_overrides(experiment__out=str(out))
    for seed in ex.replicate_seeds(cfg):
        real = ex.realise(cfg, seed)
        d = out / "fit" / "graphgrad" / f"rep-{seed}"
        d.mkdir(parents=True)
        pm.save_json(d / "coefficients.json", real.C_true, pm.generate_degree_matrix(3, 1))
    assert cli.run(["evaluate", "--config", cfg_path, "--out", str(out)]) == 0
    rows = read_rows(out / "evaluate" / "graphgrad" / "replicates.csv")
    assert [int(r["seed"]) for r in rows] == [7, 8, 9]
    assert all(float(r["f1"]) == 1.0 and float(r["rmse"]) == 0.0 for r in rows)
    summary = {r["metric"]: r for r in read_rows(out / "evaluate" / "graphgrad" / "summary.csv")}
    assert float(summary["f1"]["mean"]) == 1.0 and int(summary["f1"]["n"]) == 3


def test_evaluate_without_fit_fails(tmp_path, capsys):
    cfg = write_config(tmp_path, CHEAP)
    assert cli.run(["evaluate", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert "missing fit artifact" in capsys.readouterr().err


def test_evaluate_kuramoto_reports_nrmse(tmp_path):
    text = """
[experiment]
system = kuramoto
method = pmle
T = 15
replicates = 1
[system]
n_x = 3
burn_in_time = 1
[fit]
d = 1
K = 30
S = 2
"""
    cfg = write_config(tmp_path, text)
    out = tmp_path / "o"
    assert cli.run(["fit", "--config", cfg, "--out", str(out)]) == 0
    assert cli.run(["evaluate", "--config", cfg, "--out", str(out)]) == 0
    rows = read_rows(out / "evaluate" / "pmle" / "replicates.csv")
    assert set(rows[0]) >= {"nrmse", "rmse_est", "rmse_true_model"}
    assert float(rows[0]["nrmse"]) > 0


@pytest.mark.parametrize("args, edges", [
    (["--truth", "lorenz63"], 8),
    (["--truth", "lorenz96", "--n-x", "20"], 80),
])
def test_export_graph_of_true_systems(tmp_path, args, edges):
    path = tmp_path / "g.dot"
    assert cli.run(["export-graph", *args, "--out", str(path)]) == 0
    assert path.read_text().count("->") == edges


def test_export_graph_of_zero_matrix(tmp_path):
    D = pm.generate_degree_matrix(3, 2)
    coef = tmp_path / "c.json"
    pm.save_json(coef, np.zeros(D.shape), D)
    path = tmp_path / "g.dot"
    per = tmp_path / "per"
    assert cli.run(["export-graph", "--coefficients", str(coef), "--out", str(path),
                    "--per-monomial", str(per)]) == 0
    assert path.read_text().count("->") == 0
    assert os.listdir(per) == []


def test_degeneracy_table_records_sample_size(tmp_path):
    cfg = write_config(tmp_path, "[degeneracy]\nK_list = 5, 20\nn_systems = 3\nT = 30\n")
    out = tmp_path / "o"
    assert cli.run(["degeneracy", "--config", cfg, "--out", str(out)]) == 0
    rows = read_rows(out / "degeneracy" / "degeneracy.csv")
    assert [int(r["K"]) for r in rows] == [5, 20]
    assert all(int(r["n"]) == 3 and 0 <= float(r["mean_steps"]) <= 30 for r in rows)


def test_schema_command_prints_sections(capsys):
    assert cli.run(["schema"]) == 0
    assert "[fit]" in capsys.readouterr().out
