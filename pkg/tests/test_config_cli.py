import csv
import hashlib
import json

import numpy as np
import pytest
import yaml

from periodicsde import cli, config
from periodicsde.config import ConfigError

OU = {"kind": "ou", "eigvals": [1.0], "sigma": 1.0, "period": 1.0, "forcing": [{"cos": [1.0]}]}
DUFFING = {"kind": "duffing", "A": 0.3, "omega": 1.0, "sigma": 0.8}

PARAMS = {
    "simulate": {"x0": 1.0, "n_periods": 3, "record_every": 1, "dt": 0.01, "n_paths": 500},
    "estimate-pm": {"phases": [0.0, 0.5], "burn_in": 3, "n_paths": 2000, "dt": 0.01},
    "convergence": {"x0": 5.0, "ns": [1, 2, 3, 4, 5], "dt": 0.01, "n_paths": 20000},
    "verify-drift": {"mode": "geometric", "C": 2.0, "lambda": 1.0, "grid_density": 64},
    "doeblin": {"lower": -1.0, "upper": 1.0, "start_points": [-1.0, 0.0, 1.0], "dt": 0.01,
                "n_paths": 2000},
    "fokker-planck": {"x_lo": -5, "x_hi": 5, "nx": 100, "nt": 50, "phases": [0.0, 0.5]},
    "ou-analytic": {"n_times": 16, "phases": [0.0, 0.25]},
}


def write_cfg(tmp_path, experiment, model=OU, seed=11, name="cfg.json", **override):
    doc = {"experiment": experiment, "seed": seed, "model": model,
           "params": {**PARAMS[experiment], **override}}
    if seed is None:
        del doc["seed"]
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def run(tmp_path, experiment, out="out", workers=1, extra=(), **kw):
    cfg = write_cfg(tmp_path, experiment, **kw)
    code = cli.main([experiment, "--config", str(cfg), "--out", str(tmp_path / out),
                     "--workers", str(workers), *extra])
    return code, tmp_path / out


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], float)


def test_ou_analytic_table(tmp_path):
    code, out = run(tmp_path, "ou-analytic")
    assert code == 0
    header, rows = read_csv(out / "xi.csv")
    assert header == ["t", "xi_x0", "var_x0", "xi_period_gap"]
    assert np.all(rows[:, -1] < 1e-10)
    assert np.allclose(rows[:, 2], 0.5)
    pm = json.loads((out / "periodic_measures.json").read_text())
    assert set(pm) == {"0.0", "0.25"}


def test_convergence_fit(tmp_path):
    code, out = run(tmp_path, "convergence")
    assert code == 0
    fit = json.loads((out / "fit.json").read_text())
    assert fit["analytic_r"] == pytest.approx(np.exp(-1))
    assert 0.8 * np.exp(-1) <= fit["fitted_r"] <= 1.25 * np.exp(-1)
    header, rows = read_csv(out / "curve.csv")
    assert header == ["n", "tv", "stderr"] and len(rows) == 5


@pytest.mark.parametrize("experiment", list(PARAMS))
def test_every_subcommand(tmp_path, experiment):
    model = DUFFING if experiment == "simulate" else OU
    code, out = run(tmp_path, experiment, model=model)
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    files = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    assert [a["file"] for a in manifest["artifacts"]] == files
    for a in manifest["artifacts"]:
        assert hashlib.sha256((out / a["file"]).read_bytes()).hexdigest() == a["sha256"]
    assert manifest["seed"] == 11 and manifest["experiment"] == experiment
    assert manifest["config"]["params"] == PARAMS[experiment]
    for key in ("version", "wall_time_s", "created"):
        assert key in manifest


def test_idempotent_across_runs_and_workers(tmp_path):
    bodies = []
    for i, w in enumerate((1, 1, 3)):
        code, out = run(tmp_path, "estimate-pm", out=f"o{i}", workers=w, model=DUFFING)
        assert code == 0
        bodies.append({p.name: p.read_bytes() for p in out.iterdir()
                       if p.suffix == ".csv"})
    assert bodies[0] == bodies[1] == bodies[2]
    assert len(bodies[0]) == 3


def test_binary_samples(tmp_path):
    code, out = run(tmp_path, "simulate", format="binary")
    assert code == 0
    with np.load(out / "samples_n0003.npz") as z:
        assert z["x0"].shape == (500,)


@pytest.mark.parametrize("bad", [
    {"dt": -0.01},
    {"n_paths": 0},
    {"unknown_key": 1},
])
def test_invalid_params_exit_2(tmp_path, bad, capsys):
    code, out = run(tmp_path, "simulate", **bad)
    assert code == 2 and not out.exists()
    assert "error" in capsys.readouterr().err


def test_config_level_errors(tmp_path):
    code, out = run(tmp_path, "simulate", seed=None)
    assert code == 2 and not out.exists()
    # --seed fills in a missing seed
    code, out = run(tmp_path, "simulate", seed=None, extra=("--seed", "5"))
    assert code == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 5
    # unknown top-level key, bad model kind, mismatched experiment
    for doc in ({"seed": 1, "model": OU, "params": {}, "extra": 1},
                {"seed": 1, "model": {"kind": "levy"}, "params": {}},
                {"experiment": "doeblin", "seed": 1, "model": OU, "params": PARAMS["simulate"]}):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(doc))
        assert cli.main(["simulate", "--config", str(p), "--out", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x").exists()
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.yaml"),
                     "--out", str(tmp_path / "x")]) == 2
    code, _ = run(tmp_path, "simulate", out="w", workers=0)
    assert code == 2


def test_model_errors_exit_2(tmp_path):
    code, out = run(tmp_path, "simulate", model={**DUFFING, "sigma": 0.0})
    assert code == 2 and not out.exists()
    code, out = run(tmp_path, "fokker-planck", model={"kind": "polynomial", "period": 1.0,
                                                     "coeffs": [[0, -1], [0, -1]],
                                                     "sigma": [[1, 0], [0, 1]]})
    assert code == 2 and not out.exists()


def test_numerical_failure_exit_3(tmp_path, capsys):
    cubic = {"kind": "polynomial", "period": 1.0, "coeffs": [[0, 0, 0, 1.0]], "sigma": 1.0}
    code, out = run(tmp_path, "simulate", model=cubic, x0=5.0, dt=0.1)
    assert code == 3 and not out.exists()
    assert "numerical failure" in capsys.readouterr().err
    code, out = run(tmp_path, "fokker-planck", max_iters=2)
    assert code == 3


def test_yaml_config(tmp_path):
    doc = {"seed": 3, "output_dir": str(tmp_path / "y"),
           "model": {"kind": "polynomial", "period": 2.0, "sigma": 0.5,
                     "coeffs": [[{"sin": [0.2]}, 1.0, 0.0, -1.0]]},
           "params": {"mode": "classify"}}
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(doc))
    assert cli.main(["verify-drift", "--config", str(p)]) == 0
    rep = json.loads((tmp_path / "y" / "drift_report.json").read_text())
    assert rep["verdict"] == "certified" and rep["constants"]["lambda"] == 0.5


def test_trigpoly_conventions():
    std = config.TrigPolyCfg(a0=1.0, cos=[0.5], sin=[0.25]).build(2.0)
    sh = config.TrigPolyCfg(a0=1.0, cos=[-0.5], sin=[-0.25], convention="shifted").build(2.0)
    t = np.linspace(0, 2, 7)
    assert np.allclose(std(t), 0.5 + 0.5 * np.cos(np.pi * t) + 0.25 * np.sin(np.pi * t))
    assert np.allclose(std(t), sh(t))


def test_validate_rules():
    base = {"seed": 1, "model": OU}
    with pytest.raises(ConfigError, match="strictly increasing"):
        config.validate({**base, "params": {**PARAMS["convergence"], "ns": [2, 2]}}, "convergence")
    with pytest.raises(ConfigError, match="needs c and lambda"):
        config.validate({**base, "params": {"mode": "weak-dissipativity"}}, "verify-drift")
    with pytest.raises(ConfigError):
        config.validate({**base, "seed": -1, "params": {}}, "ou-analytic")
    cfg, p = config.validate({**base, "params": {}}, "ou-analytic", seed=2**64 - 1)
    assert cfg.seed == 2**64 - 1 and p.n_times == 64
