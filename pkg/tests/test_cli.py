import csv
import json
import math
import subprocess
import sys

import pytest

from conftest import CONFIGS
from test_portfolio import merton_F
from factorhjb.cli import EXIT_CERT, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, EXIT_VERIFY, main, run

SMALL_MC = ["mc.paths=2000", "mc.steps=400", "mc.bias_paths=1000"]


def _json(path):
    return json.loads(path.read_text())


def _outputs(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "timing.json"}


def test_solve_oracle(tmp_path):
    code = run("solve", CONFIGS / "oracle.toml", out_dir=tmp_path)
    assert code == EXIT_OK
    names = {p.name for p in tmp_path.iterdir()}
    assert {"field.csv", "certificate.json", "summary.json", "manifest.json", "timing.json"} <= names
    summary = _json(tmp_path / "summary.json")
    with open(tmp_path / "field.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if float(r["t"]) == 0.0 and float(r["x1"]) == 0.0]
    assert float(rows[0]["G"]) == pytest.approx(math.sqrt(5.0), rel=1e-3)
    assert summary["certificate"]["pass"]
    man = _json(tmp_path / "manifest.json")
    assert man["status"] == "ok" and man["exit_code"] == 0
    assert man["config_hash"] == summary["config_hash"]
    assert set(man["versions"]) >= {"factorhjb", "numpy", "scipy", "python"}
    assert "field.csv" in man["artifacts"]


def test_bad_config_value_exits_2(tmp_path):
    code = run("verify", CONFIGS / "oracle.toml", ["mc.paths=0"], out_dir=tmp_path)
    assert code == EXIT_CONFIG
    err = _json(tmp_path / "error.json")
    assert "paths" in err["error"]["message"] and err["error"]["exit_code"] == 2


def test_missing_config_exits_2(tmp_path):
    assert run("solve", tmp_path / "nope.toml", out_dir=tmp_path / "o") == EXIT_CONFIG


def test_simulate_needs_market(tmp_path):
    assert run("simulate", CONFIGS / "oracle.toml", out_dir=tmp_path) == EXIT_CONFIG


def test_runs_are_byte_identical_across_threads(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("verify", CONFIGS / "oracle.toml", SMALL_MC, out_dir=a, threads=1) == EXIT_OK
    assert run("verify", CONFIGS / "oracle.toml", SMALL_MC, out_dir=b, threads=3) == EXIT_OK
    assert _outputs(a) == _outputs(b)
    summary = _json(a / "summary.json")
    assert summary["verification"]["pass"]
    assert len(summary["verification"]["points"]) == 5


def test_seed_flag_changes_estimates(tmp_path):
    ov = SMALL_MC + ["grid.nodes=61", "grid.nt=31", "mc.rel_tol=1"]
    run("verify", CONFIGS / "m2_kgt1.toml", ov, out_dir=tmp_path / "a", seed=1)
    run("verify", CONFIGS / "m2_kgt1.toml", ov, out_dir=tmp_path / "b", seed=2)
    man = _json(tmp_path / "a" / "manifest.json")
    assert man["seeds"]["mc"] == 1
    ma = [p["mc"] for p in _json(tmp_path / "a" / "summary.json")["verification"]["points"]]
    mb = [p["mc"] for p in _json(tmp_path / "b" / "summary.json")["verification"]["points"]]
    assert ma != mb


def test_dump_paths(tmp_path):
    assert run("verify", CONFIGS / "oracle.toml", SMALL_MC + ["mc.dump_paths=3"], out_dir=tmp_path, dump_paths=True) == EXIT_OK
    lines = (tmp_path / "paths.csv").read_text().splitlines()
    assert lines[0] == "path,step,t,x1,q1,c"
    assert len(lines) == 1 + 3 * 401


def test_sweep_is_reproducible(tmp_path):
    ov = ["grid.nodes=41", "grid.nt=21"]
    assert run("sweep", CONFIGS / "market_constant.toml", ov, out_dir=tmp_path / "a") == EXIT_OK
    assert run("sweep", CONFIGS / "market_constant.toml", ov, out_dir=tmp_path / "b") == EXIT_OK
    text = (tmp_path / "a" / "sweep.csv").read_text()
    assert text == (tmp_path / "b" / "sweep.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    assert [float(r["gamma"]) for r in rows] == [0.2, 0.4, 0.6, 0.8]
    assert all(r["certificate_pass"] == "true" for r in rows)
    for r in rows:
        assert float(r["G_x0_t0"]) == pytest.approx(merton_F(0.03, 0.2, float(r["gamma"]), 0.05, 1.0), rel=2e-3)
    assert _json(tmp_path / "a" / "summary.json")["G_x0_t0_trend"] == "decreasing"


def test_sweep_needs_key(tmp_path):
    assert run("sweep", CONFIGS / "oracle.toml", out_dir=tmp_path) == EXIT_CONFIG


def test_residual_of_stored_field(tmp_path):
    assert run("solve", CONFIGS / "oracle.toml", ["grid.nodes=41", "grid.nt=21"], out_dir=tmp_path / "s") == EXIT_OK
    code = run("residual", CONFIGS / "oracle.toml", ["grid.nodes=41", "grid.nt=21"], out_dir=tmp_path / "r", field=tmp_path / "s" / "field.csv")
    assert code == EXIT_OK
    assert (tmp_path / "r" / "residual.csv").exists()


def test_residual_needs_field(tmp_path):
    assert run("residual", CONFIGS / "oracle.toml", out_dir=tmp_path) == EXIT_CONFIG


def test_failed_certificate_marks_artifacts(tmp_path):
    code = run("solve", CONFIGS / "oracle.toml", ["solver.max_box_rounds=1", "solver.R0=0.01", "pde.h='0.5*tanh(2*x1)'", "pde.theta='0'"], out_dir=tmp_path)
    assert code in (EXIT_CERT, EXIT_SOLVER)
    assert (tmp_path / "error.json").exists()
    man = _json(tmp_path / "manifest.json")
    assert man["status"] == "failed" and man["exit_code"] == code
    assert not (tmp_path / "field.csv").exists()


def test_failed_verification_exit_code(tmp_path):
    code = run("verify", CONFIGS / "oracle.toml", ["mc.paths=200", "mc.steps=10", "mc.bias_paths=100", "mc.rel_tol=1e-9", "mc.field_error='none'"], out_dir=tmp_path)
    assert code == EXIT_VERIFY
    assert (tmp_path / "summary.json.failed").exists()


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "factorhjb.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
    assert main(["solve", "--config", str(CONFIGS / "oracle.toml"), "--out", str(tmp_path), "--set", "grid.nodes=41", "--set", "grid.nt=21"]) == EXIT_OK


def test_threads_must_be_positive(tmp_path):
    assert run("solve", CONFIGS / "oracle.toml", out_dir=tmp_path, threads=0) == EXIT_CONFIG
