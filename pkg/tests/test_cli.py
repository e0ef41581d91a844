from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from bsdelab.cli import main

HEAT = {
    "seed": 5,
    "model": {"kind": "brownian", "sigma": 1.0},
    "clock": {"kind": "identity", "T": 1.0, "n_steps": 10},
    "driver": {"name": "expression", "f": "0", "g": "x_1**2", "K_y": 0, "K_z": 0},
    "solver": {"n_paths": 2000, "basis": {"family": "polynomial", "degree": 2}},
    "nodes": [{"s": 0.0, "x": 0.0}, {"s": 0.5, "x": 1.0}],
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _run(tmp_path, command, cfg, *extra, out="out"):
    return main([command, "--config", _write(tmp_path, cfg), "--out", str(tmp_path / out), *extra])


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _header(path):
    with open(path) as fh:
        return next(csv.reader(fh))


def test_solve_smoke(tmp_path):
    assert _run(tmp_path, "solve", HEAT) == 0
    out = tmp_path / "out"
    assert _header(out / "solution.csv") == ["s", "x_1", "u", "v", "stderr_u"]
    conv = json.loads((out / "convergence.json").read_text())
    assert conv["converged"] and conv["nodes"][0]["report"]["iterations"] == 1
    echo = json.loads((out / "config_echo.json").read_text())
    assert echo["solver"]["max_iters"] == 20 and echo["threads"] == 1  # defaults filled in


def test_solve_forced_nonconvergence(tmp_path):
    cfg = dict(HEAT, driver={"name": "sin_cos"}, solver={"n_paths": 500, "max_iters": 1})
    assert _run(tmp_path, "solve", cfg) == 2


def test_invalid_alpha_names_field(tmp_path, capsys):
    cfg = dict(HEAT, model={"kind": "alpha_stable", "alpha": 2.5})
    assert _run(tmp_path, "solve", cfg) == 1
    assert "model.alpha" in capsys.readouterr().err


def test_stable_model_is_one_dimensional(tmp_path, capsys):
    cfg = dict(HEAT, model={"kind": "alpha_stable", "alpha": 1.5, "dim": 2})
    assert _run(tmp_path, "solve", cfg) == 1
    assert "model.dim" in capsys.readouterr().err


def test_unknown_key_and_bad_expression(tmp_path, capsys):
    assert _run(tmp_path, "solve", dict(HEAT, bogus=1)) == 1
    cfg = dict(HEAT, driver={"name": "expression", "f": "y + import", "g": "0", "K_y": 1, "K_z": 0})
    assert _run(tmp_path, "solve", cfg) == 1
    assert "driver.f" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1


def test_seed_override_changes_output(tmp_path):
    _run(tmp_path, "solve", HEAT, out="a")
    _run(tmp_path, "solve", HEAT, "--seed", "6", out="b")
    _run(tmp_path, "solve", HEAT, "--seed", "5", out="c")
    a, b, c = ((tmp_path / d / "solution.csv").read_bytes() for d in "abc")
    assert a != b and a == c


def test_threads_do_not_change_results(tmp_path):
    cfg = dict(HEAT, driver={"name": "sin_cos"}, solver={"n_paths": 3000, "tol": 1e-6})
    assert _run(tmp_path, "solve", cfg, "--threads", "1", out="t1") == 0
    assert _run(tmp_path, "solve", cfg, "--threads", "8", out="t8") == 0
    assert (tmp_path / "t1" / "solution.csv").read_bytes() == (tmp_path / "t8" / "solution.csv").read_bytes()


VERIFY = dict(
    HEAT,
    driver={"name": "zero", "g": "x_1**2"},
    solver={"n_paths": 10000},
    verify={"oracle": {"kind": "heat_quadratic"}},
)


def test_verify_heat_and_negative_control(tmp_path):
    assert _run(tmp_path, "verify", VERIFY, out="ok") == 0
    assert _header(tmp_path / "ok" / "residual.csv") == ["t", "x_1", "residual"]
    rep = json.loads((tmp_path / "ok" / "verify.json").read_text())
    assert rep["passed"] and rep["residual_max"] <= 1e-6
    shifted = dict(VERIFY, verify={"oracle": {"kind": "heat_quadratic"}, "shift": 0.5})
    assert _run(tmp_path, "verify", shifted, out="bad") == 2
    wrong = dict(VERIFY, verify={"u": "x_1**2 + 2*(1 - t)"})
    assert _run(tmp_path, "verify", wrong, out="wrong") == 2


def test_verify_empty_nodes(tmp_path):
    assert _run(tmp_path, "verify", dict(VERIFY, nodes=[])) == 1


def test_verify_markov(tmp_path):
    cfg = dict(VERIFY, verify={"oracle": {"kind": "heat_quadratic"}, "markov": True})
    assert _run(tmp_path, "verify", cfg) == 0
    assert "markov" in json.loads((tmp_path / "out" / "verify.json").read_text())


def test_gamma_check(tmp_path):
    cfg = dict(HEAT, gamma_check={"functions": ["x_1**2", "sin(x_1)"], "points": [{"s": 0.0, "x": 0.5}]})
    assert _run(tmp_path, "gamma-check", cfg) == 0
    out = tmp_path / "out"
    assert _header(out / "gamma.csv") == ["t", "x_1", "phi", "psi", "a_phi", "gamma"]
    rows = _rows(out / "gamma.csv")
    assert float(rows[0]["gamma"]) == pytest.approx(1.0)  # (2x)^2 at x = 1/2
    assert float(rows[0]["a_phi"]) == pytest.approx(1.0)
    assert json.loads((out / "gamma_check.json").read_text())["max_asymmetry"] <= 1e-8


def _measure(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_index", "pos_mass", "neg_mass"])
        w.writerows(rows)
    return str(path)


def test_decompose(tmp_path):
    a = _measure(tmp_path / "a.csv", [(0, 1.0, 0.0), (1, 0.5, 0.0), (2, 0.0, 0.2)])
    assert main(["decompose", a, a, "--out", str(tmp_path / "same")]) == 1  # B must be nonnegative
    b = _measure(tmp_path / "b.csv", [(0, 2.0, 0.0), (1, 0.5, 0.0), (2, 0.0, 0.0)])
    assert main(["decompose", b, b, "--out", str(tmp_path / "same")]) == 0
    rows = _rows(tmp_path / "same" / "density.csv")
    assert [float(r["density"]) for r in rows] == [1.0, 1.0, 0.0]
    z = _measure(tmp_path / "z.csv", [(0, 0.0, 0.0), (1, 0.0, 0.0), (2, 0.0, 0.0)])
    assert main(["decompose", a, z, "--out", str(tmp_path / "zero")]) == 0
    rows = _rows(tmp_path / "zero" / "density.csv")
    assert [float(r["K"]) for r in rows] == [1.0, 1.0, 1.0]
    other = _measure(tmp_path / "o.csv", [(0, 1.0, 0.0), (1, 1.0, 0.0)])
    assert main(["decompose", a, other, "--out", str(tmp_path / "x")]) == 1


def test_schema_and_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bsdelab", "schema"], capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["title"] == "bsdelab run configuration"
