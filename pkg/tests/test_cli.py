import csv
import json

import numpy as np
import pytest

from magstar import dynamics
from magstar.cli import ConfigError, RunConfig, load_field, run
from magstar.symbols import deserialize


def _run(capsys, *argv):
    code = run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_star_stdout(capsys):
    code, out, _ = _run(capsys, "star", "p1", "p2", "--field", "linear_B")
    assert code == 0
    assert out.splitlines() == ["MAGSTAR-POLY 1 n=2", "1/2*i * hbar + 1/4*i * q1 hbar + p1 p2"]


def test_star_hbar_substitution(capsys):
    code, out, _ = _run(capsys, "star", "q1", "p1", "--field", "zero", "--hbar", "2")
    assert code == 0
    assert out.splitlines()[1] == "i + q1 p1"


def test_star_products(capsys, tmp_path):
    code, out, _ = _run(capsys, "star", "p1", "q1", "--field", "zero", "--product", "tau:0")
    assert (code, out.splitlines()[1]) == (0, "-i * hbar + q1 p1")
    code, out, _ = _run(capsys, "star", "p1^2", "q1", "--field", "linear_B", "--product", "series:1")
    assert (code, out.splitlines()[1]) == (0, "-i * p1 hbar + q1 p1^2")
    m = tmp_path / "m.json"
    m.write_text(json.dumps({"M": [[0, 0, 0, 0], [0, 0, 0, 0], [-1, 0, 0, 0], [0, 0, 0, 0]]}))
    code, out, _ = _run(capsys, "star", "p1", "p1", "--field", "zero", "--product", f"m:{m}")
    assert (code, out.splitlines()[1]) == (0, "-i * hbar + p1^2")


def test_star_to_file(capsys, tmp_path):
    code, out, _ = _run(capsys, "star", "q1", "p2", "--field", "constant_B", "--out", str(tmp_path))
    assert code == 0 and out == ""
    assert deserialize((tmp_path / "product.poly").read_text()).n == 2


def test_convolve_and_grid_star(capsys, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    code, _, err = _run(capsys, "convolve", "q1", "p1", "--field", "constant_B", "--grid", "8:0.5",
                        "--out", str(a))
    assert code == 0
    assert json.loads(err)["shape"] == [8, 8, 8, 8]
    g = str(a / "product.msgrid")
    code, _, _ = _run(capsys, "star", g, g, "--product", "grid", "--field", "constant_B", "--out", str(b))
    assert code == 0
    assert (b / "product.msgrid").read_bytes()[:6] == b"MSGRID"


def test_groupoid_multiply(capsys, tmp_path):
    f = tmp_path / "e.json"
    f.write_text(json.dumps({"elements": [{"l": [1, 0, 0, 0], "r": [0, 0, 0, 0]},
                                          {"l": [0, 0, 0, 0], "r": [0, 1, 0, 0]}]}))
    code, out, _ = _run(capsys, "groupoid", "multiply", str(f), "--field", "linear_B")
    assert code == 0
    doc = json.loads(out)
    assert doc["l"] == ["1", "0", "0", "0"] and doc["r"] == ["0", "1", "0", "0"]
    assert doc["y"] == ["5/4", "5/4", "-1", "1"]
    assert doc["y_rule_defect"] == 0.0
    f.write_text(json.dumps({"elements": [{"l": [1, 0, 0, 0], "r": [0, 0, 0, 1]},
                                          {"l": [0, 0, 0, 0], "r": [0, 1, 0, 0]}]}))
    code, _, err = _run(capsys, "groupoid", "multiply", str(f), "--field", "linear_B")
    assert code == 1
    assert "not multiplicable" in err


def test_groupoid_verify_is_deterministic(capsys, tmp_path):
    runs = []
    for k in range(2):
        d = tmp_path / str(k)
        code, _, _ = _run(capsys, "groupoid", "verify", "--field", "linear_B", "--seed", "7", "--out", str(d))
        assert code == 0
        runs.append((d / "groupoid_report.json").read_bytes())
    assert runs[0] == runs[1]
    doc = json.loads(runs[0])
    assert doc["failed"] == [] and doc["pass"] is True
    assert [r["test"] for r in doc["results"]] == sorted(r["test"] for r in doc["results"])


def test_threshold_override_can_fail(capsys):
    code, _, err = _run(capsys, "groupoid", "verify", "--field", "linear_B",
                        "--tol", "groupoid.y_rule_float=1e-30")
    assert code == 1
    assert "FAIL  groupoid.y_rule_float" in err


def test_dynamics_csv(capsys, tmp_path):
    code, _, _ = _run(capsys, "dynamics", "--field", "constant_B", "--t", "0:1:3",
                      "--x", "0.1,0.2,0.3,0.4", "--out", str(tmp_path))
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "dynamics.csv").open()))
    assert [float(r["t"]) for r in rows] == [0.0, 0.5, 1.0]
    assert rows[0]["S"] == "0.0" and rows[0]["valid"] == "1"
    # constant field: J = cos^2(t/2) for the free Hamiltonian
    assert float(rows[2]["J"]) == pytest.approx(np.cos(0.5) ** 2, abs=1e-9)
    assert json.loads((tmp_path / "membranes.json").read_text())["field"]["n"] == 2


def test_dynamics_caustic_and_failure_rows(capsys, monkeypatch):
    code, out, _ = _run(capsys, "dynamics", "--field", "constant_B", "--t", "2.6:2.6:1",
                        "--x", "0.1,0,-0.2,0")
    assert code == 0
    row = out.splitlines()[1].split(",")
    assert float(row[10]) == pytest.approx(np.cos(1.3) ** 2, abs=1e-9)
    assert row[-1] == "0"

    def boom(*args, **kwargs):
        raise dynamics.DynamicsError("no convergence")

    monkeypatch.setattr(dynamics, "wkb_symbol", boom)
    code, out, _ = _run(capsys, "dynamics", "--field", "constant_B", "--t", "0.5:0.5:1", "--x", "0,0,0,0")
    assert code == 0
    row = out.splitlines()[1].split(",")
    assert row[-1] == "0" and row[-4] == "nan"


def test_relativistic_dynamics(capsys):
    code, out, _ = _run(capsys, "dynamics", "--field", "zero", "--hamiltonian", "rel+", "--t", "0.5:0.5:1",
                        "--x", "0,0,0.3,0.4")
    assert code == 0
    S = float(out.splitlines()[1].split(",")[9])
    assert S == pytest.approx(-0.5 * np.sqrt(1.25), abs=1e-9)


def test_membranes(capsys):
    code, out, _ = _run(capsys, "membrane", "--kind", "product", "--field", "linear_B",
                        "--x", "0,0,0,0;1,0,0,0;0,1,0,0")
    assert code == 0
    doc = json.loads(out)
    assert doc["base_shift_residual"] == "0"
    assert all(doc["areas"][k] == "0" for k in ("wing", "wing1", "wing2"))
    code, out, _ = _run(capsys, "membrane", "--kind", "dynamical", "--field", "constant_B",
                        "--t", "0.5:0.5:1", "--x", "0.1,0.2,0.3,0.4")
    doc = json.loads(out)
    assert code == 0
    assert abs(doc["pieces"]["S_action"] - doc["pieces"]["S_membrane"]) < 1e-9
    assert doc["triangles"]


@pytest.mark.parametrize("argv, key", [
    (["star", "p1", "--field", "zero"], "symbols"),
    (["star", "p1", "p2", "--field", "zero", "--hbar", "abc"], "hbar"),
    (["star", "p1", "p2", "--field", "nonexistent"], "field"),
    (["star", "p1", "p2", "--field", "zero", "--product", "bogus"], "product"),
    (["dynamics", "--field", "zero", "--mass", "0", "--t", "0:1:2", "--x", "0,0,0,0"], "mass"),
    (["dynamics", "--field", "zero", "--t", "1:0", "--x", "0,0,0,0"], "t"),
    (["verify", "--tol", "bogus=1"], "tol"),
])
def test_config_errors(capsys, argv, key):
    code, _, err = _run(capsys, *argv)
    assert code == 2
    assert json.loads(err)["key"] == key


def test_field_file_errors(capsys, tmp_path):
    f = tmp_path / "f.json"
    f.write_text(json.dumps({"n": 2, "F": [[0, "q1 +"], ["-q1", 0]]}))
    code, _, err = _run(capsys, "star", "p1", "p2", "--field", str(f))
    assert code == 2
    assert json.loads(err)["key"].startswith("field.")
    with pytest.raises(ConfigError):
        load_field(str(f), 2)


def test_config_file(capsys, tmp_path):
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"field": "constant_B", "bogus": 1}))
    code, _, err = _run(capsys, "star", "p1", "p2", "--config", str(c))
    assert (code, json.loads(err)["key"]) == (2, "bogus")
    c.write_text(json.dumps({"field": "constant_B", "hbar": "1"}))
    code, out, _ = _run(capsys, "star", "p1", "p2", "--config", str(c))
    assert (code, out.splitlines()[1]) == (0, "1/2*i + p1 p2")


def test_argparse_errors(capsys):
    assert run(["frobnicate"]) == 2
    assert run(["star", "p1", "p2", "--seed", "x"]) == 2


def test_runconfig_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"subcommand": "star", "nope": 1})
