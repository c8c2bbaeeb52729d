import csv
import json
import subprocess
import sys

import pytest

from rdoe.cli import run
from rdoe.network import bundled_networks


def test_validate_bundled(capsys):
    assert run(["validate", "five_network"]) == 0
    assert "valid" in capsys.readouterr().out


def test_validate_corrupted_document(tmp_path, capsys):
    doc = json.loads(bundled_networks()["desk_k4"].read_text())
    doc["lines"][0]["to"] = "nowhere"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert run(["validate", str(path)]) == 1
    err = capsys.readouterr()
    assert "nowhere" in err.out + err.err


def test_validate_missing_network(capsys):
    assert run(["validate", "no_such_network"]) == 1


def test_usage_error_exits_one(capsys):
    assert run(["solve"]) == 1
    assert run(["solve", "--network", "five_network", "--objective", "nope"]) == 1
    assert run([]) == 1


def test_sensitivity(tmp_path, capsys):
    assert run(["sensitivity", "--network", "desk_k4", "--out-dir", str(tmp_path)]) == 0
    assert "scenarios=6" in capsys.readouterr().out
    rows = list(csv.reader(open(tmp_path / "Hbar.csv")))
    assert len(rows) == 1 + 6
    assert (tmp_path / "beta.csv").exists() and (tmp_path / "H.csv").exists()


def test_solve_is_reproducible_without_timestamp(tmp_path, capsys):
    outs = []
    for i in range(2):
        out = tmp_path / f"e{i}.json"
        assert run(["solve", "--network", "five_network", "--objective", "max_effcy", "--no-timestamp",
                    "--out", str(out), "--csv", str(tmp_path / f"e{i}.csv")]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    doc = json.loads(outs[0])
    assert doc["kind"] == "envelope" and "timestamp" not in doc
    assert doc["aggregate_kw"] == pytest.approx(8.18659, abs=1e-4)
    assert "aggregate_kw=8.18659" in capsys.readouterr().out


def test_solve_to_stdout(capsys):
    assert run(["solve", "--network", "five_network", "--objective", "alpha_fair", "--alpha", "2"]) == 0
    cap = capsys.readouterr()
    assert json.loads(cap.out)["objective"] == "alpha_fair"
    assert "aggregate_kw=" in cap.err


def test_solver_failure_exits_two(capsys):
    assert run(["solve", "--network", "desk_k4", "--max-iter", "1"]) == 2
    assert "solver failure" in capsys.readouterr().err


def test_bad_parameter_exits_one(capsys):
    assert run(["solve", "--network", "five_network", "--objective", "alpha_fair", "--alpha", "0.5"]) == 1


def test_solve_all_table(tmp_path, capsys):
    assert run(["solve-all", "--network", "five_network", "--include-q", "--no-timestamp",
                "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    names = [line.split()[0] for line in out[2:]]
    assert names == ["max_effcy", "ppn_fair", "alpha_fair", "permax_fair",
                     "max_effcy*", "ppn_fair*", "alpha_fair*", "permax_fair*"]
    assert "seconds" not in out[1]
    assert (tmp_path / "ppn_fair_q.json").exists()


def test_evaluate_and_trace(tmp_path, capsys):
    env = tmp_path / "env.json"
    assert run(["solve", "--network", "five_network", "--out", str(env)]) == 0
    rep = tmp_path / "rep.json"
    assert run(["evaluate", "--network", "five_network", "--envelope", str(env), "--samples", "2000",
                "--out", str(rep), "--csv", str(tmp_path / "v.csv")]) == 0
    assert json.loads(rep.read_text())["violations"] == 0
    assert "violations=0" in capsys.readouterr().out
    fr = tmp_path / "fr.csv"
    assert run(["trace-fr", "--network", "five_network", "--customers", "cus_02", "cus_05",
                "--envelope", str(env), "--out", str(fr)]) == 0
    assert "rectangle_inside=yes" in capsys.readouterr().out
    assert run(["evaluate", "--network", "desk_k4", "--envelope", str(env), "--samples", "10"]) == 1
    assert run(["evaluate", "--network", "five_network", "--envelope", str(tmp_path / "none.json")]) == 1


def test_oracle_modes(tmp_path, capsys):
    assert run(["oracle", "enumerate", "--k", "2"]) == 0
    assert capsys.readouterr().out.split("\n")[:4] == ["-1 -1", "-1 +1", "+1 -1", "+1 +1"]
    assert run(["oracle", "bisection", "--network", "five_network", "--customer", "cus_05"]) == 0
    assert "export_limit_kw=" in capsys.readouterr().out
    env = tmp_path / "env.json"
    run(["solve", "--network", "five_network", "--out", str(env)])
    ex = tmp_path / "ex.json"
    assert run(["oracle", "extremes", "--network", "five_network", "--envelope", str(env), "--out", str(ex)]) == 0
    doc = json.loads(ex.read_text())
    assert doc["kind"] == "vertex_extremes" and doc["nodes"]
    assert run(["oracle", "extremes", "--network", "five_network"]) == 1
    assert run(["oracle", "bisection"]) == 1


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "rdoe.cli", "validate", "desk_k4"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "desk_k4: valid" in proc.stdout
