import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ramen import __version__
from ramen.bench import ExperimentConfig, simulate
from ramen.cli import main
from ramen.estimator import estimate
from ramen.io import DatasetFormatError, dataset_to_csv, read_dataset, selection_from_json, write_dataset
from ramen.scm import EnvData, MultiEnvDataset
from ramen.search import combinatorial_select

finite = st.floats(allow_nan=False, allow_infinity=False, min_value=-1e300, max_value=1e300)


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_dataset_round_trip(tmp_path_factory, data):
    d = data.draw(st.integers(0, 3))
    n_env = data.draw(st.integers(1, 3))
    envs = []
    for _ in range(n_env):
        n = data.draw(st.integers(4, 8))
        T = np.array([0.0, 1.0] + data.draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=n - 2,
                                                       max_size=n - 2)))
        Y = np.array(data.draw(st.lists(finite, min_size=n, max_size=n)))
        X = np.array(data.draw(st.lists(finite, min_size=n * d, max_size=n * d))).reshape(n, d)
        envs.append(EnvData(X, T, Y))
    original = MultiEnvDataset(envs)
    path = tmp_path_factory.mktemp("rt") / "data.csv"
    write_dataset(path, original)
    back = read_dataset(path)
    assert back.n_env == original.n_env and back.d == original.d
    for a, b in zip(original.envs, back.envs):
        assert np.array_equal(a.X, b.X) and np.array_equal(a.T, b.T) and np.array_equal(a.Y, b.Y)
    assert dataset_to_csv(back) == dataset_to_csv(original)


@pytest.mark.parametrize("body, message", [
    ("", "empty file"),
    ("env,t,y,z0\n", "bad header"),
    ("env,t,y,x0\n0,1,2\n", "row 2: 3 fields"),
    ("env,t,y,x0\n0,1,2,3\nq,0,1,1\n", "row 3, column 'env'"),
    ("env,t,y,x0\n-1,1,2,3\n", "negative"),
    ("env,t,y,x0\n0,2,2,3\n", "column 't'"),
    ("env,t,y,x0\n0,1,abc,3\n", "row 2, column 'y': not a number"),
    ("env,t,y,x0\n0,1,1,inf\n", "row 2, column 'x0': non-finite"),
    ("env,t,y,x0\n0,1,1,1\n2,0,1,1\n", "missing [1]"),
    ("env,t,y\n", "no data rows"),
])
def test_malformed_csv_diagnostics(tmp_path, body, message):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(DatasetFormatError, match=message.replace("[", r"\[").replace("]", r"\]")):
        read_dataset(path)


def test_selection_json_rebuild():
    sel = selection_from_json({"subset": [2, 0], "node": "T", "losses": {"J_T": 1.0, "J_Y": 2.0,
                               "combined": 1.0, "mode": "max"}, "method": "gumbel", "seed": 4})
    assert sel.subset == (2, 0) and sel.node == "T" and sel.score.combined == 1.0
    with pytest.raises(ValueError):
        selection_from_json({"subset": [], "node": "Q"})


# -- command line ------------------------------------------------------------


def run(*argv):
    return main([str(a) for a in argv])


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        build = __import__("ramen.cli", fromlist=["build_parser"]).build_parser()
        build.parse_args(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == __version__
    assert run("version") == 0 and capsys.readouterr().out.strip() == __version__


def test_usage_errors_exit_2(tmp_path):
    assert run("simulate", "--bogus") == 2
    assert run() == 2
    assert run("select", "--data", tmp_path / "x.csv", "--out", tmp_path / "s.json",
               "--method", "greedy") == 2


def test_runtime_errors_name_the_stage(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("env,t,y\n0,1,x\n")
    assert run("select", "--data", bad, "--out", tmp_path / "s.json") == 1
    err = capsys.readouterr().err
    assert err.startswith("ramen: error in stage read:") and "row 2" in err


def test_single_environment_is_rejected(tmp_path, capsys):
    path = tmp_path / "one.csv"
    path.write_text("env,t,y,x0\n" + "".join(f"0,{i % 2},{i},{i}\n" for i in range(12)))
    assert run("select", "--data", path, "--out", tmp_path / "s.json") == 1
    assert "at least 2" in capsys.readouterr().err
    assert not (tmp_path / "s.json").exists()


def test_round_trip_matches_in_process(tmp_path, capsys):
    data_p, truth_p, sel_p, rep_p = (tmp_path / f for f in ("d.csv", "t.json", "s.json", "r.csv"))
    assert run("simulate", "--seed", 7, "--n", 300, "--n-env", 3, "--d", 3,
               "--out", data_p, "--truth", truth_p) == 0
    assert run("select", "--data", data_p, "--seed", 7, "--out", sel_p, "--losses",
               tmp_path / "l.csv") == 0
    assert run("estimate", "--data", data_p, "--selection", sel_p, "--truth", truth_p,
               "--out", rep_p) == 0
    cli_mae = float(capsys.readouterr().out.split()[-1])

    cfg = ExperimentConfig(n=300, n_env=3, d=3)
    data, truth, _ = simulate(cfg, 7)
    sel = combinatorial_select(data, seed=7)
    report = estimate(data, sel, truth)
    assert cli_mae == report.mae
    assert rep_p.read_text() == report.to_csv()
    assert json.loads(sel_p.read_text())["subset"] == list(sel.subset)
    assert (tmp_path / "l.csv").read_text() == sel.loss_table.to_csv()

    # rerunning writes identical bytes
    before = {p: p.read_bytes() for p in (data_p, truth_p, sel_p, rep_p)}
    run("simulate", "--seed", 7, "--n", 300, "--n-env", 3, "--d", 3, "--out", data_p, "--truth", truth_p)
    run("select", "--data", data_p, "--seed", 7, "--out", sel_p)
    run("estimate", "--data", data_p, "--selection", sel_p, "--truth", truth_p, "--out", rep_p)
    assert all(p.read_bytes() == b for p, b in before.items())


def test_gumbel_select_with_trace(tmp_path):
    data_p, truth_p = tmp_path / "d.csv", tmp_path / "t.json"
    run("simulate", "--n", 100, "--n-env", 2, "--d", 2, "--out", data_p, "--truth", truth_p)
    assert run("select", "--data", data_p, "--method", "gumbel", "--epochs", 5, "--batch-size", 0,
               "--out", tmp_path / "s.json", "--trace", tmp_path / "trace.csv") == 0
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "epoch,tau,loss_T,loss_Y" and len(lines) == 6


def test_bench_with_config_file(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("n = 200\nn_env = 2\nd = 2\nruns = 2\nmethods = adjust_all,adjust_none\n")
    assert run("bench", "--config", cfg, "--runs", 3, "--out-csv", tmp_path / "b.csv",
               "--out-json", tmp_path / "b.json") == 0
    out = capsys.readouterr().out
    assert "adjust_all\tmean_mae=" in out and "runs_ok=3" in out
    assert json.loads((tmp_path / "b.json").read_text())["config"]["runs"] == 3


def test_bad_config_value_is_a_config_error(tmp_path, capsys):
    assert run("bench", "--methods", "magic", "--out-csv", tmp_path / "b.csv",
               "--out-json", tmp_path / "b.json") == 1
    assert "stage config" in capsys.readouterr().err


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "ramen.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip() == __version__
