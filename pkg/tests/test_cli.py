import csv
import os

import numpy as np
import pytest

from dlmpc.cli import main, parse_config, ConfigError


def run_cli(args):
    return main(args)


def test_parse_config_defaults_and_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("rows=3\ncols = 3  # comment\nsigma=0.2\n")
    cfg = parse_config(str(path), ["T=4"])
    assert cfg["rows"] == 3 and cfg["cols"] == 3
    assert cfg["sigma"] == 0.2 and cfg["T"] == 4
    assert cfg["noise_seed"] == cfg["seed"] + 1


def test_parse_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("rowz=3\n")
    with pytest.raises(ConfigError) as err:
        parse_config(str(path))
    assert "rowz" in str(err.value)


def test_unknown_key_exit_code(tmp_path):
    code = run_cli(["generate", "--set", "bogus=1",
                    "--out", str(tmp_path / "x")])
    assert code == 2


def test_generate_deterministic(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run_cli(["generate", "--set", "seed=9", "--out", str(out1)]) == 0
    assert run_cli(["generate", "--set", "seed=9", "--out", str(out2)]) == 0
    assert (out1 / "model.txt").read_bytes() == (out2 / "model.txt").read_bytes()
    assert (out1 / "spec.txt").read_bytes() == (out2 / "spec.txt").read_bytes()


def test_run_writes_csvs_and_reuses_instance(tmp_path):
    inst = tmp_path / "inst"
    out = tmp_path / "out"
    assert run_cli(["generate", "--set", "rows=2", "--set", "cols=2",
                    "--out", str(inst)]) == 0
    code = run_cli(["run", "--instance", str(inst), "--out", str(out),
                    "--set", "rows=2", "--set", "cols=2",
                    "--set", "steps=2", "--set", "eps_p=1e-5",
                    "--set", "eps_d=1e-5"])
    assert code == 0
    assert (out / "trajectory_dlmpc.csv").exists()
    assert (out / "telemetry_dlmpc.csv").exists()
    with open(out / "trajectory_dlmpc.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["tau", "subsystem", "state_index", "x", "u", "w"]


def test_run_determinism_across_workers(tmp_path):
    outs = []
    for label, workers in (("w1", 1), ("w4", 4)):
        out = tmp_path / label
        code = run_cli(["run", "--out", str(out),
                        "--set", "rows=2", "--set", "cols=2",
                        "--set", "steps=2", "--set", "noise=local",
                        "--set", "controller=dlmpc_robust",
                        "--set", f"workers={workers}"])
        assert code == 0
        outs.append((out / "trajectory_dlmpc.csv").read_bytes())
    assert outs[0] == outs[1]


def test_run_infeasible_exit_code(tmp_path):
    code = run_cli(["run", "--out", str(tmp_path / "o"),
                    "--set", "rows=2", "--set", "cols=2", "--set", "steps=1",
                    "--set", "x_max=1e-9", "--set", "u_max=1e-9",
                    "--set", "x0_scale=1.0", "--set", "max_iter=2000"])
    assert code == 4


def test_run_solver_failure_exit_code(tmp_path):
    code = run_cli(["run", "--out", str(tmp_path / "o"),
                    "--set", "rows=2", "--set", "cols=2", "--set", "steps=1",
                    "--set", "eps_p=1e-14", "--set", "eps_d=1e-14",
                    "--set", "max_iter=2"])
    assert code == 3


def test_run_both_compares(tmp_path):
    out = tmp_path / "o"
    code = run_cli(["run", "--out", str(out),
                    "--set", "rows=2", "--set", "cols=2",
                    "--set", "steps=2", "--set", "controller=both",
                    "--set", "eps_p=1e-6", "--set", "eps_d=1e-6"])
    assert code == 0
    with open(out / "comparison.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["tau", "u0_gap"]
    gaps = [float(r[1]) for r in rows[1:]]
    assert max(gaps) <= 1e-3


def test_benchmark_schema_and_trend(tmp_path):
    out = tmp_path / "bench.csv"
    code = run_cli(["benchmark", "--out", str(out),
                    "--set", "sweep=T", "--set", "values=3,5",
                    "--set", "bench_seeds=2", "--set", "bench_iters=8",
                    "--set", "rows=3", "--set", "cols=3", "--set", "d=2"])
    assert code == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["param", "value", "case", "seed_count",
                       "mean_runtime", "std_runtime"]
    assert [r[1] for r in rows[1:]] == ["3", "5"]


def test_benchmark_rejects_bad_sweep(tmp_path):
    assert run_cli(["benchmark", "--out", str(tmp_path / "b.csv"),
                    "--set", "sweep=Q", "--set", "values=1"]) == 2
    assert run_cli(["benchmark", "--out", str(tmp_path / "b.csv"),
                    "--set", "sweep=N", "--set", "values=17"]) == 2


def test_check_smoke():
    assert run_cli(["check", "--set", "rows=2", "--set", "cols=2",
                    "--set", "eps_p=1e-6", "--set", "eps_d=1e-6"]) == 0
