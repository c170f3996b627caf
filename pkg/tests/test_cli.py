import json
import subprocess
import sys

import pytest

from tracegrad.cli import int_grid, main
from tracegrad.csvio import read_csv


def run(argv):
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


def summary(path):
    return {row[0]: row[1] for row in read_csv(path)[1]}


def test_int_grid():
    assert int_grid("4..64") == [4, 8, 16, 32, 64]
    assert int_grid("3,5") == [3, 5]


@pytest.mark.parametrize("argv", [
    ["trace-bench", "--trials", "0"],
    ["trace-bench", "--trials", "10"],
    ["grad-check", "--r", "0"],
    ["bound-check", "--delta", "1.5"],
    ["bound-check", "--trials", "999"],
    ["train", "--preset", "table2", "--mode", "ortho"],
    ["mem-report", "--preset", "nosuch"],
    ["mem-report", "--spec", "/nonexistent.json"],
    ["replay", "/nonexistent/manifest.json"],
])
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    assert run(argv + ([] if argv[0] == "replay" else ["--out", str(tmp_path)])) == 2


def test_trace_bench_identity_slope(tmp_path, capsys):
    code = run(["trace-bench", "--matrix", "identity", "--dim", "64", "--r", "4..4096",
                "--trials", "200", "--seed", "7", "--out", str(tmp_path)])
    assert code == 0
    slope = float(summary(tmp_path / "trace_summary.csv")["slope"])
    assert -0.6 <= slope <= -0.4
    header, rows = read_csv(tmp_path / "trace_bench.csv")
    assert header[0] == "r" and len(rows) == 11


def test_grad_check_default_passes(tmp_path, capsys):
    assert run(["grad-check", "--trials", "1000", "--out", str(tmp_path)]) == 0
    assert "PASS" in capsys.readouterr().out


def test_grad_check_exact_only(tmp_path, capsys):
    assert run(["grad-check", "--mode", "exact", "--out", str(tmp_path)]) == 0
    s = summary(tmp_path / "grad_check_summary.csv")
    assert float(s["finite_difference_rel_error"]) <= 1e-6
    assert float(s["dense_oracle_rel_error"]) <= 1e-12


def test_replay_is_byte_identical(tmp_path, capsys):
    first = tmp_path / "a"
    assert run(["trace-bench", "--matrix", "block-crosstalk", "--dim", "8", "--blocks", "4",
                "--r", "2..32", "--trials", "30", "--seed", "3", "--out", str(first)]) == 0
    second = tmp_path / "b"
    assert run(["replay", str(first / "manifest.json"), "--out", str(second)]) == 0
    for name in ("trace_bench.csv", "trace_summary.csv", "manifest.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_train_replay_and_noise(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"optimizer": {"name": "adam", "lr": 0.01}, "batch": 16,
                               "epochs": 1, "seed": 4,
                               "dataset": {"name": "synthetic", "n_train": 64, "n_test": 32}}))
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"name": "s", "input": [1, 8, 8], "layers": [
        {"type": "conv", "kernel": 3, "c_in": 1, "c_out": 2}, {"type": "relu"},
        {"type": "flatten"}, {"type": "dense", "in": 128, "out": 2}]}))
    a = tmp_path / "a"
    assert run(["train", "--spec", str(spec), "--config", str(cfg), "--mode", "ortho", "--r", "8",
                "--grad-noise", "--noise-m", "3", "--noise-batch", "8", "--noise-r", "4,8",
                "--out", str(a)]) == 0
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["outputs"] == ["grad_noise.csv", "train_log.csv"]
    assert manifest["config"]["spec_doc"]["name"] == "s"
    spec.unlink()  # replay must not need the original files
    b = tmp_path / "b"
    assert run(["replay", str(a / "manifest.json"), "--out", str(b)]) == 0
    for name in ("train_log.csv", "grad_noise.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = read_csv(a / "grad_noise.csv")[1]
    assert sum(1 for r in rows if r[1] == "true" and r[4] == "std_mean") == 1


def test_mem_report(tmp_path, capsys):
    assert run(["mem-report", "--preset", "table2", "--batch", "64", "--r", "16",
                "--out", str(tmp_path)]) == 0
    header, rows = read_csv(tmp_path / "mem_report.csv")
    assert rows[-1][1] == "total" and int(rows[-1][4]) == 4 * 2313216
    assert "factor 3.2987" in capsys.readouterr().out


def test_perf_bench_grid_deterministic(tmp_path, capsys):
    argv = ["perf-bench", "--sizes", "8", "--batches", "2", "--channels", "2", "--r", "4",
            "--repeats", "1", "--warmup", "0"]
    assert run(argv + ["--out", str(tmp_path / "a")]) == 0
    assert run(argv + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/perf_grid.csv").read_bytes() == (tmp_path / "b/perf_grid.csv").read_bytes()
    manifest = json.loads((tmp_path / "a/manifest.json").read_text())
    assert manifest["timing_outputs"] == ["perf_timings.csv"]


def test_out_dir_from_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("TRACEGRAD_OUT", str(tmp_path / "env"))
    assert run(["mem-report", "--preset", "table3"]) == 0
    assert (tmp_path / "env" / "mem_report.csv").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tracegrad.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
