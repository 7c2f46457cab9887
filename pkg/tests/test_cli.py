import json
import re

import numpy as np
import pytest

from conftest import tiny_tasks
from kfcl import cli, data, report, storage


@pytest.fixture
def task_files(tmp_path):
    paths = []
    for task in tiny_tasks(3):
        path = tmp_path / f"{task.task_id}.task"
        data.write_task(task, path)
        paths.append(str(path))
    return paths


def train_args(task_files, out, *extra):
    return ["train", "--task-files", *task_files[:2], "--epochs", "2", "--hidden", "6", "--out", str(out), *extra]


def test_help_and_usage_errors(capsys):
    assert cli.run_cli(["--help"]) == 0
    assert cli.run_cli([]) == 1
    assert cli.run_cli(["train", "--epochs", "lots"]) == 1
    assert cli.run_cli(["train", "--method", "Magic"]) == 1
    assert cli.run_cli(["generate", "--tasks", "0", "--out", "x"]) == 1
    assert "error" in capsys.readouterr().err


def test_generate_writes_loadable_tasks(tmp_path):
    assert cli.run_cli(["generate", "--tasks", "2", "--seed", "3", "--out", str(tmp_path)]) == 0
    a = data.load_task(tmp_path / "A.task")
    assert a.k == 10 and a.window == 10 and len(a.train_split) == 4000


def test_train_writes_results_and_is_deterministic(tmp_path, task_files, capsys):
    args = ["--method", "EwcKfc", "--grid", "10,1000"]
    assert cli.run_cli(train_args(task_files, tmp_path / "r1", *args)) == 0
    assert cli.run_cli(train_args(task_files, tmp_path / "r2", *args)) == 0
    stem = "EwcKfc-AB-s0"
    for name in (f"results-{stem}.csv", f"results-{stem}.json", f"sweep-{stem}.csv"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    rows = report.read_results_csv(tmp_path / "r1" / f"results-{stem}.csv")
    assert [(r.tier, r.task) for r in rows] == [(1, "A"), (2, "A"), (2, "B")]
    summary = json.loads((tmp_path / "r1" / f"results-{stem}.json").read_text())
    assert summary["lambdas"][1][0] in (10.0, 1000.0)
    model = storage.load_model(tmp_path / "r1" / f"model-{stem}")
    snap = storage.load_snapshot(tmp_path / "r1" / f"snapshot-{stem}-A", model)
    assert snap.task_id == "A" and snap.fisher is not None
    assert "A Perc. D" in capsys.readouterr().out


def test_train_rejects_several_permutations(tmp_path, task_files):
    assert cli.run_cli(train_args(task_files, tmp_path, "--permutation", "all")) == 1
    assert cli.run_cli(train_args(task_files, tmp_path, "--lambdas", "1", "--method", "None")) == 1


def test_grid_default_expands_to_five_values():
    args = cli.build_parser().parse_args(["train", "--grid", "default"])
    assert args.grid == (1e1, 1e3, 1e5, 1e7, 1e9)


def test_sweep_resumes_and_reports(tmp_path, task_files, capsys):
    out = tmp_path / "sweep"
    args = ["sweep", "--task-files", *task_files, "--permutation", "A,B,C", "--seeds", "0,1", "--epochs", "1",
            "--hidden", "6", "--method", "Replay", "--replay-m", "2", "--replay-n", "1", "--out", str(out)]
    assert cli.run_cli(args) == 0
    first = sorted(p.name for p in out.iterdir())
    assert "summary.csv" in first and "table.txt" in first
    stamp = (out / "results-Replay-ABC-s1.csv").stat().st_mtime_ns
    assert cli.run_cli(args) == 0
    assert (out / "results-Replay-ABC-s1.csv").stat().st_mtime_ns == stamp
    capsys.readouterr()
    assert cli.run_cli(["report", str(out), "--out", str(tmp_path / "rep"), "--formats", "csv"]) == 0
    lines = (tmp_path / "rep" / "summary.csv").read_text().splitlines()
    assert lines[0] == "Perm.,Method,Tier,A Acc.,A Perc. D,B Acc.,B Perc. D,C Acc.,C Perc. D"
    assert len(lines) == 1 + 3
    assert not (tmp_path / "rep" / "table.txt").exists()


def test_report_rejects_bad_inputs(tmp_path):
    assert cli.run_cli(["report", str(tmp_path / "nothing")]) == 1
    (tmp_path / "results-x.csv").write_text("garbage\n")
    assert cli.run_cli(["report", str(tmp_path)]) == 2
    assert cli.run_cli(["report", str(tmp_path), "--formats", "pdf"]) == 1


def test_fisher_memory_report_and_refusal(capsys):
    assert cli.run_cli(["fisher", "--hidden", "768", "--repr", "full", "--memory-only"]) == 2
    captured = capsys.readouterr()
    full = int(re.search(r"^Full\s+([\d,]+)$", captured.out, re.M).group(1).replace(",", ""))
    assert full > 10 ** 12
    assert "refusing" in captured.err


def test_fisher_estimates_and_exports(tmp_path, task_files, capsys):
    args = ["fisher", "--task-file", task_files[0], "--hidden", "3", "--repr", "diag,kfc,full",
            "--max-instances", "20", "--out", str(tmp_path / "f")]
    assert cli.run_cli(args) == 0
    out = tmp_path / "f"
    full = report.read_heatmap(out / "fisher-full.csv")
    diag = report.read_heatmap(out / "fisher-diag.csv")
    assert full.shape[0] == full.shape[1]
    assert diag.shape[0] == 1
    assert (out / "fisher-kfc.csv.manifest").read_text().startswith("rows=")
    assert cli.run_cli(["fisher", "--task-file", task_files[0], "--repr", "dense"]) == 1


def test_fisher_from_checkpoint(tmp_path, task_files):
    assert cli.run_cli(train_args(task_files, tmp_path / "r")) == 0
    ck = tmp_path / "r" / "model-None-AB-s0"
    assert cli.run_cli(["fisher", "--checkpoint", str(ck), "--task-file", task_files[0], "--repr", "kfc"]) == 0
    assert cli.run_cli(["fisher", "--checkpoint", str(tmp_path / "missing")]) == 2


def test_demo_two_param(tmp_path, capsys):
    assert cli.run_cli(["demo-2param", "--correlation", "0.9", "--out", str(tmp_path)]) == 0
    assert "EwcFull" in capsys.readouterr().out
    np.testing.assert_array_equal(report.read_heatmap(tmp_path / "toy-fisher-full.csv"), [[1.0, 0.9], [0.9, 1.0]])
    assert (tmp_path / "toy.csv").read_text().splitlines()[0].startswith("method,theta0")
