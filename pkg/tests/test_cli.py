import csv
import json
import shutil
import subprocess
from pathlib import Path

import pytest

from conftest import DATA
from dopf.cli import EXIT_ERROR, EXIT_LIMIT, EXIT_OK, main

GOLDEN = Path(__file__).parent / "golden"
SPLIT = str(DATA / "case14_2areas.txt")


def _header(path):
    with open(path) as fh:
        return next(csv.reader(fh))


def test_solve_converges_and_writes_outputs(tmp_path, capsys):
    out, trace = tmp_path / "r.json", tmp_path / "t.csv"
    code = main(["solve", "--case", "case14", "--areas", SPLIT, "--out", str(out), "--trace", str(trace)])
    assert code == EXIT_OK
    report = json.loads(out.read_text())
    assert list(report) == json.loads((GOLDEN / "solve_report_fields.json").read_text())
    assert report["converged"] and abs(report["gap"]) <= 0.01
    assert _header(trace) == _header(GOLDEN / "trace_header_dc.csv")
    with open(trace) as fh:
        assert len(list(csv.DictReader(fh))) == report["iterations"]
    assert "converged after" in capsys.readouterr().out


def test_solve_iteration_limit_exit_code():
    assert main(["solve", "--case", "case14", "--areas", SPLIT, "--max-iter", "1", "--no-oracle"]) == EXIT_LIMIT


@pytest.mark.parametrize("argv", [
    ["solve", "--case", "case14", "--bogus"],
    ["solve", "--case", "case14", "--alg", "aladin"],
    ["solve", "--case", "case14", "--max-iter", "0"],
    ["solve"],
    [],
])
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == EXIT_ERROR
    assert "error" in capsys.readouterr().err


def test_missing_case_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere.m"
    assert main(["solve", "--case", str(missing)]) == EXIT_ERROR
    assert str(missing) in capsys.readouterr().err


def test_bad_partition_file(tmp_path, capsys):
    part = tmp_path / "p.txt"
    part.write_text("1 1\n2\n")
    assert main(["solve", "--case", "case14", "--areas", str(part)]) == EXIT_ERROR
    assert "line 2" in capsys.readouterr().err


def test_workers_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DOPF_WORKERS", "2")
    out = tmp_path / "r.json"
    assert main(["solve", "--case", "case14", "--areas", SPLIT, "--no-oracle", "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["workers"] == 2
    assert main(["solve", "--case", "case14", "--areas", SPLIT, "--no-oracle", "--workers", "1",
                 "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["workers"] == 1


def test_tune_picks_first_accepted(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["tune", "--case", "case14", "--areas", SPLIT, "--out", str(out)]) == EXIT_OK
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["hyperparameter"]) for r in rows] == [1e6, 1e5, 1e4]
    assert "best penalty: 10000" in capsys.readouterr().out


def test_tune_nothing_accepted_still_writes_table(tmp_path):
    out = tmp_path / "sweep.csv"
    code = main(["tune", "--case", "case14", "--areas", SPLIT, "--max-iter", "2", "--values", "1e4,1e3",
                 "--out", str(out)])
    assert code == EXIT_LIMIT
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and all(r["converged"] == "False" for r in rows)


def test_compare_writes_table_and_series(tmp_path):
    out, series = tmp_path / "table.csv", tmp_path / "series.csv"
    code = main(["compare", "--case", "case14", "--areas", SPLIT, "--alg", "admm,atc", "--form", "dc",
                 "--workers", "1,2", "--repeats", "1", "--out", str(out), "--series", str(series)])
    assert code == EXIT_OK
    assert _header(out) == _header(GOLDEN / "benchmark_table_header.csv")
    assert _header(series) == _header(GOLDEN / "timing_series_header.csv")
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["algorithm"], r["workers"]) for r in rows] == [("admm", "1"), ("admm", "2"),
                                                              ("atc", "1"), ("atc", "2")]


def test_compare_areas_count_mismatch(tmp_path, capsys):
    code = main(["compare", "--case", "case14", "--case", "case30", "--areas", SPLIT,
                 "--out", str(tmp_path / "t.csv")])
    assert code == EXIT_ERROR
    assert "--areas" in capsys.readouterr().err


@pytest.mark.skipif(shutil.which("dopf") is None, reason="console script not installed")
def test_console_script_entry_point():
    proc = subprocess.run(["dopf", "solve", "--case", "case14", "--max-iter", "1", "--areas", SPLIT,
                           "--no-oracle"], capture_output=True, text=True)
    assert proc.returncode == EXIT_LIMIT
    assert "iteration-limit" in proc.stdout
