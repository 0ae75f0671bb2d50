import csv
import json

import numpy as np
import pytest

from flowmoe.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, run
from flowmoe.io import FittedModel

SMALL_MODEL = ["--k", "2", "--nh", "4", "--restarts", "2", "--max-iter", "40", "--r", "1.0"]


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    code = run(["simulate", "--config", "nonlinear-mean", "--delta", "0.5", "--n-per-time", "30",
                "--T", "20", "--seed", "3", "--out-dir", str(out)])
    assert code == EXIT_OK
    return out


def _data(sim_dir):
    return ["--cytograms", str(sim_dir / "cytograms.csv"), "--covariates", str(sim_dir / "covariates.csv"),
            "--scores", "--bins", "10"]


def _bytes(*paths):
    return [p.read_bytes() for p in paths]


class TestFolds:
    def test_output(self, capsys):
        assert run(["folds", "--t", "296"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "time,fold" and len(lines) == 297
        assign = {int(t): int(f) for t, f in (ln.split(",") for ln in lines[1:])}
        assert {t for t, f in assign.items() if f == 1} == set(range(1, 21)) | set(range(101, 121)) | set(range(201, 221))

    def test_usage_error(self, capsys):
        assert run(["folds", "--t", "3"]) == EXIT_USAGE


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert run(["fit", "--bogus"]) == EXIT_USAGE
        assert run([]) == EXIT_USAGE

    def test_missing_file(self, tmp_path, capsys):
        code = run(["fit", "--cytograms", str(tmp_path / "nope.csv"), "--covariates", str(tmp_path / "x.csv"),
                    "--out", str(tmp_path / "m.json")])
        assert code == EXIT_DATA

    def test_misaligned_times(self, sim_dir, tmp_path, capsys):
        rows = (sim_dir / "covariates.csv").read_text().splitlines()
        (tmp_path / "cov.csv").write_text("\n".join(rows[:-1]) + "\n")
        code = run(["fit", "--cytograms", str(sim_dir / "cytograms.csv"), "--covariates", str(tmp_path / "cov.csv"),
                    "--scores", "--out", str(tmp_path / "m.json")])
        assert code == EXIT_DATA


class TestSimulate:
    def test_files(self, sim_dir):
        with open(sim_dir / "truth.csv") as fh:
            truth = list(csv.DictReader(fh))
        assert len(truth) == 20
        doc = json.loads((sim_dir / "manifest.json").read_text())
        assert doc["command"] == "simulate" and "argv" in doc

    def test_replay_identical(self, sim_dir, tmp_path):
        out = tmp_path / "again"
        argv = ["simulate", "--config", "both-linear", "--delta", "0.3", "--n-per-time", "10", "--T", "12",
                "--out-dir", str(out)]
        assert run(argv) == EXIT_OK
        files = [out / n for n in ("cytograms.csv", "covariates.csv", "truth.csv")]
        before = _bytes(*files)
        assert run(["replay", str(out / "manifest.json"), "--threads", "8"]) == EXIT_OK
        assert _bytes(*files) == before


class TestFitAndReplay:
    def test_fit_replay_threads(self, sim_dir, tmp_path):
        model, trace = tmp_path / "m.json", tmp_path / "trace.csv"
        argv = ["fit", *_data(sim_dir), *SMALL_MODEL, "--lambda-alpha", "0.01", "--lambda-beta", "0.01",
                "--out", str(model), "--trace", str(trace), "--threads", "1"]
        assert run(argv) == EXIT_OK
        before = _bytes(model, trace)
        assert run(["replay", f"{model}.manifest.json", "--threads", "8"]) == EXIT_OK
        assert _bytes(model, trace) == before
        fm = FittedModel.load(model)
        assert fm.params.K == 2 and fm.bin_grid["D"] == 10
        obj = np.loadtxt(trace, delimiter=",", skiprows=1)[:, 1]
        assert np.all(np.diff(obj) <= 1e-8)

    def test_cv_replay_threads(self, sim_dir, tmp_path):
        table = tmp_path / "cv.csv"
        argv = ["cv", *_data(sim_dir), *SMALL_MODEL, "--grid-alpha", "0.1,0.01", "--grid-beta", "0.05",
                "--block-size", "2", "--out", str(table)]
        assert run(argv) == EXIT_OK
        before = _bytes(table)
        assert run(["replay", f"{table}.manifest.json", "--threads", "8"]) == EXIT_OK
        assert _bytes(table) == before
        assert len(table.read_text().splitlines()) == 1 + 2 * 5

    def test_evaluate_and_prc(self, sim_dir, tmp_path, capsys):
        model = tmp_path / "m.json"
        assert run(["fit", *_data(sim_dir), *SMALL_MODEL, "--out", str(model)]) == EXIT_OK
        res = tmp_path / "eval.json"
        assert run(["evaluate", "--model", str(model), "--cytograms", str(sim_dir / "cytograms.csv"),
                    "--covariates", str(sim_dir / "covariates.csv"), "--out", str(res)]) == EXIT_OK
        assert np.isfinite(json.loads(res.read_text())["nlpl"])

        prc = tmp_path / "prc.csv"
        assert run(["prc", "--model", str(model), "--target", "probability:k=1", "--sweep-pc", "2",
                    "--grid-points", "11", "--out", str(prc)]) == EXIT_OK
        vals = np.loadtxt(prc, delimiter=",", skiprows=1)
        assert vals.shape == (11, 2) and np.all((vals[:, 1] >= 0) & (vals[:, 1] <= 1))

        cond = tmp_path / "cond.csv"
        assert run(["prc", "--model", str(model), "--target", "mean:k=2", "--sweep-pc", "2",
                    "--condition", "pc1=-1", "--condition", "pc1=1", "--grid-points", "5",
                    "--out", str(cond)]) == EXIT_OK
        with open(cond) as fh:
            rows = list(csv.DictReader(fh))
        assert {r["condition"] for r in rows} == {"pc1=-1", "pc1=1"} and len(rows) == 10

    def test_prc_usage_errors(self, sim_dir, tmp_path, capsys):
        model = tmp_path / "m.json"
        assert run(["fit", *_data(sim_dir), *SMALL_MODEL, "--out", str(model)]) == EXIT_OK
        base = ["prc", "--model", str(model), "--out", str(tmp_path / "p.csv")]
        assert run([*base, "--target", "mean:k=1", "--sweep-pc", "99"]) == EXIT_USAGE
        assert run([*base, "--target", "median:k=1"]) == EXIT_USAGE
        assert run([*base, "--target", "mean:k=1", "--condition", "pc99=1"]) == EXIT_USAGE
