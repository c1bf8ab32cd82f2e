import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from alsrec import cli
from alsrec.cli import build_parser, config_to_argv, main
from alsrec.dataset import read_csv, transpose, write_csv
from alsrec.factorization import TrainConfig, load_model, train
from alsrec.recommend import top_k
from alsrec.synth import planted_blocks


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture
def data_csv(tmp_path, two_block):
    path = tmp_path / "data.csv"
    write_csv(two_block, path)
    return path


def train_args(data_csv, model, *extra):
    return ["train", "--input", data_csv, "--model-out", model, "--factors", 4,
            "--iterations", 2, "--lambda", 0.1, "--seed", 1, "--threads", 1, *extra]


class TestUsage:
    @pytest.mark.parametrize("argv", [
        ["train", "--input", "x.csv", "--model-out", "m", "--factors", "0"],
        ["train", "--input", "x.csv", "--model-out", "m", "--lambda", "-1"],
        ["sweep", "--input", "x.csv", "--factors", "4,,8"],
        ["evaluate", "--input", "x.csv", "--holdout", "0"],
        ["recommend", "--model", "m"],
        ["synth", "--investors", "3", "--companies", "4", "--blocks", "5"],
        ["frobnicate"],
    ])
    def test_exit_2(self, argv):
        assert run(*argv) == 2

    def test_missing_input_is_runtime_error(self, tmp_path, capsys):
        assert run("train", "--input", tmp_path / "nope.csv", "--model-out", tmp_path / "m") == 1
        assert "not found" in capsys.readouterr().err

    def test_malformed_csv(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("investor_id,company_id\na,b\nc\n")
        assert run("train", "--input", bad, "--model-out", tmp_path / "m", "--threads", 1) == 1
        assert "line 3" in capsys.readouterr().err

    def test_bad_threads_env(self, data_csv, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.THREADS_ENV, "zero")
        assert run("train", "--input", data_csv, "--model-out", tmp_path / "m", "--factors", 2) == 1


class TestTrain:
    def test_model_matches_library(self, data_csv, tmp_path, two_block):
        model_path = tmp_path / "m.bin"
        assert run(*train_args(data_csv, model_path)) == 0
        m = load_model(model_path)
        assert (m.n_companies, m.n_investors) == (two_block.n_companies, two_block.n_investors)
        ref = train(read_csv(data_csv), TrainConfig(factors=4, iterations=2, lam=0.1, seed=1))
        np.testing.assert_array_equal(m.X, ref.X)
        np.testing.assert_array_equal(m.Y, ref.Y)
        manifest = json.loads((tmp_path / "m.bin.manifest.json").read_text())
        assert manifest["config"]["factors"] == 4
        assert manifest["results"]["loss_trace"] == ref.loss_trace
        assert len(manifest["inputs"][str(data_csv)]["sha256"]) == 64

    def test_byte_identical_reruns(self, data_csv, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        assert run(*train_args(data_csv, a)) == 0
        assert run(*train_args(data_csv, b, "--threads", 3)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_threads_env_fallback(self, data_csv, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.THREADS_ENV, "2")
        model = tmp_path / "m.bin"
        assert run("train", "--input", data_csv, "--model-out", model, "--factors", 2) == 0
        manifest = json.loads((tmp_path / "m.bin.manifest.json").read_text())
        assert manifest["config"]["threads"] == 2

    def test_transpose(self, data_csv, tmp_path, two_block):
        model = tmp_path / "t.bin"
        assert run(*train_args(data_csv, model, "--transpose")) == 0
        m = load_model(model)
        assert (m.n_companies, m.n_investors) == (two_block.n_investors, two_block.n_companies)

    def test_defaults(self):
        args = build_parser().parse_args(["train", "--input", "x", "--model-out", "m"])
        assert (args.factors, args.iterations, args.lam, args.cg_steps) == (1400, 2, 0.0, 3)


class TestRecommend:
    @pytest.fixture
    def model(self, data_csv, tmp_path):
        path = tmp_path / "m.bin"
        assert run(*train_args(data_csv, path)) == 0
        return path

    def test_jsonl_matches_library(self, model, data_csv, tmp_path):
        out = tmp_path / "recs.jsonl"
        assert run("recommend", "--model", model, "--all", "--output", out) == 0
        m = load_model(model)
        d = read_csv(data_csv)
        lines = out.read_text().splitlines()
        assert len(lines) == d.n_investors
        for i, line in enumerate(lines):
            obj = json.loads(line)
            ref = top_k(m, i, 10, d)
            assert obj["entity"] == ref.entity_id
            assert [it["id"] for it in obj["items"]] == [it.id for it in ref.items]
            np.testing.assert_allclose([it["score"] for it in obj["items"]], [it.score for it in ref.items], rtol=1e-12)
            assert not set(it["id"] for it in obj["items"]) & {d.company_ids[c] for c in d.companies_of(i)}

    def test_csv_format_and_entities(self, model, tmp_path, two_block):
        out = tmp_path / "recs.csv"
        ids = two_block.investor_ids[:2]
        argv = ["recommend", "--model", model, "--format", "csv", "--top-k", 3, "--output", out]
        for e in ids:
            argv += ["--entity", e]
        assert run(*argv) == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6
        assert [r["entity_id"] for r in rows] == [ids[0]] * 3 + [ids[1]] * 3
        assert [r["rank"] for r in rows[:3]] == ["1", "2", "3"]

    def test_unknown_entity(self, model, capsys):
        assert run("recommend", "--model", model, "--entity", "nobody") == 1
        assert "nobody" in capsys.readouterr().err

    def test_mask_mismatch(self, model, tmp_path):
        other = tmp_path / "other.csv"
        other.write_text("investor_id,company_id\na,b\n")
        assert run("recommend", "--model", model, "--input", other, "--all") == 1

    def test_without_manifest_needs_input(self, model, tmp_path, data_csv):
        (tmp_path / "m.bin.manifest.json").unlink()
        assert run("recommend", "--model", model, "--all") == 1
        out = tmp_path / "r.jsonl"
        assert run("recommend", "--model", model, "--all", "--input", data_csv, "--output", out) == 0

    def test_fully_masked_entity(self, tmp_path):
        data = tmp_path / "full.csv"
        data.write_text("investor_id,company_id\na,x\na,y\nb,x\n")
        model = tmp_path / "m.bin"
        assert run("train", "--input", data, "--model-out", model, "--factors", 2, "--threads", 1) == 0
        out = tmp_path / "r.jsonl"
        assert run("recommend", "--model", model, "--entity", "a", "--output", out) == 0
        assert json.loads(out.read_text()) == {"entity": "a", "items": []}

    def test_transposed_model(self, data_csv, tmp_path, two_block):
        model = tmp_path / "t.bin"
        assert run(*train_args(data_csv, model, "--transpose")) == 0
        out = tmp_path / "r.jsonl"
        assert run("recommend", "--model", model, "--all", "--output", out) == 0
        t = transpose(two_block)
        lines = [json.loads(x) for x in out.read_text().splitlines()]
        assert [x["entity"] for x in lines] == list(two_block.company_ids)
        m = load_model(model)
        assert [it["id"] for it in lines[0]["items"]] == [it.id for it in top_k(m, 0, 10, t).items]


class TestSweep:
    def sweep_args(self, data_csv, out, *extra):
        return ["sweep", "--input", data_csv, "--factors", 4, "--iterations", "1,2",
                "--lambda", 0.1, "--trials", 3, "--threads", 1, "--output", out, *extra]

    def test_rows_and_reproducibility(self, data_csv, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run(*self.sweep_args(data_csv, a)) == 0
        assert run(*self.sweep_args(data_csv, b, "--jobs", 2)) == 0
        assert a.read_bytes() == b.read_bytes()
        rows = a.read_text().splitlines()
        assert rows[0] == "factors,iterations,lambda,trials,accuracy_mean,accuracy_std,loss_final_mean,wall_time_s"
        assert len(rows) == 3

    def test_evaluate_singleton(self, data_csv, tmp_path):
        out = tmp_path / "e.csv"
        assert run("evaluate", "--input", data_csv, "--factors", 4, "--trials", 2,
                   "--threads", 1, "--output", out, "--trials-out", tmp_path / "t.csv") == 0
        assert len(out.read_text().splitlines()) == 2
        assert len((tmp_path / "t.csv").read_text().splitlines()) == 3

    def test_manifest_replays(self, data_csv, tmp_path):
        out = tmp_path / "a.csv"
        assert run(*self.sweep_args(data_csv, out)) == 0
        manifest = json.loads((tmp_path / "a.csv.manifest.json").read_text())
        assert manifest["config"]["trials"] == 3
        assert manifest["config"]["holdout"] == 0.1
        argv = config_to_argv(manifest["config"])
        replay = tmp_path / "replay.csv"
        argv[argv.index("--output") + 1] = str(replay)
        assert run(*argv) == 0
        assert replay.read_bytes() == out.read_bytes()

    def test_default_trials_in_manifest(self, data_csv, tmp_path):
        out = tmp_path / "s.csv"
        assert run("evaluate", "--input", data_csv, "--factors", 2, "--iterations", 1,
                   "--threads", 1, "--output", out) == 0
        manifest = json.loads((tmp_path / "s.csv.manifest.json").read_text())
        assert manifest["config"]["trials"] == 50

    def test_no_eligible_investors(self, tmp_path, capsys):
        data = tmp_path / "d.csv"
        data.write_text("investor_id,company_id\na,x\nb,y\n")
        assert run("evaluate", "--input", data, "--factors", 2, "--threads", 1) == 1
        err = capsys.readouterr().err
        assert "at least two" in err


class TestSynth:
    def test_writes_dataset(self, tmp_path):
        out = tmp_path / "s.csv"
        assert run("synth", "--investors", 20, "--companies", 10, "--blocks", 2,
                   "--density", 1.0, "--seed", 3, "--output", out) == 0
        d = read_csv(out)
        assert d == planted_blocks(20, 10, 2, 1.0, 0.0, seed=3)
        assert d.nnz == 100

    def test_empty_output_is_error(self, tmp_path):
        assert run("synth", "--investors", 2, "--companies", 2, "--density", 0,
                   "--output", tmp_path / "s.csv") == 1


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "alsrec.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "alsrec" in res.stdout
