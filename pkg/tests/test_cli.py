"""End-to-end command tests: artifacts, manifests, and exit codes."""

import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from kbct import synth
from kbct.checkpoint import load_checkpoint
from kbct.cli import aggregate_metrics, main
from kbct.data import load_kb
from kbct.evaluation import evaluate


def run_cli(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def stdout_paths(text):
    return [Path(line) for line in text.splitlines()
            if line and not line.startswith("#")]


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def small_kb(tmp_path_factory):
    out = tmp_path_factory.mktemp("smallkb")
    synth.generate_overfit_kb(out, seed=0, n_triples=30, n_entities=12)
    return out


FAST = ["--dim", "8", "--epochs", "6", "--batch-size", "64",
        "--validate-every", "3", "--learning-rate", "0.01",
        "--dropout", "0.0"]


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory, small_kb):
    out = tmp_path_factory.mktemp("pre")
    code = main(["pretrain", "--kb", str(small_kb), "--out", str(out),
                 "--model", "tucker", "--encoder", "gru", "--word-dim", "8",
                 "--seeds", "1"] + FAST)
    assert code == 0
    return out / "seed-1" / "model.ckpt"


class TestAggregateCommand:
    def write(self, tmp_path, name, payload):
        p = tmp_path / name
        p.write_text(json.dumps(payload))
        return str(p)

    def test_two_point_example(self, tmp_path, capsys):
        files = [self.write(tmp_path, "a.json", {"MRR": 0.40}),
                 self.write(tmp_path, "b.json", {"MRR": 0.42})]
        code, out, _ = run_cli(["aggregate"] + files, capsys)
        assert code == 0
        row = [l for l in out.splitlines() if l.startswith("MRR")][0]
        _, mean, stdev, n = row.split("\t")
        assert abs(float(mean) - 0.41) < 1e-12
        assert abs(float(stdev) - 0.0141421) < 1e-6
        assert n == "2"

    def test_single_file_stdev_zero(self, tmp_path, capsys):
        files = [self.write(tmp_path, "a.json", {"MRR": 0.5, "MR": 3.0})]
        code, out, _ = run_cli(["aggregate"] + files, capsys)
        assert code == 0
        assert "stdev 0" in out.splitlines()[0]  # header documents it
        for row in out.splitlines()[2:]:
            assert row.split("\t")[2] == "0"
            assert row.split("\t")[3] == "1"

    def test_matches_direct_formula(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        vals = rng.random((5, 3))
        keys = ["MR", "MRR", "H@10"]
        files = [self.write(tmp_path, f"m{i}.json", dict(zip(keys, row)))
                 for i, row in enumerate(vals)]
        agg = aggregate_metrics([json.loads(Path(f).read_text())
                                 for f in files])
        for j, k in enumerate(keys):
            assert abs(agg[k]["mean"] - vals[:, j].mean()) < 1e-12
            assert abs(agg[k]["stdev"] - vals[:, j].std(ddof=1)) < 1e-12
        code, out, _ = run_cli(["aggregate", "--out",
                                str(tmp_path / "agg.tsv")] + files, capsys)
        assert code == 0
        assert (tmp_path / "agg.tsv").is_file()

    def test_schema_mismatch_is_usage_error(self, tmp_path, capsys):
        files = [self.write(tmp_path, "a.json", {"MRR": 0.4}),
                 self.write(tmp_path, "b.json", {"MR": 3.0})]
        code, _, err = run_cli(["aggregate"] + files, capsys)
        assert code == 2
        assert "schema" in err

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run_cli(["aggregate", str(tmp_path / "ghost.json")],
                               capsys)
        assert code == 2
        assert "not found" in err

    def test_nested_metrics_flatten(self, tmp_path, capsys):
        files = [self.write(tmp_path, "a.json",
                            {"valid": {"MRR": 0.2}, "test": {"MRR": 0.4}}),
                 self.write(tmp_path, "b.json",
                            {"valid": {"MRR": 0.4}, "test": {"MRR": 0.6}})]
        code, out, _ = run_cli(["aggregate"] + files, capsys)
        assert code == 0
        rows = dict(line.split("\t")[:2] for line in out.splitlines()[2:])
        assert abs(float(rows["test.MRR"]) - 0.5) < 1e-12
        assert abs(float(rows["valid.MRR"]) - 0.3) < 1e-12


class TestTrainCommands:
    def test_pretrain_artifacts_and_manifest(self, small_kb, tmp_path,
                                             capsys):
        out = tmp_path / "run"
        args = ["pretrain", "--kb", str(small_kb), "--out", str(out),
                "--model", "tucker", "--encoder", "table",
                "--seeds", "2"] + FAST
        code, stdout, _ = run_cli(args, capsys)
        assert code == 0
        paths = stdout_paths(stdout)
        assert paths and all(p.exists() for p in paths)

        man = json.loads((out / "manifest.json").read_text())
        assert man["command"] == "pretrain"
        assert man["seeds"] == [1, 2]
        assert man["config"]["model"] == "tucker"
        assert man["config"]["dim"] == 8
        assert "seed" not in man["config"]
        for k, rec in man["inputs"].items():
            assert rec["sha256"] == sha(rec["path"])
        # aggregates must be recomputable from the stored per-seed metrics
        per_seed = [man["per_seed"][s] for s in sorted(man["per_seed"])]
        again = aggregate_metrics(per_seed)
        for k, row in man["aggregate"].items():
            assert abs(row["mean"] - again[k]["mean"]) < 1e-12
            assert abs(row["stdev"] - again[k]["stdev"]) < 1e-12

        conv = (out / "seed-1" / "convergence.tsv").read_text().splitlines()
        assert conv[0] == "epoch\tvalid_MRR"
        assert len(conv) >= 2
        for line in conv[1:]:
            epoch, mrr = line.split("\t")
            assert int(epoch) >= 1
            assert 0.0 <= float(mrr) <= 1.0
        report = (out / "report.tsv").read_text().splitlines()
        assert report[0].startswith("seed\tsplit")
        assert len(report) == 1 + 2 * 2
        assert (out / "convergence.png").stat().st_size > 0
        assert (out / "metrics.png").stat().st_size > 0

    def test_manifest_stable_modulo_timestamps(self, small_kb, tmp_path,
                                               capsys):
        out = tmp_path / "rerun"
        args = ["pretrain", "--kb", str(small_kb), "--out", str(out),
                "--model", "tucker", "--encoder", "table",
                "--seeds", "1"] + FAST
        assert main(args) == 0
        first = json.loads((out / "manifest.json").read_text())
        assert main(args) == 0
        second = json.loads((out / "manifest.json").read_text())
        capsys.readouterr()
        first.pop("timestamps")
        second.pop("timestamps")
        assert first == second

    def test_finetune_from_checkpoint(self, small_kb, pretrained, tmp_path,
                                      capsys):
        out = tmp_path / "ft"
        args = ["finetune", "--kb", str(small_kb), "--out", str(out),
                "--model", "tucker", "--encoder", "gru", "--word-dim", "8",
                "--init", str(pretrained), "--seeds", "1"] + FAST
        code, stdout, _ = run_cli(args, capsys)
        assert code == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["command"] == "finetune"
        assert man["inputs"]["init"]["sha256"] == sha(pretrained)
        ckpt = load_checkpoint(out / "seed-1" / "model.ckpt")
        assert ckpt.encoder_kind == "gru"

    def test_config_file_and_flag_precedence(self, small_kb, tmp_path,
                                             capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"dim": 6, "epochs": 4,
                                   "learning_rate": 0.05}))
        out = tmp_path / "cfgrun"
        args = ["pretrain", "--kb", str(small_kb), "--out", str(out),
                "--model", "tucker", "--encoder", "table",
                "--config", str(cfg), "--dim", "4", "--seeds", "1",
                "--batch-size", "64", "--validate-every", "2"]
        code, _, _ = run_cli(args, capsys)
        assert code == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["config"]["dim"] == 4          # flag beats file
        assert man["config"]["epochs"] == 4       # file beats default
        assert man["config"]["learning_rate"] == 0.05
        assert man["inputs"]["config_file"]["sha256"] == sha(cfg)

    def test_unknown_config_key(self, small_kb, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"dimension": 6}))
        code, _, err = run_cli(
            ["pretrain", "--kb", str(small_kb), "--out", str(tmp_path / "x"),
             "--config", str(cfg)], capsys)
        assert code == 2
        assert "unknown config keys: dimension" in err

    def test_parallel_seeds_match_sequential(self, small_kb, tmp_path,
                                             capsys, monkeypatch):
        base = ["pretrain", "--kb", str(small_kb), "--model", "tucker",
                "--encoder", "table", "--seeds", "2"] + FAST
        monkeypatch.delenv("KBCT_WORKERS", raising=False)
        assert main(base + ["--out", str(tmp_path / "seq")]) == 0
        monkeypatch.setenv("KBCT_WORKERS", "2")
        assert main(base + ["--out", str(tmp_path / "par")]) == 0
        capsys.readouterr()
        for seed in (1, 2):
            assert sha(tmp_path / "seq" / f"seed-{seed}" / "model.ckpt") == \
                sha(tmp_path / "par" / f"seed-{seed}" / "model.ckpt")


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["pretrain", "--bogus"])
        capsys.readouterr()
        assert exc.value.code == 2

    def test_missing_input_file(self, tmp_path, capsys):
        code, _, err = run_cli(
            ["pretrain", "--train", str(tmp_path / "no.tsv"),
             "--valid", str(tmp_path / "no.tsv"),
             "--test", str(tmp_path / "no.tsv"),
             "--out", str(tmp_path / "o")], capsys)
        assert code == 2
        assert "not found" in err

    def test_schema_violation(self, small_kb, tmp_path, capsys):
        code, _, err = run_cli(
            ["pretrain", "--kb", str(small_kb), "--out", str(tmp_path / "o"),
             "--dim", "-3"], capsys)
        assert code == 2
        assert "dim" in err

    def test_bad_kb_dir(self, tmp_path, capsys):
        code, _, err = run_cli(
            ["pretrain", "--kb", str(tmp_path / "nowhere"),
             "--out", str(tmp_path / "o")], capsys)
        assert code == 2

    def test_runtime_failure_is_exit_one(self, small_kb, pretrained,
                                         tmp_path, capsys):
        # table-encoder checkpoint applied to a KB with other entities
        other = tmp_path / "other"
        synth.generate_overfit_kb(other, seed=9, n_triples=20, n_entities=30)
        pre = tmp_path / "tablepre"
        assert main(["pretrain", "--kb", str(small_kb), "--out", str(pre),
                     "--model", "tucker", "--encoder", "table",
                     "--seeds", "1"] + FAST) == 0
        capsys.readouterr()
        code, _, err = run_cli(
            ["eval", "--ckpt", str(pre / "seed-1" / "model.ckpt"),
             "--kb", str(other), "--out", str(tmp_path / "o")], capsys)
        assert code == 1
        assert "error" in err


class TestEvalCommands:
    def test_eval_report_matches_library(self, small_kb, pretrained,
                                         tmp_path, capsys):
        out = tmp_path / "eval"
        code, stdout, _ = run_cli(
            ["eval", "--ckpt", str(pretrained), "--kb", str(small_kb),
             "--out", str(out)], capsys)
        assert code == 0
        assert all(p.exists() for p in stdout_paths(stdout))
        man = json.loads((out / "manifest.json").read_text())
        ckpt = load_checkpoint(pretrained)
        kb = load_kb(small_kb / "train.tsv", small_kb / "valid.tsv",
                     small_kb / "test.tsv")
        rep = evaluate(ckpt.make_model(), ckpt.make_encoder(), kb, "test")
        assert abs(man["results"]["test"]["MRR"] - rep.mrr) < 1e-9
        lines = (out / "report.tsv").read_text().splitlines()
        assert lines[0] == "split\tMR\tMRR\tH@1\tH@10\tn_queries"
        assert len(lines) == 3

    def test_zeroshot_reports_baseline(self, small_kb, pretrained, tmp_path,
                                       capsys):
        out = tmp_path / "zs"
        code, stdout, _ = run_cli(
            ["zeroshot", "--ckpt", str(pretrained), "--kb", str(small_kb),
             "--out", str(out)], capsys)
        assert code == 0
        man = json.loads((out / "manifest.json").read_text())
        kb = load_kb(small_kb / "train.tsv", small_kb / "valid.tsv",
                     small_kb / "test.tsv")
        assert man["results"]["random_baseline_MR"] == \
            (kb.num_entities + 1) / 2
        assert (out / "zeroshot.tsv").is_file()

    def test_zeroshot_requires_gru(self, small_kb, tmp_path, capsys):
        pre = tmp_path / "tbl"
        assert main(["pretrain", "--kb", str(small_kb), "--out", str(pre),
                     "--model", "tucker", "--encoder", "table",
                     "--seeds", "1"] + FAST) == 0
        capsys.readouterr()
        code, _, err = run_cli(
            ["zeroshot", "--ckpt", str(pre / "seed-1" / "model.ckpt"),
             "--kb", str(small_kb), "--out", str(tmp_path / "o")], capsys)
        assert code == 1
        assert "name encoder" in err


@pytest.fixture(scope="module")
def diag_world(tmp_path_factory):
    out = tmp_path_factory.mktemp("dworld")
    synth.generate_synthetic_diagnostics(out, seed=0)
    return out


@pytest.fixture(scope="module")
def diag_ckpt(tmp_path_factory, diag_world):
    out = tmp_path_factory.mktemp("dpre")
    code = main(["pretrain", "--kb", str(diag_world / "corpus"),
                 "--out", str(out), "--model", "tucker", "--encoder", "gru",
                 "--word-dim", "12", "--dim", "12", "--epochs", "10",
                 "--batch-size", "512", "--validate-every", "5",
                 "--learning-rate", "0.01", "--dropout", "0.0",
                 "--seeds", "1"])
    assert code == 0
    return out / "seed-1" / "model.ckpt"


class TestDiagnoseCommand:
    def test_ranks_suite(self, diag_world, diag_ckpt, tmp_path, capsys):
        out = tmp_path / "ranks"
        code, stdout, _ = run_cli(
            ["diagnose", "--ckpt", str(diag_ckpt),
             "--doge", str(diag_world / "doge.jsonl"),
             "--suite", "ranks", "--out", str(out)], capsys)
        assert code == 0
        assert all(p.exists() for p in stdout_paths(stdout))
        lines = (out / "ranks.tsv").read_text().splitlines()
        assert lines[0] == "id\tkind\tgroup\trank"
        n_insts = len((diag_world / "doge.jsonl")
                      .read_text().strip().splitlines())
        assert len(lines) == 1 + n_insts
        summary = (out / "summary.tsv").read_text().splitlines()
        kinds = {line.split("\t")[0] for line in summary[1:]}
        assert "general" in kinds and "stereotype" in kinds

    def test_consistency_suite(self, diag_world, diag_ckpt, tmp_path,
                               capsys):
        out = tmp_path / "cons"
        code, stdout, _ = run_cli(
            ["diagnose", "--ckpt", str(diag_ckpt),
             "--doge", str(diag_world / "doge.jsonl"),
             "--suite", "consistency", "--out", str(out)], capsys)
        assert code == 0
        lines = (out / "consistency.tsv").read_text().splitlines()
        assert lines[0] == "pair_kind\tmean_rank_diff\tstdev_rank_diff\tn_pairs"
        kinds = [line.split("\t")[0] for line in lines[1:]]
        for expected in ("entity-synonym-twin", "relation-synonym-twin",
                         "inverse-twin", "all"):
            assert expected in kinds
        assert (out / "consistency.png").stat().st_size > 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["command"] == "diagnose:consistency"

    def test_deductive_suite(self, diag_world, diag_ckpt, tmp_path, capsys):
        out = tmp_path / "ded"
        code, stdout, _ = run_cli(
            ["diagnose", "--ckpt", str(diag_ckpt),
             "--doge", str(diag_world / "doge.jsonl"),
             "--suite", "deductive", "--out", str(out),
             "--added-train", str(diag_world / "added_train.tsv"),
             "--added-valid", str(diag_world / "added_valid.tsv"),
             "--epochs", "8", "--batch-size", "256",
             "--validate-every", "4", "--learning-rate", "0.01"], capsys)
        assert code == 0
        lines = (out / "deductive.tsv").read_text().splitlines()
        assert [line.split("\t")[0] for line in lines] == \
            ["condition", "background", "no_added", "with_added"]
        man = json.loads((out / "manifest.json").read_text())
        assert man["config"]["dim"] == 12  # structure came from the ckpt

    def test_stereotype_suite(self, diag_world, diag_ckpt, tmp_path, capsys):
        out = tmp_path / "st"
        code, stdout, _ = run_cli(
            ["diagnose", "--ckpt", str(diag_ckpt),
             "--doge", str(diag_world / "doge.jsonl"),
             "--suite", "stereotype", "--out", str(out),
             "--added-train", str(diag_world / "added_train.tsv"),
             "--added-valid", str(diag_world / "added_valid.tsv"),
             "--epochs", "8", "--batch-size", "256",
             "--validate-every", "4", "--learning-rate", "0.01"], capsys)
        assert code == 0
        text = (out / "stereotype.tsv").read_text()
        assert text.startswith("condition\tgroup\tMR\tMRR\tH@1\tn\n")
        tests = json.loads((out / "wilcoxon.json").read_text())
        assert set(tests) == {"no-added", "with-added"}
        assert (out / "stereotype.png").stat().st_size > 0

    def test_deductive_requires_added_files(self, diag_world, diag_ckpt,
                                            tmp_path, capsys):
        code, _, err = run_cli(
            ["diagnose", "--ckpt", str(diag_ckpt),
             "--doge", str(diag_world / "doge.jsonl"),
             "--suite", "deductive", "--out", str(tmp_path / "o")], capsys)
        assert code == 2
        assert "--added-train" in err


class TestGridsearchCommand:
    def test_grid_runs_and_reports(self, small_kb, tmp_path, capsys):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"learning_rate": [0.0, 0.05]}))
        out = tmp_path / "gs"
        code, stdout, _ = run_cli(
            ["gridsearch", "--kb", str(small_kb), "--out", str(out),
             "--grid", str(grid), "--model", "tucker", "--encoder", "table",
             "--dim", "8", "--epochs", "5", "--batch-size", "64",
             "--validate-every", "5", "--dropout", "0.0"], capsys)
        assert code == 0
        lines = (out / "grid.tsv").read_text().splitlines()
        assert len(lines) == 3
        assert lines[1].startswith("cell-000\t")
        man = json.loads((out / "manifest.json").read_text())
        assert man["results"]["best_config"]["learning_rate"] == 0.05
        ckpt = load_checkpoint(out / "best.ckpt")
        assert ckpt.model_kind == "tucker"

    def test_bad_grid_key(self, small_kb, tmp_path, capsys):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"pace": [1]}))
        code, _, err = run_cli(
            ["gridsearch", "--kb", str(small_kb), "--out", str(tmp_path),
             "--grid", str(grid)], capsys)
        assert code == 2
        assert "unknown grid keys" in err


class TestGenDiagnosticsCommand:
    def test_generates_world(self, tmp_path, capsys):
        out = tmp_path / "world"
        code, stdout, _ = run_cli(
            ["gen-diagnostics", "--out", str(out), "--seed", "4"], capsys)
        assert code == 0
        paths = stdout_paths(stdout)
        assert all(p.exists() for p in paths)
        assert (out / "doge.jsonl").is_file()
        assert (out / "corpus" / "train.tsv").is_file()


class TestConsoleEntry:
    def test_module_invocation(self, tmp_path):
        env = dict(os.environ)
        env["PYTHONPATH"] = str(Path(__file__).resolve().parents[1] / "src")
        proc = subprocess.run(
            [sys.executable, "-m", "kbct.cli", "aggregate", "nope.json"],
            capture_output=True, text=True, env=env)
        assert proc.returncode == 2
        assert "usage error" in proc.stderr
