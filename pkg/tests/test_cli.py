import csv
import json

import numpy as np
import pytest

from ccfp import harness
from ccfp.backbone import load_checkpoint
from ccfp.cli import main, parse_args
from ccfp.data import write_idx_images, write_idx_labels
from ccfp.errors import ConfigError, TrainingAborted
from ccfp.trainer import TrainLog

FAST = ["--n-per-domain", "12", "--steps", "3", "--eval-every", "2", "--batch-size", "8",
        "--widths", "3,3,4,4", "--no-plots"]


def run(tmp_path, name, *argv):
    out = tmp_path / name
    code = main([*argv, *FAST, "--out", str(out)])
    return code, out


def test_train_writes_artifacts(tmp_path, capsys):
    code, out = run(tmp_path, "t", "train", "--algorithm", "ccfp", "--dataset", "rmnist-mini",
                    "--target-domain", "45", "--seed", "0")
    assert code == 0
    trial = json.loads((out / "trial.json").read_text())
    assert trial["status"] == "ok" and trial["checkpoint_steps"] == [2, 3]
    assert "wall_seconds" in trial
    assert "wall_seconds" not in json.loads((out / "metrics.json").read_text())["trial"]
    log = TrainLog.read_jsonl(out / "trainlog.jsonl")
    assert len(log.records) == 3
    model, meta = load_checkpoint(out / "checkpoint.npz")
    assert meta["kind"] == "dual" and meta["extra"]["selected_step"] == trial["selected_step"]
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("algorithm,seed,target_domain")


def test_train_renders_plot(tmp_path):
    out = tmp_path / "p"
    argv = ["train", *[a for a in FAST if a != "--no-plots"], "--out", str(out)]
    assert main(argv) == 0
    assert (out / "trainlog.png").read_bytes()[:4] == b"\x89PNG"


def test_eval_matches_train_report(tmp_path):
    code, out = run(tmp_path, "t", "train", "--algorithm", "erm", "--seed", "2")
    assert code == 0
    trial = json.loads((out / "trial.json").read_text())
    code, ev = run(tmp_path, "e", "eval", "--checkpoint", str(out / "checkpoint.npz"), "--seed", "2")
    assert code == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert metrics["target_test_acc"] == trial["target_acc"]
    assert metrics["source_val_acc"] == trial["selected_val_acc"]


def test_sweep_outputs(tmp_path):
    code, out = run(tmp_path, "s", "sweep", "--n-trials", "2", "--seeds", "0,1", "--steps", "2",
                    "--eval-every", "1")
    assert code == 0
    rows = list(csv.DictReader(open(out / "results.csv")))
    assert len(rows) == 4
    assert all(0.1 <= float(r["lambda_dis"]) <= 10 for r in rows)
    assert len((out / "trials.jsonl").read_text().splitlines()) == 4
    summary = list(csv.DictReader(open(out / "summary.csv")))
    assert summary[0]["algorithm"] == "ccfp" and " ± " in summary[0]["formatted"]
    assert json.loads((out / "summary.json").read_text())["n_results"] == 4


def test_diagnose_counts(tmp_path):
    code, out = run(tmp_path, "d", "diagnose", "--algorithm", "ccfp", "--sites", "0,1")
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["rows"] == metrics["expected_rows"] == 4 * (3 + 3)
    rows = list(csv.reader(open(out / "feature_stats.csv")))
    assert rows[0] == ["domain", "site", "channel", "mean", "std"] and len(rows) == 25


def test_compare_table(tmp_path):
    code, out = run(tmp_path, "c", "compare", "--algorithms", "erm,ccfp", "--target-domains", "0,45",
                    "--steps", "2")
    assert code == 0
    table = list(csv.DictReader(open(out / "compare.csv")))
    assert [r["algorithm"] for r in table] == ["erm", "ccfp"]
    assert list(table[0]) == ["algorithm", "0", "45", "avg"]
    assert all(" ± " in r["0"] for r in table)
    assert len(list(csv.DictReader(open(out / "results.csv")))) == 4


def test_cmnist_and_idx_datasets(tmp_path):
    assert run(tmp_path, "cm", "train", "--dataset", "cmnist-mini", "--target-domain", "10")[0] == 0
    rng = np.random.default_rng(0)
    write_idx_images(tmp_path / "img", rng.integers(0, 256, (30, 12, 12)).astype(np.uint8))
    write_idx_labels(tmp_path / "lab", (np.arange(30) % 10).astype(np.uint8))
    source = f"idx:{tmp_path / 'img'},{tmp_path / 'lab'}"
    assert run(tmp_path, "ix", "train", "--dataset", source, "--algorithm", "erm")[0] == 0
    assert run(tmp_path, "ixc", "train", "--dataset", source + ",colored", "--algorithm", "erm")[0] == 0
    assert run(tmp_path, "bad", "train", "--dataset", source + ",sheared")[0] == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr": 0.01, "lambda-sem": 3.0, "steps": 7}))
    args = parse_args(["train", "--config", str(cfg), "--steps", "2"])
    assert args.lr == 0.01 and args.lambda_sem == 3.0 and args.steps == 2
    cfg.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(ConfigError):
        parse_args(["train", "--config", str(cfg)])
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["frobnicate"],
    ["train", "--steps", "0"],
    ["train", "--target-domain", "99"],
    ["train", "--widths", "3,3"],
    ["train", "--dataset", "imagenet"],
    ["compare", "--algorithms", "erm,irm"],
    ["diagnose", "--sites", "9"],
])
def test_config_errors_exit_2(tmp_path, argv, capsys):
    if argv[0] != "frobnicate":
        argv = [*argv, "--n-per-domain", "12", "--out", str(tmp_path / "o")]
    assert main(argv) == 2


def test_failed_run_exits_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise TrainingAborted("non-finite loss", {"step": 1})

    monkeypatch.setattr(harness, "train_ccfp", boom)
    code, out = run(tmp_path, "f", "train", "--algorithm", "ccfp")
    assert code == 3
    assert json.loads((out / "trial.json").read_text())["status"] == "failed"


def test_repeated_runs_are_byte_identical(tmp_path):
    argv = ["train", "--algorithm", "ccfp", "--seed", "3"]
    _, a = run(tmp_path, "a", *argv)
    _, b = run(tmp_path, "b", *argv)
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
    assert (a / "trainlog.jsonl").read_bytes() == (b / "trainlog.jsonl").read_bytes()
