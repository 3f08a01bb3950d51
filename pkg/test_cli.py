#!/usr/bin/env python3
"""
Tests for the waffle-lab command line (argument parsing, exit codes, JSON output)
"""

import io
import json
import tempfile
from contextlib import redirect_stdout
from fractions import Fraction
from pathlib import Path

from datasets import make_synthetic_dataset, partition_iid, save_partition_manifest
from errors import ConfigError
from training import init_model, save_checkpoint
from waffle_lab import build_parser, main, parse_coalition, parse_epsilon, parse_params
from watermark import generate_waffle_pattern, load_watermark, save_watermark

SYNTHETIC = json.dumps({"train_per_class": 10, "test_per_class": 5})


def run_cli(*argv):
    out = io.StringIO()
    with redirect_stdout(out):
        code = main(["--quiet", *argv])
    return code, out.getvalue()


def write_artifacts(tmp: Path):
    model = init_model("mlp", (28, 28, 1), 10, seed=0)
    wm = generate_waffle_pattern((28, 28, 1), 10, 20, seed=0)
    save_checkpoint(model, tmp / "model.ckpt")
    save_watermark(wm, tmp / "watermark.wm")
    train = make_synthetic_dataset(train_per_class=10, test_per_class=5).train
    save_partition_manifest(partition_iid(train, 4, 20, seed=0), tmp / "partition.json")
    return wm


def test_parse_helpers():
    assert parse_coalition("3") == 3 and isinstance(parse_coalition("3"), int)
    assert parse_coalition("0.1") == 0.1
    assert parse_epsilon("2^-64") == Fraction(1, 2 ** 64)
    assert parse_epsilon("1/1000") == Fraction(1, 1000)
    assert parse_params(["epochs=5", "name=abc", "flag=true"]) == {"epochs": 5, "name": "abc", "flag": True}
    for fn, arg in ((parse_coalition, "x"), (parse_epsilon, "abc"), (parse_params, ["epochs"])):
        try:
            fn(arg)
        except ConfigError:
            continue
        raise AssertionError(f"expected ConfigError from {fn.__name__}")


def test_run_resumes_by_default():
    parser = build_parser()
    assert parser.parse_args(["run", "grid.json"]).resume is True
    assert parser.parse_args(["run", "grid.json", "--resume"]).resume is True
    assert parser.parse_args(["run", "grid.json", "--no-resume"]).resume is False


def test_verify_prints_json():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        wm = write_artifacts(tmp)
        code, out = run_cli(
            "verify", "--checkpoint", str(tmp / "model.ckpt"), "--watermark", str(tmp / "watermark.wm"),
            "--commitment", wm.commitment,
        )
    assert code == 0
    result = json.loads(out)
    assert result["threshold"] == 1.0 and result["n"] == 20
    assert result["verdict"] == (result["watermark_accuracy"] >= 1.0)
    assert result["commitment_matches"] is True


def test_bad_epsilon_is_a_config_error():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        write_artifacts(tmp)
        code, _ = run_cli(
            "verify", "--checkpoint", str(tmp / "model.ckpt"), "--watermark", str(tmp / "watermark.wm"),
            "--epsilon", "abc",
        )
    assert code == 2


def test_missing_grid_exits_with_config_code():
    code, _ = run_cli("run", "does-not-exist.json")
    assert code == 2


def test_missing_runs_dir_exits_with_config_code():
    assert run_cli("report", "no/such/runs")[0] == 2


def test_commitment_command():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        wm = write_artifacts(tmp)
        code, out = run_cli("commitment", str(tmp / "watermark.wm"))
    assert code == 0
    data = json.loads(out)
    assert data["commitment"] == wm.commitment
    assert all(data["audit"].values())


def test_watermark_command_writes_a_set():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "wm.wm"
        code, out = run_cli(
            "watermark", "--dataset", "synthetic", "--dataset-options", SYNTHETIC,
            "--size", "20", "--seed", "3", "--out", str(path),
        )
        assert code == 0
        data = json.loads(out)
        assert data["size"] == 20 and data["method"] == "WafflePattern"
        assert load_watermark(path).commitment == data["commitment"]


def test_attack_command_appends_report():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        write_artifacts(tmp)
        code, _ = run_cli(
            "attack", "--attack", "finetune", "--coalition", "2",
            "--checkpoint", str(tmp / "model.ckpt"), "--watermark", str(tmp / "watermark.wm"),
            "--partition", str(tmp / "partition.json"),
            "--dataset", "synthetic", "--dataset-options", SYNTHETIC,
            "--client", json.dumps({"batch_size": 10}), "--param", "epochs=1",
        )
        assert code == 0
        with open(tmp / "attacks.jsonl") as f:
            reports = [json.loads(line) for line in f if line.strip()]
    assert len(reports) == 1
    assert reports[0]["attack"] == "finetune" and reports[0]["coalition_size"] == 2
    assert reports[0]["parameters"] == {"epochs": 1}
    assert "config_digest" in reports[0] and "utility_drop" in reports[0]


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✓ {name}")
