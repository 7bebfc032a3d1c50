"""End-to-end runs of the command line on the bundled toy data."""

import csv
import json
import os

import pytest

from app import main
from modules.checkpoint import save_checkpoint
from modules.config import OUTPUT_DIR_ENV
from modules.mlanet_model import MLANet

TOY = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "toy_molecules.extxyz")

SMALL_MODEL = {"hidden_irreps": "4x0e+2x1o", "r_cut": 4.0, "embed_dim": 4, "mlp_hidden": 8,
               "species": [1, 6, 7, 8]}


@pytest.fixture
def run_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({
        "model": SMALL_MODEL,
        "train": {"epochs": 2, "batch_size": 4, "learning_rate": 1e-3, "loss": {"energy": 1.0, "forces": 0.0}},
        "data": {"train_path": TOY, "split": [0.6, 0.2, 0.2]},
    }))
    return str(path)


@pytest.fixture
def checkpoint(tmp_path, small_config):
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), MLANet(small_config))
    return str(path)


def _last_json(capsys):
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    return json.loads(lines[-1])


def test_verify(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["--output-dir", str(out), "verify"]) == 0
    record = _last_json(capsys)
    assert record["status"] == "ok"
    assert json.loads((out / "verification.json").read_text())["passed"]


def test_bad_flags_exit_2():
    assert main(["train"]) == 2
    assert main(["no-such-command"]) == 2


def test_train_writes_summary_and_checkpoints(tmp_path, run_config, capsys):
    out = tmp_path / "out"
    assert main(["--output-dir", str(out), "train", "--config", run_config]) == 0
    record = _last_json(capsys)
    assert record["n_train"] + record["n_val"] + record["n_test"] == 10
    assert record["epochs_run"] == 2
    assert "mae_energy" in record["test"]["metrics"]
    assert (out / "final.ckpt").exists()
    assert (out / "run_config.json").exists()
    assert json.loads((out / "train_summary.json").read_text())["status"] == "ok"


def test_train_with_fold(tmp_path, run_config, capsys):
    out = tmp_path / "out"
    assert main(["--output-dir", str(out), "train", "--config", run_config, "--fold", "1"]) == 0
    record = _last_json(capsys)
    assert record["fold"] == 1
    assert record["n_test"] == 1
    assert record["n_val"] == 0


def test_eval_writes_predictions(tmp_path, checkpoint, capsys):
    out = tmp_path / "out"
    assert main(["--output-dir", str(out), "eval", "--checkpoint", checkpoint, "--data", TOY]) == 0
    record = _last_json(capsys)
    assert record["n_structures"] == 10
    assert "mae_energy" in record["metrics"]
    with open(out / "predictions.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 10
    assert rows[0]["energy_label"] == "-7.412"


def test_bench_rows_per_frame(tmp_path, checkpoint, capsys):
    out = tmp_path / "out"
    code = main(["--output-dir", str(out), "bench", "--checkpoint", checkpoint, "--structure", TOY,
                 "--repeat", "1"])
    assert code == 0
    assert len(_last_json(capsys)["rows"]) == 10
    assert (out / "bench.csv").exists()


def test_md_run(tmp_path, checkpoint, capsys):
    out = tmp_path / "out"
    code = main(["--output-dir", str(out), "md", "--checkpoint", checkpoint, "--structure", TOY,
                 "--steps", "5", "--dt", "0.25"])
    assert code == 0
    record = _last_json(capsys)
    assert record["frames_written"] <= 1
    assert 0 <= record["steps_completed"] <= 5
    assert json.loads((out / "md_report.json").read_text())["status"] == "ok"


def test_learning_curve(tmp_path, run_config, capsys):
    out = tmp_path / "out"
    code = main(["--output-dir", str(out), "learning-curve", "--config", run_config, "--sizes", "2,4",
                 "--test-size", "2"])
    assert code == 0
    assert [row["size"] for row in _last_json(capsys)["rows"]] == [2, 4]
    assert (out / "learning_curve.csv").exists()


def test_error_record(tmp_path, capsys):
    code = main(["--output-dir", str(tmp_path), "eval", "--checkpoint", str(tmp_path / "absent.ckpt"),
                 "--data", TOY])
    assert code == 1
    record = _last_json(capsys)
    assert record == {"status": "error", "category": "checkpoint", "message": record["message"]}
    assert "not found" in record["message"]


def test_bad_sizes_are_configuration_errors(tmp_path, run_config, capsys):
    code = main(["--output-dir", str(tmp_path), "learning-curve", "--config", run_config, "--sizes", "a,b"])
    assert code == 1
    assert _last_json(capsys)["category"] == "configuration"


def test_output_dir_from_environment(tmp_path, monkeypatch, checkpoint):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env_out"))
    assert main(["eval", "--checkpoint", checkpoint, "--data", TOY]) == 0
    assert (tmp_path / "env_out" / "predictions.csv").exists()
