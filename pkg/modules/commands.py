# modules/commands.py

"""
Commands Module

Library half of the command line: one function per subcommand, each taking
plain arguments, writing its CSV/JSON outputs under the output directory and
returning a JSON-ready summary. `app.py` only parses flags and calls these.
"""

import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from modules.checkpoint import load_checkpoint, save_checkpoint
from modules.config import RunConfig
from modules.datasets import diamond_supercell
from modules.errors import ConfigurationError, DataError
from modules.extxyz_io import parse_extxyz
from modules.file_utils import write_csv, write_json
from modules.md_engine import StabilityMonitor, benchmark_inference, run_md
from modules.memory_monitor import monitor_phase
from modules.mlanet_model import MLANet
from modules.training import (evaluate, kfold_split, learning_curve, split_dataset, train)
from modules.verification import run_verification

LOG = logging.getLogger(__name__)

BENCH_HEADER = ["n_atoms", "latency_ms", "fps"]
PREDICTIONS_HEADER = ["index", "n_atoms", "energy_pred", "energy_label"]


def _load_dataset(path: str, limit: Optional[int] = None):
    frames = parse_extxyz(path)
    if limit is not None:
        frames = frames[:limit]
    if not frames:
        raise DataError(f"no structures in {path}")
    return frames


def _output_dir(config: Optional[RunConfig] = None, output_dir: Optional[str] = None) -> str:
    path = output_dir or (config.resolved_output_dir() if config else RunConfig().resolved_output_dir())
    os.makedirs(path, exist_ok=True)
    return path


def _strip_predictions(result: Dict[str, Any]) -> Dict[str, Any]:
    return {key: value for key, value in result.items() if key != "predictions"}


# ==============================================================================
# TRAIN / EVAL
# ==============================================================================

@monitor_phase("TRAIN")
def train_command(config: RunConfig, fold: Optional[int] = None, resume: Optional[str] = None,
                  output_dir: Optional[str] = None) -> Dict[str, Any]:
    """
    Train on `config.data`. With a fold index (argument or config) the data is
    split k-fold and that fold is the test set; otherwise the ratio split applies.
    A separate test file, when configured, replaces the test split.
    """
    out = _output_dir(config, output_dir)
    data = config.data
    frames = _load_dataset(data.train_path, data.limit)
    fold = fold if fold is not None else data.fold

    if fold is not None:
        splits = kfold_split(len(frames), data.n_folds, config.train.seed)
        if not 0 <= fold < len(splits):
            raise ConfigurationError(f"fold {fold} outside 0..{len(splits) - 1}")
        train_idx, test_idx = splits[fold]
        val_idx = np.array([], dtype=np.int64)
    else:
        train_idx, val_idx, test_idx = split_dataset(len(frames), data.split, config.train.seed)

    train_set = [frames[i] for i in train_idx]
    val_set = [frames[i] for i in val_idx]
    test_set = [frames[i] for i in test_idx]
    if data.test_path:
        test_set = _load_dataset(data.test_path)

    model = MLANet(config.model)
    write_json(os.path.join(out, "run_config.json"), config.to_dict())
    result = train(model, train_set, val_set, config.train, output_dir=out, resume=resume)
    save_checkpoint(os.path.join(out, "final.ckpt"), model)

    summary: Dict[str, Any] = {
        "status": "ok",
        "n_train": len(train_set),
        "n_val": len(val_set),
        "n_test": len(test_set),
        "fold": fold,
        "epochs_run": len(result.history),
        "final_train_loss": result.final_train_loss,
        "best_val_loss": result.best_val_loss,
        "best_epoch": result.best_epoch,
        "seconds_per_epoch": result.seconds_per_epoch,
        "peak_rss_mb": result.peak_rss_mb,
        "stopped_early": result.stopped_early,
        "checkpoint": result.checkpoint_path,
    }
    if test_set:
        summary["test"] = _strip_predictions(evaluate(model, test_set, config.train.batch_size))
    write_json(os.path.join(out, "train_summary.json"), summary)
    LOG.info(f"✅ Train command finished: {len(result.history)} epochs, outputs in {out}")
    return summary


@monitor_phase("EVAL")
def eval_command(checkpoint: str, data_path: str, output_dir: Optional[str] = None,
                 batch_size: int = 32) -> Dict[str, Any]:
    out = _output_dir(output_dir=output_dir)
    model = load_checkpoint(checkpoint).model
    frames = _load_dataset(data_path)
    result = evaluate(model, frames, batch_size)

    energies = result["predictions"]["energy"]
    rows = [[i, s.n_atoms, float(energies[i]), "" if s.energy is None else s.energy] for i, s in enumerate(frames)]
    write_csv(os.path.join(out, "predictions.csv"), PREDICTIONS_HEADER, rows)
    summary = {"status": "ok", "checkpoint": checkpoint, "data": data_path, **_strip_predictions(result)}
    write_json(os.path.join(out, "eval_metrics.json"), summary)
    return summary


# ==============================================================================
# MD / BENCH
# ==============================================================================

@monitor_phase("MD")
def md_command(checkpoint: str, structure_path: str, steps: int, dt: float, temperature: Optional[float] = None,
               config: Optional[RunConfig] = None, output_dir: Optional[str] = None) -> Dict[str, Any]:
    """Run MD from the first frame of `structure_path`; thermostat and thresholds from `config.md`."""
    config = config or RunConfig()
    out = _output_dir(config, output_dir)
    md = config.md
    model = load_checkpoint(checkpoint).model
    structure = _load_dataset(structure_path)[0]
    monitor = StabilityMonitor(min_distance=md.min_distance, bond_factor=md.bond_factor,
                               drift_factor=md.drift_factor)
    temperature = temperature if temperature is not None else md.temperature
    result = run_md(structure, model, steps, dt, monitor=monitor, temperature=temperature,
                    friction=md.friction if temperature is not None else 0.0, seed=md.seed,
                    write_every=md.write_every, trajectory_path=os.path.join(out, "trajectory.extxyz"))
    report = {"status": "ok", **result.report.to_dict(), "frames_written": len(result.frames)}
    write_json(os.path.join(out, "md_report.json"), report)
    return report


@monitor_phase("BENCH")
def bench_command(checkpoint: str, structure_path: Optional[str] = None, repeat: int = 3,
                  supercells: Sequence[int] = (), output_dir: Optional[str] = None) -> Dict[str, Any]:
    """Inference latency per structure: every frame of `structure_path`, then diamond supercells."""
    out = _output_dir(output_dir=output_dir)
    model = load_checkpoint(checkpoint).model
    structures = list(_load_dataset(structure_path)) if structure_path else []
    structures += [diamond_supercell(n) for n in supercells]
    if not structures:
        raise ConfigurationError("bench needs --structure or --supercells")
    rows = benchmark_inference(model, structures, repeat)
    write_csv(os.path.join(out, "bench.csv"), BENCH_HEADER, [[row[k] for k in BENCH_HEADER] for row in rows])
    return {"status": "ok", "rows": rows}


# ==============================================================================
# LEARNING CURVE / VERIFY
# ==============================================================================

@monitor_phase("LEARNING_CURVE")
def learning_curve_command(config: RunConfig, sizes: Sequence[int], test_size: Optional[int] = None,
                           output_dir: Optional[str] = None) -> Dict[str, Any]:
    out = _output_dir(config, output_dir)
    frames = _load_dataset(config.data.train_path, config.data.limit)
    rows = learning_curve(frames, list(sizes), config.model, config.train, test_size=test_size,
                          seed=config.train.seed, output_path=os.path.join(out, "learning_curve.csv"))
    return {"status": "ok", "rows": rows}


@monitor_phase("VERIFY")
def verify_command(full: bool = False, output_dir: Optional[str] = None) -> Dict[str, Any]:
    out = _output_dir(output_dir=output_dir)
    report = run_verification(full=full)
    report["status"] = "ok" if report["passed"] else "failed"
    write_json(os.path.join(out, "verification.json"), report)
    return report


def parse_sizes(text: str) -> List[int]:
    try:
        sizes = [int(chunk) for chunk in text.split(",") if chunk.strip()]
    except ValueError:
        raise ConfigurationError(f"sizes must be comma-separated integers, got '{text}'")
    if not sizes or min(sizes) < 1:
        raise ConfigurationError(f"sizes must be positive integers, got '{text}'")
    return sizes
