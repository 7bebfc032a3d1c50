"""Loss, optimizer, schedule, splits, metrics and the epoch loop."""

import json
import math
import os

import numpy as np
import pytest

from modules import tensor_core as tc
from modules.atomic_graph import AtomicStructure
from modules.checkpoint import load_checkpoint
from modules.config import LossWeights, TrainConfig
from modules.datasets import molecule, molecule_dataset, perturbed_frames
from modules.errors import ContractError, DataError, TrainingError
from modules.mlanet_model import MLANet
from modules.training import (AdamWState, BatchLabels, adamw_step, clip_grad_norm, cosine_lr, evaluate,
                              fit_reference_energies, kfold_split, learning_curve, metrics, split_dataset,
                              train, train_step)


@pytest.fixture
def frames():
    return perturbed_frames(molecule("water"), 6, amplitude=0.05, seed=0)


# ==============================================================================
# SCHEDULE / OPTIMIZER
# ==============================================================================

def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx(0.5 * (1e-3 + 1e-5))
    with pytest.raises(ContractError):
        cosine_lr(101, 100, 1e-3)


def test_first_adam_step_moves_by_learning_rate():
    params = {"w": tc.parameter([1.0, -2.0])}
    params["w"].grad = np.array([0.3, -5.0])
    state = adamw_step(params, AdamWState.zeros(params), lr=0.01)
    assert state.step == 1
    np.testing.assert_allclose(params["w"].data, [0.99, -1.99], atol=1e-9)


def test_weight_decay_is_decoupled():
    params = {"w": tc.parameter([2.0])}
    params["w"].grad = np.zeros(1)
    adamw_step(params, AdamWState.zeros(params), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(params["w"].data, [2.0 * (1.0 - 0.05)])


def test_non_finite_gradient_aborts():
    params = {"w": tc.parameter([1.0])}
    params["w"].grad = np.array([np.nan])
    with pytest.raises(TrainingError):
        adamw_step(params, AdamWState.zeros(params), lr=0.1)
    np.testing.assert_array_equal(params["w"].data, [1.0])


def test_clip_grad_norm():
    params = {"a": tc.parameter([0.0, 0.0]), "b": tc.parameter([0.0])}
    params["a"].grad = np.array([3.0, 0.0])
    params["b"].grad = np.array([4.0])
    assert clip_grad_norm(params, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(params["a"].grad, [0.6, 0.0])
    np.testing.assert_allclose(params["b"].grad, [0.8])


def test_optimizer_state_round_trip():
    params = {"w": tc.parameter([1.0, 2.0])}
    params["w"].grad = np.array([1.0, 1.0])
    state = adamw_step(params, AdamWState.zeros(params), lr=0.1)
    restored = AdamWState.from_dict(state.to_dict())
    assert restored.step == 1
    np.testing.assert_array_equal(restored.m["w"], state.m["w"])


# ==============================================================================
# SPLITS / METRICS
# ==============================================================================

def test_kfold_partitions_dataset():
    folds = kfold_split(10, k=3, seed=1)
    tests = [test for _, test in folds]
    assert sorted(len(t) for t in tests) == [3, 3, 4]
    assert sorted(np.concatenate(tests).tolist()) == list(range(10))
    for train_idx, test_idx in folds:
        assert not set(train_idx) & set(test_idx)
        assert len(train_idx) + len(test_idx) == 10


def test_kfold_is_seeded():
    a, b = kfold_split(20, 4, seed=3), kfold_split(20, 4, seed=3)
    for (ta, sa), (tb, sb) in zip(a, b):
        np.testing.assert_array_equal(sa, sb)
    with pytest.raises(ContractError):
        kfold_split(3, 5)
    with pytest.raises(ContractError):
        kfold_split(3, 1)


def test_ratio_split():
    train_idx, val_idx, test_idx = split_dataset(10, (0.8, 0.1, 0.1), seed=0)
    assert (len(train_idx), len(val_idx), len(test_idx)) == (8, 1, 1)
    assert sorted(np.concatenate([train_idx, val_idx, test_idx]).tolist()) == list(range(10))


def test_metrics_values():
    out = metrics([1.0, 2.0], [0.0, 4.0], n_atoms=[1, 2],
                  pred_forces=np.ones((3, 3)), label_forces=np.zeros((3, 3)))
    assert out["mae_energy"] == pytest.approx(1.5)
    assert out["rmse_energy"] == pytest.approx(math.sqrt(2.5))
    assert out["mae_energy_per_atom"] == pytest.approx(1.0)
    assert out["mae_forces"] == pytest.approx(1.0)
    with pytest.raises(ContractError):
        metrics([1.0], [1.0, 2.0])


def test_reference_energies_from_composition():
    structures = [
        AtomicStructure(np.zeros((2, 3)) + [[0, 0, 0], [1, 0, 0]], [1, 1], energy=-2.0),
        AtomicStructure(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]]), [8, 1, 1], energy=-5.0),
        AtomicStructure(np.array([[0, 0, 0], [1, 0, 0]]), [8, 8], energy=-6.0),
    ]
    reference = fit_reference_energies(structures, z_max=8)
    assert reference[1] == pytest.approx(-1.0)
    assert reference[8] == pytest.approx(-3.0)
    assert reference[6] == 0.0


def test_force_loss_needs_force_labels(small_config, water):
    model = MLANet(small_config)
    labelled = AtomicStructure(water.positions, water.species, energy=-1.0)
    labels = BatchLabels.from_structures([labelled])
    assert labels.forces is None
    with pytest.raises(DataError):
        train_step(model, model.graph_for(labelled), labels, TrainConfig(), AdamWState.zeros(model.params), 1e-3)


def test_evaluate_reports_metrics(small_config, frames):
    result = evaluate(MLANet(small_config), frames, batch_size=4)
    assert result["n_structures"] == 6
    assert result["predictions"]["energy"].shape == (6,)
    assert result["predictions"]["forces"].shape == (18, 3)
    assert {"mae_energy", "mae_energy_per_atom", "mae_forces"} <= set(result["metrics"])


# ==============================================================================
# EPOCH LOOP
# ==============================================================================

def test_training_reduces_loss(small_config, frames, tmp_path):
    config = TrainConfig(learning_rate=5e-3, batch_size=6, epochs=30, weight_decay=0.0,
                         loss=LossWeights(energy=1.0, forces=10.0))
    result = train(MLANet(small_config), frames, frames[:2], config, output_dir=str(tmp_path))
    losses = [record["train_loss"] for record in result.history]
    assert len(losses) == 30
    assert losses[-1] < losses[0]
    assert all(math.isfinite(value) for value in losses)

    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == list(range(30))
    assert os.path.exists(tmp_path / "checkpoint.ckpt")
    assert os.path.exists(tmp_path / "best.ckpt")


def test_resume_matches_uninterrupted_run(small_config, frames, tmp_path):
    def config(epochs):
        return TrainConfig(learning_rate=2e-3, batch_size=4, epochs=epochs, t_max=8, seed=5)

    straight = MLANet(small_config)
    train(straight, frames, config=config(4))

    first = MLANet(small_config)
    train(first, frames, config=config(2), output_dir=str(tmp_path))
    resumed = MLANet(small_config)
    result = train(resumed, frames, config=config(4), output_dir=str(tmp_path),
                   resume=str(tmp_path / "checkpoint.ckpt"))

    assert [record["epoch"] for record in result.history] == [0, 1, 2, 3]
    for name, p in straight.params.items():
        np.testing.assert_array_equal(resumed.params[name].data, p.data)
    ckpt = load_checkpoint(str(tmp_path / "checkpoint.ckpt"))
    assert ckpt.rng_state == {"seed": 5, "next_epoch": 4}
    assert ckpt.optimizer_state["step"] == 8


def test_early_stopping(small_config, frames):
    config = TrainConfig(epochs=10, batch_size=6, early_stopping_patience=0)
    result = train(MLANet(small_config), frames, frames[:2], config)
    assert result.stopped_early
    assert len(result.history) == 1
    assert result.best_epoch == 0


def test_empty_training_set(small_config):
    with pytest.raises(ContractError):
        train(MLANet(small_config), [])


def test_learning_curve_rows(small_config, tmp_path):
    dataset = molecule_dataset(12, seed=2)
    path = tmp_path / "curve.csv"
    rows = learning_curve(dataset, [2, 4], small_config, TrainConfig(epochs=1, batch_size=4), test_size=2,
                          output_path=str(path))
    assert [row["size"] for row in rows] == [2, 4]
    assert all(math.isfinite(row["mae_energy"]) for row in rows)
    assert path.read_text().splitlines()[0].startswith("size,mae_energy")
    with pytest.raises(ContractError):
        learning_curve(dataset, [11], small_config, TrainConfig(epochs=1), test_size=2)
