# modules/training.py

"""
Training Module

L1 energy/force(/stress) loss, AdamW with cosine annealing, dataset splits
(ratio splits and k-fold cross-validation), metrics, the epoch loop with
bit-exact resume, and the learning-curve driver.
"""

import logging
import math
import os
import time
import traceback
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules import tensor_core as tc
from modules.atomic_graph import AtomGraph, AtomicStructure, build_graphs, collate
from modules.checkpoint import load_checkpoint, save_checkpoint
from modules.config import LossWeights, ModelConfig, TrainConfig
from modules.errors import ContractError, DataError, TrainingError
from modules.file_utils import append_jsonl, write_csv
from modules.memory_monitor import MemoryMonitor
from modules.mlanet_model import MLANet, ModelOutput

LOG = logging.getLogger(__name__)

EV_TO_KCAL_MOL = 23.0605
EV_TO_MEV = 1000.0

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


# ==============================================================================
# UNITS
# ==============================================================================

def ev_to_kcal_mol(value):
    return value * EV_TO_KCAL_MOL


def ev_to_mev(value):
    return value * EV_TO_MEV


# ==============================================================================
# LABELS AND LOSS
# ==============================================================================

@dataclass
class BatchLabels:
    energy: Optional[np.ndarray]   # [B] eV
    forces: Optional[np.ndarray]   # [N, 3] eV/Å
    stress: Optional[np.ndarray]   # [B, 6]
    n_atoms: np.ndarray            # [B]

    @classmethod
    def from_structures(cls, structures: Sequence[AtomicStructure]) -> "BatchLabels":
        energy = forces = stress = None
        if all(s.energy is not None for s in structures):
            energy = np.array([s.energy for s in structures])
        if all(s.forces is not None for s in structures):
            forces = np.concatenate([s.forces for s in structures], axis=0)
        if all(s.stress is not None for s in structures):
            stress = np.stack([s.stress for s in structures])
        return cls(energy=energy, forces=forces, stress=stress,
                   n_atoms=np.array([s.n_atoms for s in structures], dtype=np.int64))


def loss(pred: ModelOutput, labels: BatchLabels, weights: LossWeights) -> Tuple[tc.Tensor, Dict[str, float]]:
    """
    L = λ_E·mean_B|E - Ê| + λ_F·mean_{3N}|F - F̂| (+ λ_σ·mean_{6B}|σ - σ̂|).

    Returns the scalar loss and the unweighted term values.
    """
    terms: List[tc.Tensor] = []
    parts: Dict[str, float] = {}

    if weights.energy > 0:
        if labels.energy is None:
            raise DataError("energy loss weight is nonzero but the batch has no energy labels")
        energy_term = tc.absolute(pred.energy - tc.constant(labels.energy)).mean()
        parts["energy"] = energy_term.item()
        terms.append(energy_term * weights.energy)

    if weights.forces > 0:
        if labels.forces is None:
            raise DataError("force loss weight is nonzero but the batch has no force labels")
        force_term = tc.absolute(pred.forces - tc.constant(labels.forces)).mean()
        parts["forces"] = force_term.item()
        terms.append(force_term * weights.forces)

    if weights.stress > 0:
        if labels.stress is None or pred.stress is None:
            raise DataError("stress loss weight is nonzero but stress labels or the stress head are missing")
        stress_term = tc.absolute(pred.stress - tc.constant(labels.stress)).mean()
        parts["stress"] = stress_term.item()
        terms.append(stress_term * weights.stress)

    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total, parts


# ==============================================================================
# OPTIMIZER AND SCHEDULE
# ==============================================================================

@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: Dict[str, tc.Tensor]) -> "AdamWState":
        return cls(step=0,
                   m={name: np.zeros_like(p.data) for name, p in params.items()},
                   v={name: np.zeros_like(p.data) for name, p in params.items()})

    def to_dict(self) -> Dict[str, Any]:
        return {"step": self.step, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AdamWState":
        return cls(step=int(data["step"]),
                   m={k: np.array(v) for k, v in data["m"].items()},
                   v={k: np.array(v) for k, v in data["v"].items()})


def adamw_step(params: Dict[str, tc.Tensor], state: AdamWState, lr: float,
               betas: Tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS,
               weight_decay: float = 0.0) -> AdamWState:
    """Decoupled weight decay, then a bias-corrected Adam update. Mutates params and state."""
    beta1, beta2 = betas
    for name, p in params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")

    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * grad
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        if weight_decay:
            p.data = p.data * (1.0 - lr * weight_decay)
        p.data = p.data - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


def cosine_lr(step: int, t_max: int, lr_max: float, lr_min: float = 0.0) -> float:
    if not 0 <= step <= t_max:
        raise ContractError(f"cosine_lr: step {step} outside [0, {t_max}]")
    if t_max == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / t_max))


def clip_grad_norm(params: Dict[str, tc.Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# ==============================================================================
# SPLITS
# ==============================================================================

def _size(dataset) -> int:
    return dataset if isinstance(dataset, (int, np.integer)) else len(dataset)


def kfold_split(dataset, k: int = 10, seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """k (train, test) index pairs; test folds partition the dataset and differ in size by at most one."""
    n = _size(dataset)
    if k < 2:
        raise ContractError(f"kfold_split needs k >= 2, got {k}")
    if k > n:
        raise ContractError(f"kfold_split: k={k} exceeds dataset size {n}")
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, k)
    out = []
    for i, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train), np.sort(test)))

    covered = np.concatenate([test for _, test in out])
    if covered.size != n or np.unique(covered).size != n:
        raise ContractError("kfold_split produced overlapping or incomplete test folds")
    return out


def split_dataset(dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded (train, val, test) split; rounding leftovers go to train."""
    n = _size(dataset)
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or ratios.sum() <= 0:
        raise ContractError(f"split_dataset needs three non-negative ratios, got {ratios.tolist()}")
    ratios = ratios / ratios.sum()
    n_val = int(math.floor(ratios[1] * n))
    n_test = int(math.floor(ratios[2] * n))
    order = np.random.default_rng(seed).permutation(n)
    test = order[:n_test]
    val = order[n_test:n_test + n_val]
    train = order[n_test + n_val:]
    return np.sort(train), np.sort(val), np.sort(test)


# ==============================================================================
# METRICS
# ==============================================================================

def metrics(pred_energy: np.ndarray, label_energy: np.ndarray, n_atoms: Optional[np.ndarray] = None,
            pred_forces: Optional[np.ndarray] = None, label_forces: Optional[np.ndarray] = None) -> Dict[str, float]:
    """MAE/RMSE in eV, eV/atom and eV/Å."""
    pred_energy = np.asarray(pred_energy, dtype=np.float64).reshape(-1)
    label_energy = np.asarray(label_energy, dtype=np.float64).reshape(-1)
    if pred_energy.shape != label_energy.shape:
        raise ContractError(f"metrics: {pred_energy.size} energy predictions for {label_energy.size} labels")

    err = pred_energy - label_energy
    out = {
        "mae_energy": float(np.mean(np.abs(err))) if err.size else 0.0,
        "rmse_energy": float(np.sqrt(np.mean(err * err))) if err.size else 0.0,
    }
    if n_atoms is not None:
        n_atoms = np.asarray(n_atoms, dtype=np.float64).reshape(-1)
        if n_atoms.shape != err.shape:
            raise ContractError(f"metrics: {n_atoms.size} atom counts for {err.size} structures")
        per_atom = err / n_atoms
        out["mae_energy_per_atom"] = float(np.mean(np.abs(per_atom))) if err.size else 0.0
        out["rmse_energy_per_atom"] = float(np.sqrt(np.mean(per_atom * per_atom))) if err.size else 0.0
    if pred_forces is not None and label_forces is not None:
        pred_forces = np.asarray(pred_forces, dtype=np.float64)
        label_forces = np.asarray(label_forces, dtype=np.float64)
        if pred_forces.shape != label_forces.shape:
            raise ContractError(f"metrics: force shapes {pred_forces.shape} and {label_forces.shape} differ")
        ferr = pred_forces - label_forces
        out["mae_forces"] = float(np.mean(np.abs(ferr))) if ferr.size else 0.0
        out["rmse_forces"] = float(np.sqrt(np.mean(ferr * ferr))) if ferr.size else 0.0
    return out


def fit_reference_energies(structures: Sequence[AtomicStructure], z_max: int) -> np.ndarray:
    """Least-squares per-species energies E0[z] from composition counts; zeros without labels."""
    labelled = [s for s in structures if s.energy is not None]
    reference = np.zeros(z_max + 1)
    if not labelled:
        return reference
    counts = np.zeros((len(labelled), z_max + 1))
    for row, s in enumerate(labelled):
        counts[row] = np.bincount(s.species, minlength=z_max + 1)[:z_max + 1]
    present = np.flatnonzero(counts.sum(axis=0))
    energies = np.array([s.energy for s in labelled])
    solution, *_ = np.linalg.lstsq(counts[:, present], energies, rcond=None)
    reference[present] = solution
    LOG.info(f"Reference energies fitted for species {present.tolist()}")
    return reference


# ==============================================================================
# EVALUATION
# ==============================================================================

def predict_graphs(model: MLANet, graphs: Sequence[AtomGraph], batch_size: int = 32) -> Dict[str, np.ndarray]:
    energies, forces, stresses = [], [], []
    with tc.no_grad():
        for start in range(0, len(graphs), batch_size):
            out = model.forward(collate(graphs[start:start + batch_size]))
            energies.append(out.energy.data.copy())
            forces.append(out.forces.data.copy())
            if out.stress is not None:
                stresses.append(out.stress.data.copy())
    result = {"energy": np.concatenate(energies), "forces": np.concatenate(forces, axis=0)}
    if stresses:
        result["stress"] = np.concatenate(stresses, axis=0)
    return result


def evaluate(model: MLANet, structures: Sequence[AtomicStructure], batch_size: int = 32,
             graphs: Optional[Sequence[AtomGraph]] = None) -> Dict[str, Any]:
    """Batched inference plus metrics against whatever labels the structures carry."""
    if not structures:
        raise ContractError("evaluate needs at least one structure")
    c = model.config
    if graphs is None:
        graphs = build_graphs(structures, c.r_cut, c.n_rbf, c.long_range, c.charge)
    pred = predict_graphs(model, graphs, batch_size)
    labels = BatchLabels.from_structures(structures)
    result: Dict[str, Any] = {"predictions": pred, "n_structures": len(structures)}
    if labels.energy is not None:
        result["metrics"] = metrics(pred["energy"], labels.energy, labels.n_atoms,
                                    pred["forces"] if labels.forces is not None else None, labels.forces)
    elif labels.forces is not None:
        ferr = pred["forces"] - labels.forces
        result["metrics"] = {"mae_forces": float(np.mean(np.abs(ferr))),
                             "rmse_forces": float(np.sqrt(np.mean(ferr * ferr)))}
    return result


# ==============================================================================
# TRAINING LOOP
# ==============================================================================

@dataclass
class TrainResult:
    history: List[Dict[str, Any]]
    best_val_loss: Optional[float]
    best_epoch: Optional[int]
    final_train_loss: float
    checkpoint_path: Optional[str]
    seconds_per_epoch: float
    peak_rss_mb: float
    stopped_early: bool = False


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle for one epoch; depends only on (seed, epoch) so resumed runs see the same order."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_step(model: MLANet, graph: AtomGraph, labels: BatchLabels, config: TrainConfig,
               state: AdamWState, lr: float) -> Tuple[float, Dict[str, float]]:
    """One forward/backward/update on a collated batch; returns the loss value and its terms."""
    model.zero_grad()
    with tc.Tape():
        out = model.forward(graph)
        total, parts = loss(out, labels, config.loss)
        total.backward()
    if config.grad_clip is not None:
        clip_grad_norm(model.params, config.grad_clip)
    adamw_step(model.params, state, lr, weight_decay=config.weight_decay)
    model.zero_grad()
    return total.item(), parts


def _batch_loss(model: MLANet, graphs: Sequence[AtomGraph], structures: Sequence[AtomicStructure],
                weights: LossWeights, batch_size: int) -> float:
    total, count = 0.0, 0
    with tc.no_grad():
        for start in range(0, len(graphs), batch_size):
            chunk = structures[start:start + batch_size]
            out = model.forward(collate(graphs[start:start + batch_size]))
            value, _ = loss(out, BatchLabels.from_structures(chunk), weights)
            total += value.item() * len(chunk)
            count += len(chunk)
    return total / max(count, 1)


def train(model: MLANet, train_set: Sequence[AtomicStructure], val_set: Sequence[AtomicStructure] = (),
          config: Optional[TrainConfig] = None, output_dir: Optional[str] = None,
          resume: Optional[str] = None) -> TrainResult:
    """
    Epoch loop: seeded shuffle, cosine schedule per optimizer step, AdamW, per-epoch
    JSONL log and checkpoint. `resume` names a checkpoint written by an earlier call;
    training continues from the epoch after it with identical arithmetic.
    """
    config = config or TrainConfig()
    if not train_set:
        raise ContractError("train needs at least one training structure")

    c = model.config
    train_graphs = build_graphs(train_set, c.r_cut, c.n_rbf, c.long_range, c.charge)
    val_graphs = build_graphs(val_set, c.r_cut, c.n_rbf, c.long_range, c.charge) if val_set else []

    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size)
    t_max = config.t_max or config.epochs * steps_per_epoch

    state = AdamWState.zeros(model.params)
    history: List[Dict[str, Any]] = []
    start_epoch = 0
    best_val, best_epoch, stale = None, None, 0

    if resume is not None:
        ckpt = load_checkpoint(resume, expected_config=model.config)
        model.load_state_dict(ckpt.model.state_dict())
        model.set_reference_energies(ckpt.model.reference_energies)
        if ckpt.optimizer_state is not None:
            state = AdamWState.from_dict(ckpt.optimizer_state)
        progress = ckpt.train_state or {}
        start_epoch = int(progress.get("epoch", -1)) + 1
        history = list(progress.get("history", []))
        best_val = progress.get("best_val_loss")
        best_epoch = progress.get("best_epoch")
        stale = int(progress.get("stale_epochs", 0))
        LOG.info(f"Resuming from {resume} at epoch {start_epoch} (optimizer step {state.step})")
    elif config.fit_reference_energies:
        model.set_reference_energies(fit_reference_energies(train_set, c.z_max))

    log_path = ckpt_path = best_path = None
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        log_path = os.path.join(output_dir, "train_log.jsonl")
        ckpt_path = os.path.join(output_dir, "checkpoint.ckpt")
        best_path = os.path.join(output_dir, "best.ckpt")

    monitor = MemoryMonitor()
    monitor.start_monitoring()
    epoch_seconds: List[float] = []
    stopped_early = False
    train_loss = float("nan")

    LOG.info(f"Training {model.num_parameters()} parameters on {n} structures "
             f"({steps_per_epoch} steps/epoch, epochs {start_epoch}..{config.epochs - 1})")

    for epoch in range(start_epoch, config.epochs):
        started = time.perf_counter()
        monitor.reset_window()
        order = epoch_order(n, config.seed, epoch)
        running, seen = 0.0, 0
        lr = config.learning_rate

        try:
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                graph = collate([train_graphs[i] for i in idx])
                labels = BatchLabels.from_structures([train_set[i] for i in idx])
                lr = cosine_lr(min(state.step, t_max), t_max, config.learning_rate, config.lr_min)
                value, _ = train_step(model, graph, labels, config, state, lr)
                running += value * len(idx)
                seen += len(idx)
                monitor.sample()
        except TrainingError:
            LOG.error(f"❌ Training failed at epoch {epoch}, step {state.step}")
            LOG.error(traceback.format_exc())
            raise

        train_loss = running / seen
        record: Dict[str, Any] = {"epoch": epoch, "train_loss": train_loss, "lr": lr, "step": state.step}
        if val_graphs:
            val_loss = _batch_loss(model, val_graphs, val_set, config.loss, config.batch_size)
            record["val_loss"] = val_loss
            if best_val is None or val_loss < best_val:
                best_val, best_epoch, stale = val_loss, epoch, 0
                if best_path:
                    save_checkpoint(best_path, model)
            else:
                stale += 1

        seconds = time.perf_counter() - started
        epoch_seconds.append(seconds)
        record["seconds"] = seconds
        record["peak_rss_mb"] = monitor.window_peak_mb()
        history.append(record)
        if log_path:
            append_jsonl(log_path, record)
        LOG.info(f"Epoch {epoch}: train={train_loss:.6g}" +
                 (f" val={record['val_loss']:.6g}" if "val_loss" in record else "") +
                 f" lr={lr:.3g} ({seconds:.2f}s)")

        if ckpt_path and ((epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1):
            save_checkpoint(ckpt_path, model, optimizer_state=state.to_dict(),
                            train_state={"epoch": epoch, "history": history, "best_val_loss": best_val,
                                         "best_epoch": best_epoch, "stale_epochs": stale},
                            rng_state={"seed": config.seed, "next_epoch": epoch + 1})

        if config.early_stopping_patience is not None and stale >= config.early_stopping_patience:
            LOG.info(f"⚠️ Early stopping at epoch {epoch} (no val improvement for {stale} epochs)")
            stopped_early = True
            break

    monitor.stop_monitoring()
    mean_seconds = float(np.mean(epoch_seconds)) if epoch_seconds else 0.0
    LOG.info(f"✅ Training finished: final train loss {train_loss:.6g}, {mean_seconds:.2f}s/epoch")
    return TrainResult(history=history, best_val_loss=best_val, best_epoch=best_epoch,
                       final_train_loss=train_loss, checkpoint_path=ckpt_path,
                       seconds_per_epoch=mean_seconds, peak_rss_mb=monitor.peak_mb,
                       stopped_early=stopped_early)


# ==============================================================================
# LEARNING CURVE
# ==============================================================================

LEARNING_CURVE_HEADER = ["size", "mae_energy", "mae_energy_per_atom", "mae_forces", "seconds_per_epoch", "peak_rss_mb"]


def learning_curve(dataset: Sequence[AtomicStructure], sizes: Sequence[int], model_config: ModelConfig,
                   train_config: TrainConfig, test_size: Optional[int] = None, seed: int = 0,
                   output_path: Optional[str] = None) -> List[Dict[str, float]]:
    """
    One fresh model per training size on nested seeded subsets, all scored on the same test set.
    """
    n = len(dataset)
    test_size = test_size if test_size is not None else max(1, n // 10)
    order = np.random.default_rng(seed).permutation(n)
    test_idx, pool = order[:test_size], order[test_size:]
    if max(sizes) > pool.size:
        raise ContractError(f"learning_curve: size {max(sizes)} exceeds the {pool.size} non-test structures")

    test_set = [dataset[i] for i in test_idx]
    rows = []
    for size in sizes:
        subset = [dataset[i] for i in pool[:size]]
        model = MLANet(model_config)
        result = train(model, subset, config=train_config)
        scores = evaluate(model, test_set, train_config.batch_size).get("metrics", {})
        row = {
            "size": int(size),
            "mae_energy": scores.get("mae_energy", float("nan")),
            "mae_energy_per_atom": scores.get("mae_energy_per_atom", float("nan")),
            "mae_forces": scores.get("mae_forces", float("nan")),
            "seconds_per_epoch": result.seconds_per_epoch,
            "peak_rss_mb": result.peak_rss_mb,
        }
        rows.append(row)
        LOG.info(f"Learning curve: size={size} MAE_E={row['mae_energy']:.5g} eV ({row['seconds_per_epoch']:.2f}s/epoch)")

    if output_path:
        write_csv(output_path, LEARNING_CURVE_HEADER, [[row[key] for key in LEARNING_CURVE_HEADER] for row in rows])
    return rows
