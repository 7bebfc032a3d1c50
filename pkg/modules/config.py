# modules/config.py

"""
Configuration Module

Dataclass configs for the model, training, MD and data sections of a run,
strict JSON loading (unknown keys abort before any work starts) and the
per-dataset presets for the published architectures and training setups.
"""

import copy
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from modules.errors import ConfigurationError
from modules.irreps import SCALAR, VECTOR, IrrepsSpec

LOG = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "MLANET_OUTPUT_DIR"
LOG_LEVEL_ENV = "MLANET_LOG_LEVEL"
NUM_WORKERS_ENV = "MLANET_NUM_WORKERS"


# ==============================================================================
# SECTIONS
# ==============================================================================

@dataclass
class ModelConfig:
    hidden_irreps: str = "8x0e+4x1o"
    l_max: Optional[int] = None
    n_layers_energy: int = 1
    n_layers_force: int = 1
    n_mlp_layers: int = 1
    r_cut: float = 5.0
    n_rbf: int = 8
    n_heads: int = 1
    temperature: Optional[float] = None
    activation: str = "silu"
    embed_dim: int = 8
    mlp_hidden: int = 16
    species: List[int] = field(default_factory=lambda: [1, 6, 7, 8])
    long_range: bool = False
    charge: bool = False
    stress: bool = False
    tp_path_lmax: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        spec = self.hidden_spec
        if self.l_max is None:
            self.l_max = spec.lmax
        if self.l_max != spec.lmax:
            raise ConfigurationError(f"l_max={self.l_max} but hidden_irreps '{spec}' tops out at l={spec.lmax}")
        if spec.count(SCALAR) == 0:
            raise ConfigurationError(f"hidden_irreps '{spec}' needs a 0e entry for the heads")
        if spec.count(VECTOR) == 0:
            raise ConfigurationError(f"hidden_irreps '{spec}' needs a 1o entry for the force head")
        if self.activation.lower() != "silu":
            raise ConfigurationError(f"activation is fixed to SiLU, got '{self.activation}'")
        if not 1 <= self.n_heads <= 8:
            raise ConfigurationError(f"n_heads must be in 1..8, got {self.n_heads}")
        for mult, ir in spec:
            if mult % self.n_heads:
                raise ConfigurationError(f"multiplicity {mult} of {ir} is not divisible by n_heads={self.n_heads}")
        if self.n_layers_energy < 0 or self.n_layers_force < 0 or self.n_mlp_layers < 0:
            raise ConfigurationError("layer counts must be non-negative")
        if self.r_cut <= 0 or self.n_rbf < 1 or self.embed_dim < 1:
            raise ConfigurationError(f"invalid r_cut={self.r_cut} / n_rbf={self.n_rbf} / embed_dim={self.embed_dim}")
        if not self.species or min(self.species) < 1:
            raise ConfigurationError(f"species must be a non-empty list of atomic numbers, got {self.species}")
        self.species = sorted(set(int(z) for z in self.species))

    @property
    def hidden_spec(self) -> IrrepsSpec:
        return IrrepsSpec.parse(self.hidden_irreps)

    @property
    def z_max(self) -> int:
        return max(self.species)

    @property
    def n_extra_scalars(self) -> int:
        return int(self.long_range) + int(self.charge)


@dataclass
class LossWeights:
    energy: float = 1.0
    forces: float = 1000.0
    stress: float = 0.0

    def __post_init__(self):
        if min(self.energy, self.forces, self.stress) < 0:
            raise ConfigurationError(f"loss weights must be non-negative, got {self}")
        if self.energy == 0 and self.forces == 0:
            raise ConfigurationError("energy and force loss weights cannot both be zero")


@dataclass
class TrainConfig:
    learning_rate: float = 4e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    lr_min: float = 0.0
    t_max: Optional[int] = None
    loss: LossWeights = field(default_factory=LossWeights)
    grad_clip: Optional[float] = None
    early_stopping_patience: Optional[int] = None
    fit_reference_energies: bool = True
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError(f"batch_size and epochs must be >= 1, got {self.batch_size} / {self.epochs}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigurationError(f"invalid learning_rate={self.learning_rate} / weight_decay={self.weight_decay}")


@dataclass
class MDConfig:
    dt: float = 0.5
    steps: int = 1000
    temperature: Optional[float] = None
    friction: float = 0.01
    seed: int = 0
    write_every: int = 10
    min_distance: float = 0.5
    bond_factor: float = 2.0
    drift_factor: float = 10.0

    def __post_init__(self):
        if self.dt <= 0 or self.steps < 0 or self.write_every < 1:
            raise ConfigurationError(f"invalid dt={self.dt} / steps={self.steps} / write_every={self.write_every}")
        if self.friction < 0 or (self.temperature is not None and self.temperature < 0):
            raise ConfigurationError(f"invalid friction={self.friction} / temperature={self.temperature}")


@dataclass
class DataConfig:
    train_path: str = "data/toy_molecules.extxyz"
    test_path: Optional[str] = None
    split: List[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    n_folds: int = 10
    fold: Optional[int] = None
    limit: Optional[int] = None

    def __post_init__(self):
        if len(self.split) != 3 or min(self.split) < 0 or sum(self.split) <= 0:
            raise ConfigurationError(f"split needs three non-negative ratios, got {self.split}")
        if self.fold is not None and not 0 <= self.fold < self.n_folds:
            raise ConfigurationError(f"fold {self.fold} outside 0..{self.n_folds - 1}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    md: MDConfig = field(default_factory=MDConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "output"
    preset: Optional[str] = None

    def resolved_output_dir(self) -> str:
        return os.getenv(OUTPUT_DIR_ENV) or self.output_dir

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


# ==============================================================================
# STRICT LOADING
# ==============================================================================

_NESTED = {
    "model": ModelConfig,
    "train": TrainConfig,
    "md": MDConfig,
    "data": DataConfig,
    "loss": LossWeights,
}


def from_dict(cls, data: Dict[str, Any], where: str = ""):
    """Build dataclass `cls` from `data`, rejecting any key it does not declare."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or cls.__name__}: expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown config key(s) in {where or cls.__name__}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        nested = _NESTED.get(name)
        if nested is not None:
            value = from_dict(nested, value, f"{where}.{name}" if where else name)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"{where or cls.__name__}: {e}")


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def run_config_from_dict(data: Dict[str, Any]) -> RunConfig:
    preset = data.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset '{preset}'; known: {sorted(PRESETS)}")
        data = _merge(PRESETS[preset], data)
    return from_dict(RunConfig, data)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}")
    config = run_config_from_dict(data)
    LOG.info(f"✅ Loaded config {path} (preset={config.preset}, hidden={config.model.hidden_irreps})")
    return config


def preset_config(name: str, **overrides) -> RunConfig:
    data = {"preset": name}
    data.update(overrides)
    return run_config_from_dict(data)


# ==============================================================================
# PRESETS
# ==============================================================================

_WIDE = "128x0e+64x1o+32x2e+32x3o"


def _preset(hidden: str, l_e: int, l_f: int, l_mlp: int, r_cut: float, species: List[int],
            lr: float, batch: int, ratio: Tuple[float, float], **model_flags) -> Dict[str, Any]:
    model = {
        "hidden_irreps": hidden,
        "n_layers_energy": l_e,
        "n_layers_force": l_f,
        "n_mlp_layers": l_mlp,
        "r_cut": r_cut,
        "species": species,
        "embed_dim": 64,
        "mlp_hidden": 128,
    }
    model.update(model_flags)
    loss = {"energy": ratio[0], "forces": ratio[1]}
    if model_flags.get("stress"):
        loss["stress"] = 100.0
    return {
        "model": model,
        "train": {"learning_rate": lr, "batch_size": batch, "loss": loss},
    }


PRESETS: Dict[str, Dict[str, Any]] = {
    "qm7": _preset("128x0e+64x1o", 1, 0, 1, 5.0, [1, 6, 7, 8, 16], 4e-4, 128, (1.0, 0.0)),
    "qm9": _preset("128x0e+64x1o", 1, 0, 1, 6.0, [1, 6, 7, 8, 9], 4e-4, 128, (1.0, 0.0)),
    "md17": _preset(_WIDE, 1, 4, 1, 6.0, [1, 6, 7, 8], 4e-4, 128, (0.0, 1000.0)),
    # The dynamic-cutoff mode is not supported; a fixed 5.0 Å cutoff stands in
    "mptrj_li": _preset("128x0e+128x1o+128x2e+32x3o", 1, 2, 4, 5.0, list(range(1, 90)),
                        2e-3, 200, (1.0, 1000.0), stress=True),
    "sio2": _preset(_WIDE, 1, 0, 4, 5.0, [8, 14], 4e-4, 32, (1.0, 1000.0)),
    "gesbte": _preset(_WIDE, 1, 0, 4, 5.0, [32, 51, 52], 4e-4, 32, (1.0, 1000.0)),
    "phosphorus": _preset(_WIDE, 1, 0, 4, 5.0, [15], 4e-4, 32, (1.0, 1000.0), long_range=True),
    "bilayer_graphene": _preset(_WIDE, 1, 0, 4, 5.0, [6], 4e-4, 32, (1.0, 1000.0)),
    "formate": _preset(_WIDE, 1, 2, 4, 5.0, [1, 6, 8, 29], 4e-4, 32, (1.0, 1000.0)),
    "water": _preset(_WIDE, 1, 2, 4, 5.0, [1, 8], 4e-4, 16, (1.0, 1000.0)),
    "c10h2": _preset(_WIDE, 1, 2, 4, 4.23, [1, 6], 4e-4, 128, (1.0, 1000.0), charge=True),
    "ag3": _preset(_WIDE, 1, 2, 4, 5.29, [47], 4e-4, 128, (1.0, 1000.0), charge=True),
    "na8cl8": _preset(_WIDE, 1, 2, 4, 5.29, [11, 17], 4e-4, 128, (1.0, 1000.0), charge=True),
}

PRESETS["qm7"]["data"] = {"n_folds": 10}
PRESETS["water"]["data"] = {"split": [0.9, 0.05, 0.05]}
for _charged in ("c10h2", "ag3", "na8cl8"):
    PRESETS[_charged]["data"] = {"split": [0.9, 0.1, 0.0]}
