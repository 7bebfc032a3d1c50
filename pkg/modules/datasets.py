# modules/datasets.py

"""
Datasets Module

Structure builders (diamond-density supercells, small molecule templates,
random clusters) and synthetic datasets labelled with an exact Morse pair
potential, so energies and forces are consistent to machine precision.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.atomic_graph import AtomicStructure, minimum_image
from modules.errors import ConfigurationError, DataError

LOG = logging.getLogger(__name__)

# Simple-cubic carbon at diamond's atomic density (8 atoms per 3.567 Å cube)
DIAMOND_SC_EDGE = 3.567 / 2.0

COVALENT_RADII = {1: 0.31, 6: 0.76, 7: 0.71, 8: 0.66}
SPECIES_OFFSETS = {1: -0.45, 6: -1.10, 7: -1.25, 8: -1.60}

MOLECULES: Dict[str, Tuple[List[int], List[List[float]]]] = {
    "water": ([8, 1, 1], [[0.0, 0.0, 0.0], [0.757, 0.586, 0.0], [-0.757, 0.586, 0.0]]),
    "methane": ([6, 1, 1, 1, 1], [[0.0, 0.0, 0.0], [0.629, 0.629, 0.629], [-0.629, -0.629, 0.629],
                                  [-0.629, 0.629, -0.629], [0.629, -0.629, -0.629]]),
    "ammonia": ([7, 1, 1, 1], [[0.0, 0.0, 0.0], [0.94, 0.0, -0.33], [-0.47, 0.814, -0.33],
                               [-0.47, -0.814, -0.33]]),
    "formaldehyde": ([6, 8, 1, 1], [[0.0, 0.0, 0.0], [0.0, 0.0, 1.21], [0.94, 0.0, -0.59], [-0.94, 0.0, -0.59]]),
    "methanol": ([6, 8, 1, 1, 1, 1], [[0.0, 0.0, 0.0], [1.43, 0.0, 0.0], [1.75, 0.9, 0.0], [-0.36, 1.03, 0.0],
                                      [-0.36, -0.51, 0.89], [-0.36, -0.51, -0.89]]),
}


# ==============================================================================
# BUILDERS
# ==============================================================================

def molecule(name: str) -> AtomicStructure:
    if name not in MOLECULES:
        raise DataError(f"unknown molecule '{name}' (known: {sorted(MOLECULES)})")
    species, positions = MOLECULES[name]
    return AtomicStructure(positions=np.array(positions), species=np.array(species))


def replicate(s: AtomicStructure, reps: Sequence[int]) -> AtomicStructure:
    """Supercell of a periodic structure, `reps` copies along each cell vector."""
    if s.cell is None:
        raise DataError("replicate needs a structure with a cell")
    if len(reps) != 3 or min(reps) < 1:
        raise DataError(f"reps must be three positive integers, got {list(reps)}")
    shifts = np.array([[i, j, k] for i in range(reps[0]) for j in range(reps[1]) for k in range(reps[2])])
    offsets = shifts @ s.cell
    positions = (s.positions[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
    species = np.tile(s.species, len(shifts))
    return AtomicStructure(positions=positions, species=species, cell=s.cell * np.asarray(reps)[:, None],
                           pbc=s.pbc)


def diamond_supercell(n: int, edge: float = DIAMOND_SC_EDGE) -> AtomicStructure:
    """n x n x n copies of a one-carbon cubic cell: 27, 64, 216, ... atoms."""
    if n < 1:
        raise DataError(f"supercell size must be >= 1, got {n}")
    unit = AtomicStructure(positions=np.zeros((1, 3)), species=np.array([6]), cell=np.eye(3) * edge,
                           pbc=(True, True, True))
    return replicate(unit, (n, n, n))


def random_cluster(rng: np.random.Generator, n_atoms: int, species: Sequence[int] = (1, 6, 7, 8),
                   periodic: bool = False, min_distance: float = 0.9, box: Optional[float] = None) -> AtomicStructure:
    """Random atoms at least `min_distance` apart; periodic cells get a mild shear."""
    box = box or max(2.5, 2.4 * n_atoms ** (1.0 / 3.0))
    cell = None
    if periodic:
        cell = np.diag([box, box, box]) + rng.uniform(-0.15, 0.15, (3, 3)) * box
    positions: List[np.ndarray] = []
    for _ in range(1000 * n_atoms):
        if len(positions) == n_atoms:
            break
        frac = rng.uniform(0.0, 1.0, 3)
        p = frac @ cell if cell is not None else frac * box
        if all(np.linalg.norm(p - q) >= min_distance for q in positions):
            positions.append(p)
    if len(positions) < n_atoms:
        raise DataError(f"could not place {n_atoms} atoms {min_distance} Å apart in a {box:.2f} Å box")
    return AtomicStructure(positions=np.array(positions), species=rng.choice(list(species), n_atoms),
                           cell=cell, pbc=(periodic,) * 3)


# ==============================================================================
# MORSE LABELS
# ==============================================================================

class MorsePotential:
    """
    E = sum_pairs D_ij [(1 - exp(-a (r - r0_ij)))^2 - 1] + sum_i E0(z_i).

    r0_ij is the sum of covalent radii; H-H pairs are bound `hh_scale` times more weakly.
    """

    def __init__(self, species: Sequence[int], depth: float = 1.0, width: float = 1.5, hh_scale: float = 0.2,
                 cell: Optional[np.ndarray] = None, pbc: Sequence[bool] = (False, False, False)):
        species = np.asarray(species, dtype=np.int64)
        unknown = sorted(set(species.tolist()) - set(COVALENT_RADII))
        if unknown:
            raise DataError(f"no Morse parameters for z={unknown[0]}")
        radii = np.array([COVALENT_RADII[int(z)] for z in species])
        self.r0 = radii[:, None] + radii[None, :]
        hydrogen = species == 1
        self.depth = np.where(hydrogen[:, None] & hydrogen[None, :], depth * hh_scale, depth)
        self.width = width
        self.offset = float(sum(SPECIES_OFFSETS[int(z)] for z in species))
        self.cell = cell
        self.pbc = tuple(pbc)

    def _terms(self, positions: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        disp = minimum_image(positions[None, :, :] - positions[:, None, :], self.cell, self.pbc)
        r = np.sqrt(np.sum(disp * disp, axis=-1))
        np.fill_diagonal(r, 1.0)
        decay = np.exp(-self.width * (r - self.r0))
        np.fill_diagonal(decay, 1.0)
        return disp, r, decay

    def energy(self, positions: np.ndarray) -> float:
        _, _, decay = self._terms(positions)
        pair = self.depth * ((1.0 - decay) ** 2 - 1.0)
        np.fill_diagonal(pair, 0.0)
        return float(0.5 * pair.sum() + self.offset)

    def __call__(self, positions: np.ndarray) -> np.ndarray:
        disp, r, decay = self._terms(positions)
        de_dr = 2.0 * self.depth * self.width * (1.0 - decay) * decay
        np.fill_diagonal(de_dr, 0.0)
        return np.sum((de_dr / r)[:, :, None] * disp, axis=1)


def label(s: AtomicStructure, **morse) -> AtomicStructure:
    """Copy of `s` with Morse energy and forces attached."""
    potential = MorsePotential(s.species, cell=s.cell, pbc=s.pbc, **morse)
    return AtomicStructure(positions=s.positions.copy(), species=s.species.copy(), cell=s.cell, pbc=s.pbc,
                           total_charge=s.total_charge, energy=potential.energy(s.positions),
                           forces=potential(s.positions), info=dict(s.info))


# ==============================================================================
# DATASETS
# ==============================================================================

def perturbed_frames(template: AtomicStructure, n_frames: int, amplitude: float = 0.05,
                     seed: int = 0) -> List[AtomicStructure]:
    """Gaussian-displaced copies of one molecule, Morse-labelled (an MD17-style set)."""
    if n_frames < 1 or amplitude < 0:
        raise ConfigurationError(f"invalid n_frames={n_frames} / amplitude={amplitude}")
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(n_frames):
        moved = template.with_positions(template.positions + rng.normal(0.0, amplitude, template.positions.shape))
        frames.append(label(moved))
    return frames


def molecule_dataset(n_samples: int, seed: int = 0, amplitude: float = 0.08) -> List[AtomicStructure]:
    """Perturbed copies of every template molecule in turn."""
    rng = np.random.default_rng(seed)
    names = sorted(MOLECULES)
    frames = []
    for k in range(n_samples):
        template = molecule(names[k % len(names)])
        moved = template.with_positions(template.positions + rng.normal(0.0, amplitude, template.positions.shape))
        frames.append(label(moved))
    LOG.info(f"✅ Generated {len(frames)} Morse-labelled molecules")
    return frames


def cluster_dataset(n_samples: int, seed: int = 0, n_atoms: Tuple[int, int] = (3, 8),
                    species: Sequence[int] = (1, 6, 7, 8)) -> List[AtomicStructure]:
    """Random non-periodic clusters with exact Morse labels, for learning-curve runs."""
    rng = np.random.default_rng(seed)
    frames = [label(random_cluster(rng, int(rng.integers(n_atoms[0], n_atoms[1] + 1)), species, min_distance=1.0))
              for _ in range(n_samples)]
    LOG.info(f"✅ Generated {len(frames)} Morse-labelled clusters")
    return frames
