# modules/md_engine.py

"""
MD Engine Module

Velocity-Verlet and BAOAB Langevin integration in eV / Å / fs / amu, a
stability monitor that stops a run at the first unphysical frame, analytic
test force fields and the `run_md` driver that writes extxyz trajectories.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules import tensor_core as tc
from modules.atomic_graph import AtomicStructure, minimum_image
from modules.elements import mass
from modules.errors import ContractError, DataError, MDError
from modules.extxyz_io import write_extxyz
from modules.memory_monitor import MemoryMonitor
from modules.mlanet_model import MLANet

LOG = logging.getLogger(__name__)

# 1 eV / (Å · amu) expressed in Å / fs²
ACCEL = 9.648533212e-3
KB = 8.617333262e-5  # eV / K

ForceFn = Callable[[np.ndarray], np.ndarray]


# ==============================================================================
# STATE
# ==============================================================================

@dataclass
class MDState:
    positions: np.ndarray          # [N, 3] Å
    velocities: np.ndarray         # [N, 3] Å/fs
    masses: np.ndarray             # [N] amu
    species: np.ndarray            # [N]
    cell: Optional[np.ndarray] = None
    pbc: Tuple[bool, bool, bool] = (False, False, False)
    time: float = 0.0              # fs
    step: int = 0
    forces: Optional[np.ndarray] = None  # forces at `positions`, eV/Å

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.velocities = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 3)
        self.masses = np.asarray(self.masses, dtype=np.float64).reshape(-1)
        if self.velocities.shape != self.positions.shape or self.masses.shape[0] != self.positions.shape[0]:
            raise ContractError(f"positions {self.positions.shape}, velocities {self.velocities.shape} "
                                f"and masses {self.masses.shape} disagree")
        if np.any(self.masses <= 0):
            raise MDError(f"non-positive mass at atom {int(np.argmin(self.masses))}")

    @classmethod
    def from_structure(cls, structure: AtomicStructure, temperature: float = 0.0, seed: int = 0) -> "MDState":
        """Maxwell-Boltzmann velocities at `temperature` K with the centre-of-mass drift removed."""
        if temperature < 0:
            raise ContractError(f"temperature must be >= 0, got {temperature}")
        masses = np.array([mass(int(z)) for z in structure.species])
        velocities = np.zeros_like(structure.positions)
        if temperature > 0:
            rng = np.random.default_rng(seed)
            sigma = np.sqrt(KB * temperature * ACCEL / masses)
            velocities = rng.standard_normal(structure.positions.shape) * sigma[:, None]
            velocities -= (masses[:, None] * velocities).sum(axis=0) / masses.sum()
        return cls(positions=structure.positions.copy(), velocities=velocities, masses=masses,
                   species=structure.species.copy(), cell=structure.cell, pbc=structure.pbc)

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    def kinetic_energy(self) -> float:
        """eV"""
        return float(0.5 * np.sum(self.masses[:, None] * self.velocities ** 2) / ACCEL)

    def temperature(self) -> float:
        """Instantaneous kinetic temperature over 3N degrees of freedom, K."""
        return 2.0 * self.kinetic_energy() / (3.0 * self.n_atoms * KB)

    def to_structure(self) -> AtomicStructure:
        return AtomicStructure(positions=self.positions.copy(), species=self.species.copy(),
                               cell=None if self.cell is None else self.cell.copy(), pbc=self.pbc,
                               forces=None if self.forces is None else self.forces.copy(),
                               info={"step": self.step, "time_fs": self.time})


def _forces(force_fn: ForceFn, positions: np.ndarray) -> np.ndarray:
    forces = np.asarray(force_fn(positions), dtype=np.float64)
    if forces.shape != positions.shape:
        raise MDError(f"force provider returned shape {forces.shape}, expected {positions.shape}")
    bad = np.nonzero(~np.isfinite(forces).all(axis=1))[0]
    if bad.size:
        raise MDError(f"non-finite force on atom {int(bad[0])}: {forces[bad[0]].tolist()}")
    return forces


def _cached_forces(state: MDState, force_fn: ForceFn) -> np.ndarray:
    return state.forces if state.forces is not None else _forces(force_fn, state.positions)


# ==============================================================================
# INTEGRATORS
# ==============================================================================

def velocity_verlet_step(state: MDState, force_fn: ForceFn, dt: float) -> MDState:
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")
    inv_m = ACCEL / state.masses[:, None]
    f = _cached_forces(state, force_fn)

    v_half = state.velocities + 0.5 * dt * f * inv_m
    x = state.positions + dt * v_half
    f_new = _forces(force_fn, x)
    v = v_half + 0.5 * dt * f_new * inv_m
    return replace(state, positions=x, velocities=v, forces=f_new, time=state.time + dt, step=state.step + 1)


def langevin_thermostat_step(state: MDState, force_fn: ForceFn, dt: float, temperature: float,
                             friction: float, rng: np.random.Generator) -> MDState:
    """
    BAOAB splitting. `friction` is in 1/fs; friction == 0 is plain velocity Verlet
    and draws no random numbers.
    """
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")
    if temperature < 0 or friction < 0:
        raise ContractError(f"temperature and friction must be >= 0, got {temperature} / {friction}")
    if friction == 0:
        return velocity_verlet_step(state, force_fn, dt)

    inv_m = ACCEL / state.masses[:, None]
    f = _cached_forces(state, force_fn)

    v = state.velocities + 0.5 * dt * f * inv_m
    x = state.positions + 0.5 * dt * v
    c1 = math.exp(-friction * dt)
    sigma = np.sqrt((1.0 - c1 * c1) * KB * temperature * inv_m)
    v = c1 * v + sigma * rng.standard_normal(v.shape)
    x = x + 0.5 * dt * v
    f_new = _forces(force_fn, x)
    v = v + 0.5 * dt * f_new * inv_m
    return replace(state, positions=x, velocities=v, forces=f_new, time=state.time + dt, step=state.step + 1)


# ==============================================================================
# STABILITY
# ==============================================================================

def _pair_distances(positions: np.ndarray, cell: Optional[np.ndarray], pbc: Sequence[bool]) -> np.ndarray:
    disp = minimum_image(positions[None, :, :] - positions[:, None, :], cell, pbc)
    return np.sqrt(np.sum(disp * disp, axis=-1))


@dataclass
class StabilityMonitor:
    """
    Flags the first frame with a pair closer than `min_distance`, a bond
    (initially shorter than `bond_cutoff`) stretched beyond `bond_factor` times
    its start length, or, for molecules, an atom displaced more than
    `drift_factor` times the initial extent.
    """
    min_distance: float = 0.5
    bond_factor: float = 2.0
    drift_factor: float = 10.0
    bond_cutoff: float = 1.8
    failure_step: Optional[int] = None
    failure_reason: Optional[str] = None
    _bonds: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default=None, repr=False)
    _start: Optional[np.ndarray] = field(default=None, repr=False)
    _extent: float = field(default=1.0, repr=False)

    def start(self, state: MDState) -> None:
        self.failure_step = None
        self.failure_reason = None
        self._start = state.positions.copy()
        span = state.positions.max(axis=0) - state.positions.min(axis=0)
        self._extent = max(float(np.linalg.norm(span)), 1.0)
        dist = _pair_distances(state.positions, state.cell, state.pbc)
        i, j = np.nonzero(np.triu(dist < self.bond_cutoff, k=1))
        self._bonds = (i, j, dist[i, j])

    def check(self, state: MDState) -> Optional[str]:
        """Failure reason for this frame, or None; the first failure is latched."""
        if self._start is None:
            self.start(state)
        reason = self._reason(state)
        if reason is not None and self.failure_step is None:
            self.failure_step = state.step
            self.failure_reason = reason
        return reason

    def _reason(self, state: MDState) -> Optional[str]:
        if not (np.isfinite(state.positions).all() and np.isfinite(state.velocities).all()):
            atom = int(np.nonzero(~np.isfinite(np.hstack([state.positions, state.velocities])).all(axis=1))[0][0])
            return f"non-finite coordinates at atom {atom}"
        if state.n_atoms > 1:
            dist = _pair_distances(state.positions, state.cell, state.pbc)
            np.fill_diagonal(dist, np.inf)
            i, j = np.unravel_index(np.argmin(dist), dist.shape)
            if dist[i, j] < self.min_distance:
                return f"atoms {min(i, j)} and {max(i, j)} at {dist[i, j]:.3f} Å < {self.min_distance} Å"
            bi, bj, d0 = self._bonds
            if bi.size:
                stretch = dist[bi, bj] / d0
                k = int(np.argmax(stretch))
                if stretch[k] > self.bond_factor:
                    return f"bond {bi[k]}-{bj[k]} stretched {stretch[k]:.2f}x"
        if not any(state.pbc):
            drift = np.linalg.norm(state.positions - self._start, axis=1)
            k = int(np.argmax(drift))
            if drift[k] > self.drift_factor * self._extent:
                return f"atom {k} drifted {drift[k]:.2f} Å"
        return None


@dataclass
class StabilityReport:
    stable: bool
    steps: int
    steps_completed: int
    failure_step: Optional[int]
    failure_reason: Optional[str]
    ps_stable: float
    fps: float
    peak_memory_mb: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class MDResult:
    frames: List[AtomicStructure]
    report: StabilityReport
    final_state: MDState


# ==============================================================================
# FORCE PROVIDERS
# ==============================================================================

class HarmonicForces:
    """f = -k (x - x0), each atom tied to its own anchor."""

    def __init__(self, k: float, anchors: np.ndarray):
        self.k = float(k)
        self.anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)

    def __call__(self, positions: np.ndarray) -> np.ndarray:
        return -self.k * (positions - self.anchors)

    def energy(self, positions: np.ndarray) -> float:
        return float(0.5 * self.k * np.sum((positions - self.anchors) ** 2))


class LennardJonesForces:
    """Untruncated 12-6 pair potential, minimum image on periodic axes."""

    def __init__(self, epsilon: float, sigma: float, cell: Optional[np.ndarray] = None,
                 pbc: Sequence[bool] = (False, False, False)):
        self.epsilon = float(epsilon)
        self.sigma = float(sigma)
        self.cell = cell
        self.pbc = tuple(pbc)

    def _pairs(self, positions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        disp = minimum_image(positions[None, :, :] - positions[:, None, :], self.cell, self.pbc)
        r2 = np.sum(disp * disp, axis=-1)
        np.fill_diagonal(r2, np.inf)
        return disp, r2

    def __call__(self, positions: np.ndarray) -> np.ndarray:
        disp, r2 = self._pairs(positions)
        sr6 = (self.sigma ** 2 / r2) ** 3
        # dE/dr / r for each pair; disp[i, j] points from i to j
        coeff = 24.0 * self.epsilon * (2.0 * sr6 * sr6 - sr6) / r2
        return -np.sum(coeff[:, :, None] * disp, axis=1)

    def energy(self, positions: np.ndarray) -> float:
        _, r2 = self._pairs(positions)
        sr6 = (self.sigma ** 2 / r2) ** 3
        return float(0.5 * np.sum(4.0 * self.epsilon * (sr6 * sr6 - sr6)))


def zero_forces(positions: np.ndarray) -> np.ndarray:
    return np.zeros_like(positions)


def model_forces(model: MLANet, template: AtomicStructure) -> ForceFn:
    """Force callback that rebuilds the graph at each position set."""
    missing = sorted(set(template.species.tolist()) - set(model.config.species))
    if missing:
        raise DataError(f"model does not cover species z={missing[0]} (covers {model.config.species})")

    def _fn(positions: np.ndarray) -> np.ndarray:
        with tc.no_grad():
            return model.predict(template.with_positions(positions))["forces"]

    return _fn


def total_energy(state: MDState, potential: Callable[[np.ndarray], float]) -> float:
    return state.kinetic_energy() + float(potential(state.positions))


# ==============================================================================
# DRIVER
# ==============================================================================

def run_md(structure: AtomicStructure, forces: Union[MLANet, ForceFn], steps: int, dt: float = 0.5,
           monitor: Optional[StabilityMonitor] = None, temperature: Optional[float] = None,
           friction: float = 0.0, seed: int = 0, write_every: int = 10,
           trajectory_path: Optional[str] = None, initial_temperature: Optional[float] = None,
           report_every: int = 1000) -> MDResult:
    """
    Integrate `steps` steps from `structure`.

    With `temperature` and friction > 0 the BAOAB thermostat runs; otherwise NVE
    velocity Verlet. Frames are kept at every `write_every`-th step and the last
    completed step. An instability ends the run early and is reported, not raised.
    """
    if steps < 0:
        raise ContractError(f"steps must be >= 0, got {steps}")
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")
    if write_every < 1:
        raise ContractError(f"write_every must be >= 1, got {write_every}")

    force_fn = model_forces(forces, structure) if isinstance(forces, MLANet) else forces
    start_t = initial_temperature if initial_temperature is not None else (temperature or 0.0)
    state = MDState.from_structure(structure, start_t, seed)
    monitor = monitor or StabilityMonitor()
    monitor.start(state)
    rng = np.random.default_rng(seed + 1)
    thermostat = temperature is not None and friction > 0
    memory = MemoryMonitor()
    memory.reset_window()

    LOG.info(f"MD: {structure.n_atoms} atoms, {steps} steps, dt={dt} fs, "
             f"{'Langevin T=' + str(temperature) + ' K' if thermostat else 'NVE'}")

    frames: List[AtomicStructure] = []
    completed = 0
    started = time.perf_counter()
    for step in range(1, steps + 1):
        try:
            if thermostat:
                state = langevin_thermostat_step(state, force_fn, dt, temperature, friction, rng)
            else:
                state = velocity_verlet_step(state, force_fn, dt)
        except MDError as e:
            monitor.failure_step = step
            monitor.failure_reason = str(e)
            LOG.warning(f"⚠️ MD aborted at step {step}: {e}")
            break
        if monitor.check(state) is not None:
            LOG.warning(f"⚠️ MD unstable at step {step}: {monitor.failure_reason}")
            break
        completed = step
        if step % write_every == 0 or step == steps:
            frame = state.to_structure()
            frame.info["kinetic_energy"] = state.kinetic_energy()
            frame.info["temperature_K"] = state.temperature()
            frames.append(frame)
        if report_every and step % report_every == 0:
            memory.sample()
            LOG.info(f"MD step {step}/{steps}: T={state.temperature():.1f} K")
    elapsed = time.perf_counter() - started

    stable = monitor.failure_step is None
    report = StabilityReport(
        stable=stable,
        steps=steps,
        steps_completed=completed,
        failure_step=monitor.failure_step,
        failure_reason=monitor.failure_reason,
        ps_stable=completed * dt / 1000.0,
        fps=completed / elapsed if completed and elapsed > 0 else 0.0,
        peak_memory_mb=memory.window_peak_mb(),
    )
    if trajectory_path:
        write_extxyz(trajectory_path, frames)
    if stable:
        LOG.info(f"✅ MD stable for {report.ps_stable:.3f} ps ({report.fps:.1f} frames/s)")
    return MDResult(frames=frames, report=report, final_state=state)


def benchmark_inference(model: MLANet, structures: Sequence[AtomicStructure], repeat: int = 3) -> List[Dict[str, Any]]:
    """Best-of-`repeat` latency of one force evaluation per structure."""
    if repeat < 1:
        raise ContractError(f"repeat must be >= 1, got {repeat}")
    rows = []
    for structure in structures:
        model.predict(structure)  # warm caches
        best = math.inf
        for _ in range(repeat):
            started = time.perf_counter()
            model.predict(structure)
            best = min(best, time.perf_counter() - started)
        rows.append({"n_atoms": structure.n_atoms, "latency_ms": best * 1000.0,
                     "fps": 1.0 / best if best > 0 else math.inf})
        LOG.info(f"BENCH: {structure.n_atoms} atoms, {best * 1000.0:.2f} ms/frame")
    return rows
