# modules/atomic_graph.py

"""
Atomic Graph Module

Turns AtomicStructure objects into AtomGraph objects: species embedding, periodic
neighbor search, Bessel radial features and the optional long-range and charge
node scalars.

Edge convention: dst is the center atom i, src is the neighbor j, and
edge_vec = r_j + n·C - r_i for the periodic image shift n.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules import tensor_core as tc
from modules.errors import ContractError, DataError, GeometryError
from modules.irreps import IrrepsSpec, IrrepsTensor

LOG = logging.getLogger(__name__)

DEFAULT_N_RBF = 8
CELL_DET_TOL = 1e-10

# Rows of the i-axis processed per neighbor-search chunk
_NEIGHBOR_CHUNK = 64


# ==============================================================================
# STRUCTURES
# ==============================================================================

@dataclass
class AtomicStructure:
    positions: np.ndarray
    species: np.ndarray
    cell: Optional[np.ndarray] = None
    pbc: Tuple[bool, bool, bool] = (False, False, False)
    total_charge: Optional[int] = None
    energy: Optional[float] = None
    forces: Optional[np.ndarray] = None
    stress: Optional[np.ndarray] = None
    info: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.species = np.asarray(self.species, dtype=np.int64).reshape(-1)
        n = self.positions.shape[0]
        if n < 1:
            raise DataError("a structure needs at least one atom")
        if self.species.shape[0] != n:
            raise DataError(f"{self.species.shape[0]} species for {n} positions")
        if np.any(self.species < 1):
            raise DataError(f"atomic numbers must be >= 1, got {self.species.min()}")
        self.pbc = tuple(bool(p) for p in self.pbc)
        if len(self.pbc) != 3:
            raise DataError(f"pbc needs 3 flags, got {len(self.pbc)}")
        if self.cell is not None:
            self.cell = np.asarray(self.cell, dtype=np.float64).reshape(3, 3)
        if any(self.pbc):
            if self.cell is None:
                raise GeometryError("periodic structure without a cell")
            if abs(np.linalg.det(self.cell)) <= CELL_DET_TOL:
                raise GeometryError(f"degenerate cell (|det| = {abs(np.linalg.det(self.cell)):.3e} Å³)")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)
            if self.forces.shape != (n, 3):
                raise DataError(f"forces label has shape {self.forces.shape}, expected ({n}, 3)")
        if self.stress is not None:
            self.stress = np.asarray(self.stress, dtype=np.float64).reshape(-1)
            if self.stress.shape != (6,):
                raise DataError(f"stress label needs 6 Voigt components, got {self.stress.shape[0]}")
        if self.energy is not None:
            self.energy = float(self.energy)

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    @property
    def is_periodic(self) -> bool:
        return any(self.pbc)

    def with_positions(self, positions: np.ndarray) -> "AtomicStructure":
        """Same atoms and cell at new positions, labels dropped."""
        return AtomicStructure(positions=positions, species=self.species.copy(),
                               cell=None if self.cell is None else self.cell.copy(),
                               pbc=self.pbc, total_charge=self.total_charge)


# ==============================================================================
# GRAPH
# ==============================================================================

@dataclass(frozen=True)
class AtomGraph:
    node_species: np.ndarray       # [N]
    edge_src: np.ndarray           # [E] neighbor j
    edge_dst: np.ndarray           # [E] center i
    edge_shift: np.ndarray         # [E, 3] integer image shift
    edge_vec: np.ndarray           # [E, 3] Å
    edge_len: np.ndarray           # [E] Å
    graph_index: np.ndarray        # [N]
    atoms_per_graph: np.ndarray    # [G]
    r_cut: float
    edge_rbf: Optional[np.ndarray] = None   # [E, n_rbf]
    node_extra: Optional[np.ndarray] = None  # [N, k] long-range / charge scalars

    @property
    def n_nodes(self) -> int:
        return self.node_species.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_src.shape[0]

    @property
    def n_graphs(self) -> int:
        return self.atoms_per_graph.shape[0]

    @property
    def edge_unit(self) -> np.ndarray:
        return self.edge_vec / self.edge_len[:, None]

    def with_rbf(self, n_rbf: int) -> "AtomGraph":
        if self.n_edges == 0:
            return replace(self, edge_rbf=np.zeros((0, n_rbf)))
        return replace(self, edge_rbf=bessel_rbf(self.edge_len, self.r_cut, n_rbf))

    def with_node_extra(self, extra: Optional[np.ndarray]) -> "AtomGraph":
        return replace(self, node_extra=extra)


def embed_species(z: np.ndarray, embed_dim: int, table: tc.Tensor) -> IrrepsTensor:
    """Row lookup v_i = table[z_i - 1]; gradients reach only the looked-up rows."""
    z = np.asarray(z, dtype=np.int64)
    z_max = table.shape[0]
    if table.shape[1] != embed_dim:
        raise DataError(f"embedding table width {table.shape[1]} != embed_dim {embed_dim}")
    unknown = z[(z < 1) | (z > z_max)]
    if unknown.size:
        raise DataError(f"unknown species z={int(unknown[0])} (table covers 1..{z_max})")
    return IrrepsTensor(IrrepsSpec.scalars(embed_dim), tc.index_select(table, z - 1))


# ==============================================================================
# NEIGHBOR SEARCH
# ==============================================================================

def image_ranges(cell: Optional[np.ndarray], pbc: Sequence[bool], r_cut: float) -> np.ndarray:
    """Per-axis shift range ceil(r_cut / perpendicular height); 0 on open axes."""
    ranges = np.zeros(3, dtype=np.int64)
    if cell is None or not any(pbc):
        return ranges
    volume = abs(np.linalg.det(cell))
    if volume <= CELL_DET_TOL:
        raise GeometryError(f"degenerate cell (|det| = {volume:.3e} Å³)")
    for axis in range(3):
        if not pbc[axis]:
            continue
        face = np.cross(cell[(axis + 1) % 3], cell[(axis + 2) % 3])
        height = volume / np.linalg.norm(face)
        ranges[axis] = int(math.ceil(r_cut / height))
    return ranges


def _shift_grid(ranges: np.ndarray) -> np.ndarray:
    axes = [np.arange(-r, r + 1) for r in ranges]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


def cell_offsets(s: AtomicStructure) -> np.ndarray:
    """Integer cell index floor(fractional) of every atom along periodic axes; 0 on open axes."""
    index = np.zeros((s.n_atoms, 3), dtype=np.int64)
    if s.cell is None or not any(s.pbc):
        return index
    frac = np.linalg.solve(s.cell.T, s.positions.T).T
    periodic = np.asarray(s.pbc, dtype=bool)
    index[:, periodic] = np.floor(frac[:, periodic]).astype(np.int64)
    return index


def build_neighbor_list(s: AtomicStructure, r_cut: float) -> AtomGraph:
    """
    All directed edges (i, j, n) with 0 < |r_j + n·C - r_i| <= r_cut.

    Positions outside the cell are searched from their wrapped images and the
    integer cell offset is folded back into each edge shift.

    Output is sorted by (i, j, shift).
    """
    if r_cut <= 0:
        raise ContractError(f"r_cut must be positive, got {r_cut}")

    ranges = image_ranges(s.cell, s.pbc, r_cut)
    shifts = _shift_grid(ranges)
    offsets = shifts @ s.cell if s.cell is not None else np.zeros((1, 3))
    cell_index = cell_offsets(s)
    pos = s.positions - cell_index @ s.cell if s.cell is not None else s.positions
    n = s.n_atoms

    found_i, found_j, found_s = [], [], []
    for start in range(0, n, _NEIGHBOR_CHUNK):
        stop = min(start + _NEIGHBOR_CHUNK, n)
        disp = pos[None, :, None, :] + offsets[None, None, :, :] - pos[start:stop, None, None, :]
        dist = np.sqrt(np.sum(disp * disp, axis=-1))
        i, j, k = np.nonzero((dist <= r_cut) & (dist > 0.0))
        found_i.append(i + start)
        found_j.append(j)
        found_s.append(k)

    dst = np.concatenate(found_i).astype(np.int64)
    src = np.concatenate(found_j).astype(np.int64)
    shift_index = np.concatenate(found_s).astype(np.int64)
    # Shifts found between wrapped images, re-expressed for the stored positions
    edge_shift = shifts[shift_index] + cell_index[dst] - cell_index[src]
    order = np.lexsort((edge_shift[:, 2], edge_shift[:, 1], edge_shift[:, 0], src, dst))
    dst, src, edge_shift = dst[order], src[order], edge_shift[order]
    cell = s.cell if s.cell is not None else np.zeros((3, 3))
    edge_vec = s.positions[src] + edge_shift @ cell - s.positions[dst]
    edge_len = np.sqrt(np.sum(edge_vec * edge_vec, axis=1))

    LOG.debug(f"Neighbor list: {len(dst)} edges for {n} atoms (r_cut={r_cut} Å, images={ranges.tolist()})")
    return AtomGraph(
        node_species=s.species.copy(),
        edge_src=src,
        edge_dst=dst,
        edge_shift=edge_shift.reshape(-1, 3),
        edge_vec=edge_vec.reshape(-1, 3),
        edge_len=edge_len,
        graph_index=np.zeros(n, dtype=np.int64),
        atoms_per_graph=np.array([n], dtype=np.int64),
        r_cut=float(r_cut),
    )


# ==============================================================================
# NODE AND EDGE FEATURES
# ==============================================================================

def bessel_rbf(x: np.ndarray, r_cut: float, n_rbf: int = DEFAULT_N_RBF) -> np.ndarray:
    """RBF_m(x) = sqrt(2/r_cut) * sin(m*pi*x/r_cut) / x for m = 1..n_rbf."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size and np.min(x) <= 0.0:
        raise ContractError(f"bessel_rbf needs x > 0, got {np.min(x)}")
    m = np.arange(1, n_rbf + 1, dtype=np.float64)
    return math.sqrt(2.0 / r_cut) * np.sin(np.outer(x, m) * math.pi / r_cut) / x[:, None]


def minimum_image(disp: np.ndarray, cell: Optional[np.ndarray], pbc: Sequence[bool]) -> np.ndarray:
    """Wrap displacement vectors [..., 3] to their nearest periodic image along pbc axes."""
    if cell is None or not any(pbc):
        return disp
    frac = disp @ np.linalg.inv(cell)
    mask = np.asarray(pbc, dtype=bool)
    frac[..., mask] -= np.round(frac[..., mask])
    return frac @ cell


def long_range_feature(s: AtomicStructure) -> np.ndarray:
    """Mean minimum-image distance from each atom to all others (no cutoff)."""
    n = s.n_atoms
    if n < 2:
        return np.zeros(n)
    disp = minimum_image(s.positions[None, :, :] - s.positions[:, None, :], s.cell, s.pbc)
    dist = np.sqrt(np.sum(disp * disp, axis=-1))
    return dist.sum(axis=1) / (n - 1)


def charge_feature(s: AtomicStructure) -> np.ndarray:
    q = 0.0 if s.total_charge is None else float(s.total_charge)
    return np.full(s.n_atoms, q)


def build_graph(s: AtomicStructure, r_cut: float, n_rbf: int = DEFAULT_N_RBF,
                long_range: bool = False, charge: bool = False) -> AtomGraph:
    graph = build_neighbor_list(s, r_cut).with_rbf(n_rbf)
    columns = []
    if long_range:
        columns.append(long_range_feature(s))
    if charge:
        columns.append(charge_feature(s))
    if columns:
        graph = graph.with_node_extra(np.stack(columns, axis=1))
    return graph


def collate(graphs: Sequence[AtomGraph]) -> AtomGraph:
    """Batch graphs into one disconnected graph; node and graph indices are offset."""
    if not graphs:
        raise ContractError("collate needs at least one graph")
    if len(graphs) == 1:
        return graphs[0]

    first = graphs[0]
    for g in graphs[1:]:
        if g.r_cut != first.r_cut:
            raise ContractError(f"cannot batch graphs with r_cut {first.r_cut} and {g.r_cut}")
        if (g.edge_rbf is None) != (first.edge_rbf is None) or (g.node_extra is None) != (first.node_extra is None):
            raise ContractError("cannot batch graphs with different feature sets")

    node_offsets = np.cumsum([0] + [g.n_nodes for g in graphs[:-1]])
    graph_offsets = np.cumsum([0] + [g.n_graphs for g in graphs[:-1]])

    def _cat(name: str) -> Optional[np.ndarray]:
        if getattr(first, name) is None:
            return None
        return np.concatenate([getattr(g, name) for g in graphs], axis=0)

    return AtomGraph(
        node_species=np.concatenate([g.node_species for g in graphs]),
        edge_src=np.concatenate([g.edge_src + off for g, off in zip(graphs, node_offsets)]),
        edge_dst=np.concatenate([g.edge_dst + off for g, off in zip(graphs, node_offsets)]),
        edge_shift=np.concatenate([g.edge_shift for g in graphs], axis=0),
        edge_vec=np.concatenate([g.edge_vec for g in graphs], axis=0),
        edge_len=np.concatenate([g.edge_len for g in graphs]),
        graph_index=np.concatenate([g.graph_index + off for g, off in zip(graphs, graph_offsets)]),
        atoms_per_graph=np.concatenate([g.atoms_per_graph for g in graphs]),
        r_cut=first.r_cut,
        edge_rbf=_cat("edge_rbf"),
        node_extra=_cat("node_extra"),
    )


def default_workers() -> int:
    return int(os.getenv("MLANET_NUM_WORKERS", min(8, os.cpu_count() or 1)))


def build_graphs(structures: Sequence[AtomicStructure], r_cut: float, n_rbf: int = DEFAULT_N_RBF,
                 long_range: bool = False, charge: bool = False,
                 workers: Optional[int] = None) -> List[AtomGraph]:
    """Build one graph per structure on a thread pool; output order follows input order."""
    workers = workers or default_workers()
    if workers <= 1 or len(structures) <= 1:
        graphs = [build_graph(s, r_cut, n_rbf, long_range, charge) for s in structures]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            graphs = list(pool.map(lambda s: build_graph(s, r_cut, n_rbf, long_range, charge), structures))

    total_edges = sum(g.n_edges for g in graphs)
    LOG.info(f"✅ Built {len(graphs)} graphs ({total_edges} edges, {workers} workers)")
    return graphs
