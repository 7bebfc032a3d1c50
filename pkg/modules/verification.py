# modules/verification.py

"""
Verification Module

Slow reference implementations for checking the production path: Haar rotations,
Wigner-D matrices fitted from sampled harmonics, central finite differences,
an exhaustive periodic neighbor search and a direct-loop CG tensor product.
`run_verification` strings them into the report behind `app.py verify`.
"""

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules import tensor_core as tc
from modules.atomic_graph import AtomGraph, AtomicStructure, bessel_rbf, build_neighbor_list
from modules.config import ModelConfig
from modules.datasets import random_cluster
from modules.errors import OracleError
from modules.irreps import (CG_LMAX, IrrepsSpec, IrrepsTensor, get_cg_table, spherical_harmonics, tensor_product,
                            tensor_product_plan)
from modules.mlanet_model import MLANet

LOG = logging.getLogger(__name__)

ORTHO_TOL = 1e-12
WIGNER_RESIDUAL_TOL = 1e-10
WIGNER_COND_MAX = 1e6
EQUIVARIANCE_TOL = 1e-8
GRADCHECK_TOL = 1e-4
TP_TOL = 1e-12


# ==============================================================================
# RIGID MOTIONS
# ==============================================================================

@dataclass(frozen=True)
class RigidMotion:
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise OracleError(f"rotation must be 3x3, got {R.shape}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise OracleError(f"not a proper rotation (det={np.linalg.det(R):.15f})")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, positions: np.ndarray) -> np.ndarray:
        return positions @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return vectors @ self.rotation.T

    def transform(self, s: AtomicStructure) -> AtomicStructure:
        """Move the atoms and rotate the cell; labels are not carried."""
        cell = None if s.cell is None else self.rotate(s.cell)
        return AtomicStructure(positions=self.apply(s.positions), species=s.species.copy(), cell=cell,
                               pbc=s.pbc, total_charge=s.total_charge)


def _quaternion_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(seed=0, translation_scale: float = 0.0) -> RigidMotion:
    """Haar-uniform rotation from a normalized Gaussian quaternion; `seed` may be a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    while True:
        q = rng.standard_normal(4)
        norm = np.linalg.norm(q)
        if norm > 1e-12:
            break
    translation = rng.standard_normal(3) * translation_scale
    return RigidMotion(_quaternion_matrix(q / norm), translation)


def rotation_about_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ==============================================================================
# WIGNER D
# ==============================================================================

def _harmonics_block(l: int, directions: np.ndarray) -> np.ndarray:
    return spherical_harmonics(l, directions).numpy()[:, l * l:(l + 1) ** 2]


def wigner_d(l: int, rotation: np.ndarray, seed: int = 0, attempts: int = 3) -> np.ndarray:
    """
    D with Y_l(R u) = D Y_l(u), fitted by least squares over random directions.
    """
    if not 0 <= l <= CG_LMAX:
        raise OracleError(f"wigner_d supports 0 <= l <= {CG_LMAX}, got {l}")
    R = np.asarray(rotation, dtype=np.float64)
    n_samples = max(2 * (2 * l + 1) ** 2, 16)
    rng = np.random.default_rng(seed)
    for attempt in range(attempts):
        u = rng.standard_normal((n_samples, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        A = _harmonics_block(l, u)
        if np.linalg.cond(A) > WIGNER_COND_MAX:
            LOG.debug(f"wigner_d l={l}: ill-conditioned sample set on attempt {attempt}, resampling")
            continue
        B = _harmonics_block(l, u @ R.T)
        solution, *_ = np.linalg.lstsq(A, B, rcond=None)
        residual = float(np.max(np.abs(A @ solution - B)))
        if residual > WIGNER_RESIDUAL_TOL:
            raise OracleError(f"wigner_d l={l}: fit residual {residual:.3e} exceeds {WIGNER_RESIDUAL_TOL}")
        return solution.T
    raise OracleError(f"wigner_d l={l}: no well-conditioned sample set in {attempts} attempts")


def rotate_irreps(x: np.ndarray, spec: IrrepsSpec, rotation: np.ndarray) -> np.ndarray:
    """Apply D^l(R) to every [mult, 2l+1] block of x [B, dim]."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    cache: Dict[int, np.ndarray] = {}
    for (mult, ir), sl in zip(spec, spec.slices()):
        if ir.l not in cache:
            cache[ir.l] = wigner_d(ir.l, rotation)
        block = x[:, sl].reshape(x.shape[0], mult, ir.dim)
        out[:, sl] = (block @ cache[ir.l].T).reshape(x.shape[0], -1)
    return out


def cg_equivariance_error(l1: int, l2: int, l3: int, rotation: np.ndarray) -> float:
    """max |C(D1 x, D2 y) - D3 C(x, y)| over the table's coefficients."""
    C = get_cg_table().dense(l1, l2, l3)
    D1, D2, D3 = (wigner_d(l, rotation) for l in (l1, l2, l3))
    lhs = np.einsum("ijk,ia,jb->abk", C, D1, D2)
    rhs = np.einsum("kc,abc->abk", D3, C)
    return float(np.max(np.abs(lhs - rhs)))


# ==============================================================================
# FINITE DIFFERENCES
# ==============================================================================

def finite_diff_grad(f: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-5,
                     indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of a scalar function; `indices` restricts to some flat coordinates."""
    x = np.array(params, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for k in (range(flat.size) if indices is None else indices):
        saved = flat[k]
        flat[k] = saved + h
        plus = float(f(x))
        flat[k] = saved - h
        minus = float(f(x))
        flat[k] = saved
        grad[k] = (plus - minus) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


# ==============================================================================
# NEIGHBORS
# ==============================================================================

Edge = Tuple[int, int, Tuple[int, int, int]]


def brute_force_neighbors(s: AtomicStructure, r_cut: float, shift_range: Optional[int] = None) -> List[Edge]:
    """
    Sorted (center i, neighbor j, shift) triples from an exhaustive triple loop.

    Without `shift_range` each periodic axis scans one image beyond the cell height
    bound, widened by how many cells apart the stored positions sit.
    """
    spread = np.zeros(3, dtype=np.int64)
    if s.cell is not None:
        frac = s.positions @ np.linalg.inv(s.cell)
        spread = (np.floor(frac.max(axis=0)) - np.floor(frac.min(axis=0))).astype(np.int64)
    axes = []
    for axis in range(3):
        if not s.pbc[axis]:
            axes.append([0])
            continue
        a, b, c = s.cell[axis], s.cell[(axis + 1) % 3], s.cell[(axis + 2) % 3]
        normal = np.cross(b, c)
        height = abs(float(np.dot(a, normal))) / float(np.linalg.norm(normal))
        needed = math.ceil(r_cut / height) + int(spread[axis])
        reach = needed + 1 if shift_range is None else shift_range
        if needed > reach:
            raise OracleError(f"shift_range {shift_range} too small on axis {axis}: r_cut {r_cut} Å "
                              f"over height {height:.3f} Å needs {needed}")
        axes.append(list(range(-reach, reach + 1)))

    cell = s.cell if s.cell is not None else np.zeros((3, 3))
    edges = []
    for i in range(s.n_atoms):
        for j in range(s.n_atoms):
            for shift in itertools.product(*axes):
                vec = s.positions[j] + np.asarray(shift, dtype=np.float64) @ cell - s.positions[i]
                d = math.sqrt(float(vec @ vec))
                if 0.0 < d <= r_cut:
                    edges.append((i, j, tuple(int(n) for n in shift)))
    return sorted(edges)


def graph_edges(graph: AtomGraph) -> List[Edge]:
    return sorted((int(i), int(j), tuple(int(n) for n in shift))
                  for i, j, shift in zip(graph.edge_dst, graph.edge_src, graph.edge_shift))


# ==============================================================================
# TENSOR PRODUCT
# ==============================================================================

def tensor_product_direct(a: np.ndarray, spec_a: IrrepsSpec, b: np.ndarray, spec_b: IrrepsSpec,
                          out_spec: IrrepsSpec, weights: np.ndarray, path_lmax: Optional[int] = None) -> np.ndarray:
    """
    Weighted CG product summed coefficient by coefficient.

    Weight layout: for each output entry, for each (a entry, b entry) pair
    coupling to it, an [M_a, M_b, M_out] block in C order.
    """
    table = get_cg_table()
    batch = a.shape[0]
    out = np.zeros((batch, out_spec.dim))
    offset = 0
    for (mult_o, ir_o), sl_o in zip(out_spec, out_spec.slices()):
        acc = np.zeros((batch, mult_o, ir_o.dim))
        fan_in = 0
        for (mult_a, ir_a), sl_a in zip(spec_a, spec_a.slices()):
            for (mult_b, ir_b), sl_b in zip(spec_b, spec_b.slices()):
                if ir_a.p * ir_b.p != ir_o.p or not abs(ir_a.l - ir_b.l) <= ir_o.l <= ir_a.l + ir_b.l:
                    continue
                if path_lmax is not None and max(ir_a.l, ir_b.l, ir_o.l) > path_lmax:
                    continue
                size = mult_a * mult_b * mult_o
                w = np.asarray(weights[offset:offset + size]).reshape(mult_a, mult_b, mult_o)
                offset += size
                fan_in += mult_a * mult_b
                xa = a[:, sl_a].reshape(batch, mult_a, ir_a.dim)
                xb = b[:, sl_b].reshape(batch, mult_b, ir_b.dim)
                index, values = table.entries(ir_a.l, ir_b.l, ir_o.l)
                for (m1, m2, m3), c in zip(index, values):
                    for u in range(mult_a):
                        for v in range(mult_b):
                            acc[:, :, m3] += c * (xa[:, u, m1] * xb[:, v, m2])[:, None] * w[u, v][None, :]
        if fan_in == 0:
            raise OracleError(f"output {ir_o} unreachable from '{spec_a}' x '{spec_b}'")
        out[:, sl_o] = (acc / math.sqrt(fan_in)).reshape(batch, -1)
    if offset != np.size(weights):
        raise OracleError(f"direct product consumed {offset} weights, {np.size(weights)} supplied")
    return out


def tensor_product_error(spec_a: IrrepsSpec, spec_b: IrrepsSpec, out_spec: IrrepsSpec,
                         rng: np.random.Generator, batch: int = 4) -> float:
    a = rng.standard_normal((batch, spec_a.dim))
    b = rng.standard_normal((batch, spec_b.dim))
    weights = tensor_product_plan(spec_a, spec_b, out_spec).init_weights(rng)
    with tc.no_grad():
        fast = tensor_product(IrrepsTensor(spec_a, tc.constant(a)), IrrepsTensor(spec_b, tc.constant(b)),
                              out_spec, tc.constant(weights)).numpy()
    slow = tensor_product_direct(a, spec_a, b, spec_b, out_spec, weights)
    return float(np.max(np.abs(fast - slow)))


# ==============================================================================
# MODEL CHECKS
# ==============================================================================

def model_equivariance_error(model: MLANet, s: AtomicStructure, motion: RigidMotion) -> Tuple[float, float]:
    """Relative (energy, force) errors of f(g.x) against g.f(x)."""
    before = model.predict(s)
    after = model.predict(motion.transform(s))
    energy_err = abs(after["energy"] - before["energy"]) / max(abs(before["energy"]), 1.0)
    force_err = relative_error(after["forces"], motion.rotate(before["forces"]), floor=1e-12)
    return energy_err, force_err


def _projected_scalar(model: MLANet, graph: AtomGraph, direction: np.ndarray) -> tc.Tensor:
    out = model.forward(graph)
    return tc.sum_reduce(out.energy) + tc.sum_reduce(out.forces * tc.constant(direction))


def gradcheck(model: MLANet, s: AtomicStructure, h: float = 1e-5, max_per_param: Optional[int] = None,
              seed: int = 0) -> Tuple[float, Dict[str, float]]:
    """
    Tape gradients of E + <c, F> against central differences.

    Returns the norm-wise error over every checked coordinate plus a per-tensor
    breakdown. `max_per_param` samples that many coordinates of each tensor.
    """
    rng = np.random.default_rng(seed)
    graph = model.graph_for(s)
    direction = rng.standard_normal((s.n_atoms, 3))

    model.zero_grad()
    with tc.Tape():
        _projected_scalar(model, graph, direction).backward()
    analytic = {name: np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for name, p in model.params.items()}
    model.zero_grad()

    per_param: Dict[str, float] = {}
    all_analytic, all_numeric = [], []
    for name, p in model.params.items():
        original = p.data.copy()

        def f(values: np.ndarray) -> float:
            p.data = values
            with tc.no_grad():
                return _projected_scalar(model, graph, direction).item()

        indices = None
        if max_per_param is not None and p.size > max_per_param:
            indices = rng.choice(p.size, max_per_param, replace=False)
        try:
            numeric = finite_diff_grad(f, original, h, indices).reshape(-1)
        finally:
            p.data = original
        g = analytic[name].reshape(-1)
        if indices is not None:
            g, numeric = g[indices], numeric[indices]
        per_param[name] = relative_error(g, numeric)
        all_analytic.append(g)
        all_numeric.append(numeric)
    return relative_error(np.concatenate(all_analytic), np.concatenate(all_numeric)), per_param


def bessel_checks(r_cut: float = 5.0, n_rbf: int = 8, n_points: int = 200000) -> Tuple[float, float]:
    """(max |RBF(r_cut)|, max |Gram - I|) with Gram_mn = ∫ RBF_m RBF_n x² dx by the midpoint rule."""
    at_cut = float(np.max(np.abs(bessel_rbf(np.array([r_cut]), r_cut, n_rbf))))
    dx = r_cut / n_points
    x = (np.arange(n_points) + 0.5) * dx
    basis = bessel_rbf(x, r_cut, n_rbf) * x[:, None]
    gram = basis.T @ basis * dx
    return at_cut, float(np.max(np.abs(gram - np.eye(n_rbf))))


# ==============================================================================
# REPORT
# ==============================================================================

@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float
    detail: str = ""


def _check(results: List[CheckResult], name: str, tolerance: float, fn: Callable[[], Tuple[float, str]]) -> None:
    started = time.perf_counter()
    try:
        value, detail = fn()
        passed = bool(value <= tolerance)
    except Exception as e:
        LOG.error(f"❌ Check {name} raised: {e}")
        value, detail, passed = math.inf, f"{type(e).__name__}: {e}", False
    seconds = time.perf_counter() - started
    results.append(CheckResult(name, passed, float(value), tolerance, seconds, detail))
    marker = "✅" if passed else "❌"
    LOG.info(f"{marker} {name}: {value:.3e} (tol {tolerance:.0e}, {seconds:.2f}s)")


def verification_model(seed: int = 0) -> MLANet:
    config = ModelConfig(hidden_irreps="4x0e+2x1o", n_layers_energy=1, n_layers_force=1, n_mlp_layers=1,
                         r_cut=4.0, embed_dim=4, mlp_hidden=8, species=[1, 6, 7, 8], seed=seed)
    return MLANet(config)


def run_verification(full: bool = False, seed: int = 0) -> Dict[str, Any]:
    """Run every oracle check; `full` widens the sweeps to acceptance size."""
    rng = np.random.default_rng(seed)
    results: List[CheckResult] = []
    n_struct = 200 if full else 20
    n_equi_struct, n_rot = (50, 20) if full else (4, 3)
    tp_lmax = 3

    def rotations():
        worst = 0.0
        for k in range(100):
            R = random_rotation(rng).rotation
            worst = max(worst, float(np.max(np.abs(R @ R.T - np.eye(3)))))
        return worst, "100 rotations"

    def wigner():
        R1, R2 = random_rotation(rng).rotation, random_rotation(rng).rotation
        worst = max(float(np.max(np.abs(wigner_d(l, R1 @ R2) - wigner_d(l, R1) @ wigner_d(l, R2))))
                    for l in range(0, tp_lmax + 1))
        return worst, f"D(R1 R2) = D(R1) D(R2), l <= {tp_lmax}"

    def cg():
        R = random_rotation(rng).rotation
        lmax = CG_LMAX if full else 2
        triples = [t for t in get_cg_table().triples() if max(t) <= lmax]
        return max(cg_equivariance_error(*t, R) for t in triples), f"{len(triples)} triples"

    def tp():
        specs = ["2x0e+1x1o", "1x0e+1x1e+1x2e", "1x0o+2x1o+1x3o"]
        worst = 0.0
        for a, b in itertools.product(specs, repeat=2):
            sa, sb = IrrepsSpec.parse(a), IrrepsSpec.parse(b)
            out = IrrepsSpec.parse("2x0e+1x1o+1x2e+1x3o")
            reachable = [(m, ir) for m, ir in out if any(ir in x * y for _, x in sa for _, y in sb)]
            if reachable:
                worst = max(worst, tensor_product_error(sa, sb, IrrepsSpec(tuple(reachable)), rng))
        return worst, "direct CG summation up to l=3"

    def neighbors():
        mismatched = 0
        for k in range(n_struct):
            s = random_cluster(rng, int(rng.integers(1, 6)), periodic=bool(k % 2), min_distance=0.7)
            r_cut = float(rng.uniform(1.5, 3.5))
            if graph_edges(build_neighbor_list(s, r_cut)) != brute_force_neighbors(s, r_cut):
                mismatched += 1
        return float(mismatched), f"{n_struct} structures"

    def bessel_zero():
        at_cut, _ = bessel_checks()
        return at_cut, "RBF(r_cut)"

    def bessel_ortho():
        _, gram = bessel_checks()
        return gram, "∫ RBF_m RBF_n x² dx"

    model = verification_model(seed)

    def equivariance():
        worst = 0.0
        for k in range(n_equi_struct):
            s = random_cluster(rng, int(rng.integers(2, 13)), periodic=bool(k % 2))
            for _ in range(n_rot):
                e_err, f_err = model_equivariance_error(model, s, random_rotation(rng, translation_scale=3.0))
                worst = max(worst, e_err, f_err)
        return worst, f"{n_equi_struct} structures x {n_rot} motions"

    def grads():
        s = AtomicStructure(positions=[[0.0, 0.0, 0.0], [1.1, 0.2, -0.1], [-0.3, 1.0, 0.4]], species=[6, 1, 8])
        error, per_param = gradcheck(model, s, max_per_param=None if full else 6, seed=seed)
        worst = max(per_param, key=per_param.get)
        return error, f"{len(per_param)} tensors, worst {worst} ({per_param[worst]:.1e})"

    _check(results, "rotation_orthonormality", 1e-14, rotations)
    _check(results, "wigner_homomorphism", 1e-9, wigner)
    _check(results, "cg_equivariance", 1e-10, cg)
    _check(results, "tensor_product_oracle", TP_TOL, tp)
    _check(results, "neighbor_list_oracle", 0.0, neighbors)
    _check(results, "bessel_zero_at_cutoff", 1e-12, bessel_zero)
    _check(results, "bessel_orthonormality", 1e-3, bessel_ortho)
    _check(results, "model_equivariance", EQUIVARIANCE_TOL, equivariance)
    _check(results, "gradcheck", GRADCHECK_TOL, grads)

    passed = all(r.passed for r in results)
    LOG.info(f"{'✅' if passed else '❌'} Verification: {sum(r.passed for r in results)}/{len(results)} checks passed")
    return {"passed": passed, "full": full, "checks": [r.__dict__ for r in results]}
