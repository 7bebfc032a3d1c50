# modules/irreps.py

"""
Irreps Algebra Module

Irreducible-representation layouts and the equivariant primitives built on them:
real spherical harmonics, Clebsch-Gordan tensor products, block-diagonal
equivariant linear maps and the gate nonlinearity.

Layout convention: an entry "Mx{l}{p}" occupies M*(2l+1) contiguous columns,
channel-major ([M, 2l+1]), components ordered m = -l..l. For l=1 that is (y, z, x).
"""

import logging
import math
import re
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from sympy.physics.wigner import clebsch_gordan

from modules import tensor_core as tc
from modules.errors import ConfigurationError, ContractError, DimensionError

LOG = logging.getLogger(__name__)

CG_LMAX = 4

_IRREP_RE = re.compile(r"^(\d+)([eo])$")
_ENTRY_RE = re.compile(r"^(\d+)x(\d+)([eo])$")


# ==============================================================================
# IRREP / IRREPS SPEC
# ==============================================================================

@dataclass(frozen=True, order=True)
class Irrep:
    l: int
    p: int  # +1 even, -1 odd

    def __post_init__(self):
        if self.l < 0 or self.p not in (1, -1):
            raise ConfigurationError(f"invalid irrep l={self.l} p={self.p}")

    @classmethod
    def parse(cls, text: str) -> "Irrep":
        match = _IRREP_RE.match(text.strip())
        if not match:
            raise ConfigurationError(f"cannot parse irrep '{text}'")
        return cls(int(match.group(1)), 1 if match.group(2) == "e" else -1)

    @property
    def dim(self) -> int:
        return 2 * self.l + 1

    @property
    def parity(self) -> str:
        return "e" if self.p == 1 else "o"

    def __str__(self) -> str:
        return f"{self.l}{self.parity}"

    def __mul__(self, other: "Irrep") -> List["Irrep"]:
        """Irreps reachable from self ⊗ other (selection rule |l1-l2| <= l3 <= l1+l2)."""
        p = self.p * other.p
        return [Irrep(l, p) for l in range(abs(self.l - other.l), self.l + other.l + 1)]


SCALAR = Irrep(0, 1)
VECTOR = Irrep(1, -1)


@dataclass(frozen=True)
class IrrepsSpec:
    entries: Tuple[Tuple[int, Irrep], ...]

    def __post_init__(self):
        for mult, ir in self.entries:
            if mult <= 0:
                raise ConfigurationError(f"multiplicity must be positive, got {mult}x{ir}")

    @classmethod
    def parse(cls, text: str) -> "IrrepsSpec":
        text = text.strip()
        if not text:
            return cls(())
        entries = []
        for chunk in text.split("+"):
            match = _ENTRY_RE.match(chunk.strip())
            if not match:
                raise ConfigurationError(f"cannot parse irreps entry '{chunk}' in '{text}'")
            mult, l, parity = int(match.group(1)), int(match.group(2)), match.group(3)
            entries.append((mult, Irrep(l, 1 if parity == "e" else -1)))
        return cls(tuple(entries))

    @classmethod
    def of(cls, value) -> "IrrepsSpec":
        return value if isinstance(value, IrrepsSpec) else cls.parse(value)

    @classmethod
    def spherical_harmonics(cls, l_max: int) -> "IrrepsSpec":
        return cls(tuple((1, Irrep(l, (-1) ** l)) for l in range(l_max + 1)))

    @classmethod
    def scalars(cls, count: int) -> "IrrepsSpec":
        return cls(((count, SCALAR),)) if count > 0 else cls(())

    def __str__(self) -> str:
        return "+".join(f"{mult}x{ir}" for mult, ir in self.entries)

    def __iter__(self) -> Iterator[Tuple[int, Irrep]]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __add__(self, other: "IrrepsSpec") -> "IrrepsSpec":
        return IrrepsSpec(self.entries + other.entries)

    @property
    def dim(self) -> int:
        return sum(mult * ir.dim for mult, ir in self.entries)

    @property
    def num_channels(self) -> int:
        return sum(mult for mult, _ in self.entries)

    @property
    def lmax(self) -> int:
        return max((ir.l for _, ir in self.entries), default=0)

    def count(self, ir: Irrep) -> int:
        return sum(mult for mult, other in self.entries if other == ir)

    def offsets(self) -> List[int]:
        out, offset = [], 0
        for mult, ir in self.entries:
            out.append(offset)
            offset += mult * ir.dim
        return out

    def slices(self) -> List[slice]:
        return [slice(start, start + mult * ir.dim) for start, (mult, ir) in zip(self.offsets(), self.entries)]

    def filter(self, keep) -> "IrrepsSpec":
        return IrrepsSpec(tuple((mult, ir) for mult, ir in self.entries if keep(ir)))

    @property
    def num_scalar_channels(self) -> int:
        return sum(mult for mult, ir in self.entries if ir == SCALAR)

    @property
    def num_gated_channels(self) -> int:
        return sum(mult for mult, ir in self.entries if ir.l > 0)


# ==============================================================================
# IRREPS TENSOR
# ==============================================================================

@dataclass
class IrrepsTensor:
    spec: IrrepsSpec
    data: tc.Tensor  # [batch, spec.dim]

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != self.spec.dim:
            raise DimensionError(f"irreps tensor for '{self.spec}' needs [batch, {self.spec.dim}], "
                                 f"got {list(self.data.shape)}")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    def block(self, index: int) -> tc.Tensor:
        """Entry `index` as a [batch, mult, 2l+1] tensor."""
        mult, ir = self.spec.entries[index]
        sl = self.spec.slices()[index]
        return tc.reshape(self.data[:, sl], (self.batch, mult, ir.dim))

    def scalars(self) -> tc.Tensor:
        """All 0e columns, concatenated in entry order: [batch, n_0e]."""
        pieces = [self.data[:, sl] for sl, (_, ir) in zip(self.spec.slices(), self.spec) if ir == SCALAR]
        if not pieces:
            return tc.zeros((self.batch, 0))
        return pieces[0] if len(pieces) == 1 else tc.concat(pieces, axis=1)

    @classmethod
    def from_blocks(cls, spec: IrrepsSpec, blocks: List[tc.Tensor]) -> "IrrepsTensor":
        batch = blocks[0].shape[0]
        flat = [tc.reshape(b, (batch, b.shape[1] * b.shape[2])) for b in blocks]
        return cls(spec, flat[0] if len(flat) == 1 else tc.concat(flat, axis=1))

    @classmethod
    def zeros(cls, spec: IrrepsSpec, batch: int) -> "IrrepsTensor":
        return cls(spec, tc.zeros((batch, spec.dim)))

    def index_select(self, index: np.ndarray) -> "IrrepsTensor":
        return IrrepsTensor(self.spec, tc.index_select(self.data, index))

    def __add__(self, other: "IrrepsTensor") -> "IrrepsTensor":
        if other.spec != self.spec:
            raise ConfigurationError(f"cannot add '{self.spec}' and '{other.spec}'")
        return IrrepsTensor(self.spec, self.data + other.data)

    def concat(self, other: "IrrepsTensor") -> "IrrepsTensor":
        return IrrepsTensor(self.spec + other.spec, tc.concat([self.data, other.data], axis=1))

    def numpy(self) -> np.ndarray:
        return self.data.data


@lru_cache(maxsize=None)
def channel_expansion(spec: IrrepsSpec) -> np.ndarray:
    """[channels, dim] 0/1 matrix copying one value per channel onto its 2l+1 components."""
    matrix = np.zeros((spec.num_channels, spec.dim))
    channel, column = 0, 0
    for mult, ir in spec:
        for _ in range(mult):
            matrix[channel, column:column + ir.dim] = 1.0
            channel += 1
            column += ir.dim
    matrix.flags.writeable = False
    return matrix


def embed_into(x: IrrepsTensor, spec: IrrepsSpec) -> IrrepsTensor:
    """
    Place the entries of `x` into the matching entries of `spec`, zero elsewhere.

    Entries are matched greedily in order by (mult, irrep).
    """
    pieces, used = [], 0
    sources = list(zip(x.spec.slices(), x.spec.entries))
    for mult, ir in spec:
        if used < len(sources) and sources[used][1] == (mult, ir):
            pieces.append(x.data[:, sources[used][0]])
            used += 1
        else:
            pieces.append(tc.zeros((x.batch, mult * ir.dim)))
    if used != len(sources):
        raise ConfigurationError(f"'{x.spec}' does not embed into '{spec}'")
    return IrrepsTensor(spec, pieces[0] if len(pieces) == 1 else tc.concat(pieces, axis=1))


# ==============================================================================
# SPHERICAL HARMONICS
# ==============================================================================

def spherical_harmonics(l_max: int, directions) -> IrrepsTensor:
    """
    Real spherical harmonics with component normalization: |Y_l(u)| = sqrt(2l+1).

    Y_{l,0} = sqrt(2l+1) P_l(z); for k > 0
    Y_{l,±k} = sqrt(2(2l+1)(l-k)!/(l+k)!) P_l^{(k)}(z) * {Re, Im}((x + iy)^k).
    """
    u = directions.data if isinstance(directions, tc.Tensor) else np.asarray(directions, dtype=np.float64)
    u = u.reshape(-1, 3)
    norms = np.linalg.norm(u, axis=1)
    if u.shape[0] and np.max(np.abs(norms - 1.0)) > 1e-8:
        bad = int(np.argmax(np.abs(norms - 1.0)))
        raise ContractError(f"direction {bad} has norm {norms[bad]:.12f}, expected unit vectors")

    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    xy = x + 1j * y
    blocks = []
    for l in range(l_max + 1):
        legendre = np.polynomial.legendre.Legendre.basis(l)
        block = np.zeros((u.shape[0], 2 * l + 1))
        block[:, l] = math.sqrt(2 * l + 1) * legendre(z)
        for k in range(1, l + 1):
            factor = math.sqrt(2.0 * (2 * l + 1) * math.factorial(l - k) / math.factorial(l + k))
            radial = factor * legendre.deriv(k)(z)
            power = xy ** k
            block[:, l + k] = radial * power.real
            block[:, l - k] = radial * power.imag
        blocks.append(block)

    spec = IrrepsSpec.spherical_harmonics(l_max)
    return IrrepsTensor(spec, tc.constant(np.concatenate(blocks, axis=1)))


# ==============================================================================
# CLEBSCH-GORDAN TABLE
# ==============================================================================

def _real_from_complex(l: int) -> np.ndarray:
    """Rows: real harmonics m=-l..l; columns: complex Y_l^m (Condon-Shortley)."""
    s = 1.0 / math.sqrt(2.0)
    U = np.zeros((2 * l + 1, 2 * l + 1), dtype=np.complex128)
    U[l, l] = 1.0
    for k in range(1, l + 1):
        U[l + k, l + k] = (-1) ** k * s
        U[l + k, l - k] = s
        U[l - k, l + k] = -1j * (-1) ** k * s
        U[l - k, l - k] = 1j * s
    return U


def _complex_cg(l1: int, l2: int, l3: int) -> np.ndarray:
    C = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1))
    for m1 in range(-l1, l1 + 1):
        for m2 in range(-l2, l2 + 1):
            m3 = m1 + m2
            if abs(m3) <= l3:
                C[l1 + m1, l2 + m2, l3 + m3] = float(clebsch_gordan(l1, l2, l3, m1, m2, m3))
    return C


def _real_cg(l1: int, l2: int, l3: int) -> np.ndarray:
    C = _complex_cg(l1, l2, l3)
    R = np.einsum("im,jn,kp,mnp->ijk",
                  _real_from_complex(l1).conj(), _real_from_complex(l2).conj(), _real_from_complex(l3), C)
    # The invariant tensor is real up to one global phase
    pivot = R.reshape(-1)[np.argmax(np.abs(R))]
    R = R / (pivot / abs(pivot))
    if np.max(np.abs(R.imag)) > 1e-12:
        raise ConfigurationError(f"CG ({l1},{l2},{l3}) did not reduce to a real tensor")
    real = R.real.copy()
    real[np.abs(real) < 1e-15] = 0.0
    first = real.reshape(-1)[np.flatnonzero(real)[0]]
    if first < 0:
        real = -real
    return real


class CGTable:
    """
    Real-basis Clebsch-Gordan coefficients for l1, l2, l3 <= lmax.

    Coefficients are computed on first use per (l1, l2, l3) and never change
    afterwards; lookups are safe from any thread.
    """

    def __init__(self, lmax: int = CG_LMAX):
        self.lmax = lmax
        self._dense: Dict[Tuple[int, int, int], np.ndarray] = {}
        self._lock = threading.Lock()

    def allowed(self, l1: int, l2: int, l3: int) -> bool:
        return max(l1, l2, l3) <= self.lmax and abs(l1 - l2) <= l3 <= l1 + l2

    def dense(self, l1: int, l2: int, l3: int) -> np.ndarray:
        key = (l1, l2, l3)
        table = self._dense.get(key)
        if table is not None:
            return table
        if max(key) > self.lmax:
            raise ConfigurationError(f"CG table holds l <= {self.lmax}, requested {key}")
        if not self.allowed(*key):
            raise ConfigurationError(f"({l1},{l2},{l3}) violates the selection rule |l1-l2| <= l3 <= l1+l2")
        with self._lock:
            table = self._dense.get(key)
            if table is None:
                table = _real_cg(*key)
                table.flags.writeable = False
                self._dense[key] = table
                LOG.debug(f"CG table: computed ({l1},{l2},{l3}) with {np.count_nonzero(table)} nonzeros")
        return table

    def entries(self, l1: int, l2: int, l3: int) -> Tuple[np.ndarray, np.ndarray]:
        """Sparse form: ([K, 3] m-index triples, [K] values)."""
        table = self.dense(l1, l2, l3)
        index = np.argwhere(table != 0.0)
        return index, table[tuple(index.T)]

    def triples(self) -> List[Tuple[int, int, int]]:
        return [(l1, l2, l3)
                for l1 in range(self.lmax + 1)
                for l2 in range(self.lmax + 1)
                for l3 in range(abs(l1 - l2), min(l1 + l2, self.lmax) + 1)]


_CG_TABLE = CGTable(CG_LMAX)


def get_cg_table() -> CGTable:
    return _CG_TABLE


# ==============================================================================
# EQUIVARIANT LINEAR
# ==============================================================================

class LinearPlan:
    """Which input entries feed which output entries, and where their weights live."""

    def __init__(self, in_spec: IrrepsSpec, out_spec: IrrepsSpec):
        self.in_spec = in_spec
        self.out_spec = out_spec
        self.paths: List[Tuple[int, int, slice]] = []
        self.bias_slots: Dict[int, slice] = {}
        offset, bias_offset = 0, 0
        for k, (mult_out, ir_out) in enumerate(out_spec):
            sources = [i for i, (_, ir_in) in enumerate(in_spec) if ir_in == ir_out]
            if not sources:
                raise ConfigurationError(f"output irrep {ir_out} of '{out_spec}' is absent from input '{in_spec}'")
            for i in sources:
                size = in_spec.entries[i][0] * mult_out
                self.paths.append((i, k, slice(offset, offset + size)))
                offset += size
            if ir_out == SCALAR:
                self.bias_slots[k] = slice(bias_offset, bias_offset + mult_out)
                bias_offset += mult_out
        self.weight_numel = offset
        self.bias_numel = bias_offset

    def fan_in(self, k: int) -> int:
        return sum(self.in_spec.entries[i][0] for i, kk, _ in self.paths if kk == k)

    def init_weights(self, rng: np.random.Generator) -> np.ndarray:
        weights = np.zeros(self.weight_numel)
        for i, k, sl in self.paths:
            weights[sl] = rng.standard_normal(sl.stop - sl.start) / math.sqrt(self.fan_in(k))
        return weights


@lru_cache(maxsize=None)
def linear_plan(in_spec: IrrepsSpec, out_spec: IrrepsSpec) -> LinearPlan:
    return LinearPlan(in_spec, out_spec)


def equivariant_linear(x: IrrepsTensor, out_spec: IrrepsSpec, weights: tc.Tensor,
                       bias: Optional[tc.Tensor] = None) -> IrrepsTensor:
    """
    Block-diagonal linear map: mixes multiplicities within one (l, parity), never across.

    `weights` is flat with one [M_in, M_out] matrix per (input entry, output entry)
    pair sharing an irrep; `bias`, if given, only touches 0e outputs.
    """
    plan = linear_plan(x.spec, out_spec)
    if weights.size != plan.weight_numel:
        raise DimensionError(f"linear '{x.spec}' -> '{out_spec}' needs {plan.weight_numel} weights, got {weights.size}")
    if bias is not None and bias.size != plan.bias_numel:
        raise DimensionError(f"linear '{x.spec}' -> '{out_spec}' needs {plan.bias_numel} bias values, got {bias.size}")

    flat_w = tc.reshape(weights, (plan.weight_numel,))
    in_blocks = {}
    out_blocks: List[Optional[tc.Tensor]] = [None] * len(out_spec)
    for i, k, sl in plan.paths:
        if i not in in_blocks:
            in_blocks[i] = x.block(i)
        mult_in = x.spec.entries[i][0]
        mult_out = out_spec.entries[k][0]
        w = tc.reshape(flat_w[sl], (mult_in, mult_out))
        term = tc.einsum("bud,uw->bwd", in_blocks[i], w)
        out_blocks[k] = term if out_blocks[k] is None else out_blocks[k] + term

    if bias is not None:
        flat_b = tc.reshape(bias, (plan.bias_numel,))
        for k, sl in plan.bias_slots.items():
            mult_out = out_spec.entries[k][0]
            out_blocks[k] = out_blocks[k] + tc.reshape(flat_b[sl], (1, mult_out, 1))

    return IrrepsTensor.from_blocks(out_spec, out_blocks)


# ==============================================================================
# TENSOR PRODUCT
# ==============================================================================

@dataclass(frozen=True)
class TensorProductPath:
    i: int
    j: int
    k: int
    l1: int
    l2: int
    l3: int
    weights: slice


class TensorProductPlan:
    """
    Fully-connected weighted CG tensor product a ⊗ b -> out.

    Every (a-entry, b-entry, out-entry) triple allowed by the selection and parity
    rules is a path with an [M_a, M_b, M_out] weight block. Output entry k is scaled
    by 1/sqrt(sum over its paths of M_a*M_b).
    """

    def __init__(self, spec_a: IrrepsSpec, spec_b: IrrepsSpec, out_spec: IrrepsSpec,
                 path_lmax: Optional[int] = None):
        self.spec_a = spec_a
        self.spec_b = spec_b
        self.out_spec = out_spec
        self.paths: List[TensorProductPath] = []
        self.fan_in: List[int] = []
        offset = 0
        for k, (mult_out, ir_out) in enumerate(out_spec):
            fan_in = 0
            for i, (mult_a, ir_a) in enumerate(spec_a):
                for j, (mult_b, ir_b) in enumerate(spec_b):
                    if ir_out not in ir_a * ir_b:
                        continue
                    if path_lmax is not None and max(ir_a.l, ir_b.l, ir_out.l) > path_lmax:
                        continue
                    size = mult_a * mult_b * mult_out
                    self.paths.append(TensorProductPath(i, j, k, ir_a.l, ir_b.l, ir_out.l,
                                                        slice(offset, offset + size)))
                    offset += size
                    fan_in += mult_a * mult_b
            if fan_in == 0:
                raise ConfigurationError(f"output irrep {ir_out} is unreachable from '{spec_a}' ⊗ '{spec_b}'")
            self.fan_in.append(fan_in)
        self.weight_numel = offset

    def init_weights(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.weight_numel)


@lru_cache(maxsize=None)
def tensor_product_plan(spec_a: IrrepsSpec, spec_b: IrrepsSpec, out_spec: IrrepsSpec,
                        path_lmax: Optional[int] = None) -> TensorProductPlan:
    return TensorProductPlan(spec_a, spec_b, out_spec, path_lmax)


def tensor_product(a: IrrepsTensor, b: IrrepsTensor, out_spec: IrrepsSpec, weights: tc.Tensor,
                   path_lmax: Optional[int] = None) -> IrrepsTensor:
    if a.batch != b.batch:
        raise DimensionError(f"tensor product batch mismatch: {a.batch} vs {b.batch}")
    plan = tensor_product_plan(a.spec, b.spec, out_spec, path_lmax)
    if weights.size != plan.weight_numel:
        raise DimensionError(f"tensor product needs {plan.weight_numel} weights, got {weights.size}")

    table = get_cg_table()
    flat_w = tc.reshape(weights, (plan.weight_numel,))
    blocks_a = {i: a.block(i) for i in {p.i for p in plan.paths}}
    blocks_b = {j: b.block(j) for j in {p.j for p in plan.paths}}

    out_blocks: List[Optional[tc.Tensor]] = [None] * len(out_spec)
    for path in plan.paths:
        mult_a = a.spec.entries[path.i][0]
        mult_b = b.spec.entries[path.j][0]
        mult_out = out_spec.entries[path.k][0]
        w = tc.reshape(flat_w[path.weights], (mult_a, mult_b, mult_out))
        cg = tc.constant(table.dense(path.l1, path.l2, path.l3))
        term = tc.einsum("eui,evj,ijk,uvw->ewk", blocks_a[path.i], blocks_b[path.j], cg, w)
        out_blocks[path.k] = term if out_blocks[path.k] is None else out_blocks[path.k] + term

    scaled = [blk * (1.0 / math.sqrt(fan_in)) for blk, fan_in in zip(out_blocks, plan.fan_in)]
    return IrrepsTensor.from_blocks(out_spec, scaled)


# ==============================================================================
# GATE
# ==============================================================================

def gate(x: IrrepsTensor, gate_scalars: IrrepsTensor) -> IrrepsTensor:
    """
    Scalars: SiLU(s). Each l>0 channel c: SiLU(g_c) * x_c, broadcast over its 2l+1 components.

    Odd scalars (0o) go through tanh so their parity survives.
    """
    n_gated = x.spec.num_gated_channels
    if any(ir != SCALAR for _, ir in gate_scalars.spec) or gate_scalars.spec.num_channels != n_gated:
        raise ConfigurationError(f"gate for '{x.spec}' needs {n_gated}x0e gate scalars, got '{gate_scalars.spec}'")

    gates = tc.silu(gate_scalars.data) if n_gated else None
    blocks, offset = [], 0
    for index, (mult, ir) in enumerate(x.spec):
        block = x.block(index)
        if ir.l == 0:
            if ir.p == 1:
                blocks.append(tc.silu(block))
            else:
                blocks.append(_tanh(block))
            continue
        g = tc.reshape(gates[:, offset:offset + mult], (x.batch, mult, 1))
        blocks.append(block * g)
        offset += mult
    return IrrepsTensor.from_blocks(x.spec, blocks)


def _tanh(x: tc.Tensor) -> tc.Tensor:
    # tanh(x) = 2*sigmoid(2x) - 1
    return tc.sigmoid(x * 2.0) * 2.0 - 1.0
