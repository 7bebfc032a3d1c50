# modules/mlanet_model.py

"""
MLANet Model Module

Input lifting, stacked dual-path attention message-passing layers (an energy
trunk followed by force layers), multi-perspective pooling and the energy,
force and stress heads.

All learnable weights live in one ordered name -> Tensor dict so training,
checkpointing and gradient checks can walk them uniformly.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules import tensor_core as tc
from modules.atomic_graph import AtomGraph, AtomicStructure, build_graph, embed_species
from modules.config import ModelConfig
from modules.errors import ConfigurationError, ContractError, DataError
from modules.irreps import (
    SCALAR,
    IrrepsSpec,
    IrrepsTensor,
    channel_expansion,
    embed_into,
    equivariant_linear,
    gate,
    linear_plan,
    spherical_harmonics,
    tensor_product,
    tensor_product_plan,
)

LOG = logging.getLogger(__name__)

NORM_EPS = 1e-12
FORCE_IRREPS = IrrepsSpec.parse("1x1o")

# 1o components are stored as m = -1, 0, +1, i.e. (y, z, x)
_CARTESIAN_FROM_1O = [2, 0, 1]


# ==============================================================================
# OUTPUT CONTAINERS
# ==============================================================================

@dataclass
class PooledFeatures:
    add: IrrepsTensor     # [G, dim]
    mean: IrrepsTensor    # [G, dim]
    max: tc.Tensor        # [G, n_0e + n_gated]

    def scalars(self) -> tc.Tensor:
        """Rotation-invariant part: 0e sums, 0e means and the max block."""
        return tc.concat([self.add.scalars(), self.mean.scalars(), self.max], axis=1)

    def vector(self) -> tc.Tensor:
        """v_add ⊕ v_mean ⊕ v_max."""
        return tc.concat([self.add.data, self.mean.data, self.max], axis=1)


@dataclass
class ModelOutput:
    energy: tc.Tensor                 # [G] eV
    forces: tc.Tensor                 # [N, 3] eV/Å
    stress: Optional[tc.Tensor]       # [G, 6] Voigt
    node_features: IrrepsTensor       # force-path node features
    pooled: PooledFeatures


@dataclass
class EdgeContext:
    src: np.ndarray
    dst: np.ndarray
    n_nodes: int
    rbf: tc.Tensor
    sh: IrrepsTensor


# ==============================================================================
# BUILDING BLOCKS
# ==============================================================================

@lru_cache(maxsize=None)
def head_expansion(spec: IrrepsSpec, n_heads: int) -> np.ndarray:
    """[n_heads, dim] 0/1 matrix; head h owns the h-th contiguous slice of every entry's channels."""
    matrix = np.zeros((n_heads, spec.dim))
    column = 0
    for mult, ir in spec:
        per_head = mult // n_heads
        for channel in range(mult):
            matrix[channel // per_head, column:column + ir.dim] = 1.0
            column += ir.dim
    matrix.flags.writeable = False
    return matrix


@lru_cache(maxsize=None)
def head_spec(spec: IrrepsSpec, n_heads: int) -> IrrepsSpec:
    """The slice of `spec` one head owns: every multiplicity divided by n_heads."""
    return IrrepsSpec(tuple((mult // n_heads, ir) for mult, ir in spec))


def merge_heads(parts: Sequence[IrrepsTensor], spec: IrrepsSpec) -> IrrepsTensor:
    """Interleave per-head tensors back into `spec`, head by head inside each entry."""
    if len(parts) == 1:
        return IrrepsTensor(spec, parts[0].data)
    pieces = []
    for entry in parts[0].spec.slices():
        pieces.extend(part.data[:, entry] for part in parts)
    return IrrepsTensor(spec, tc.concat(pieces, axis=1))


def lift_input(node_scalars: IrrepsTensor, hidden: IrrepsSpec, weights: tc.Tensor) -> IrrepsTensor:
    """Linear map into the 0e entries of `hidden`; l>0 entries start at zero."""
    if any(ir != SCALAR for _, ir in node_scalars.spec):
        raise ContractError(f"lift_input expects scalars only, got '{node_scalars.spec}'")
    target = hidden.filter(lambda ir: ir == SCALAR)
    return embed_into(equivariant_linear(node_scalars, target, weights), hidden)


def edge_features(rbf: tc.Tensor, sh: IrrepsTensor, hidden: IrrepsSpec,
                  w_raw: tc.Tensor, w_sh: tc.Tensor, n_heads: int = 1) -> IrrepsTensor:
    """
    e_ij = W_edge_raw(rbf) + W_edge_sh(Y(r̂_ij)), zero-padded into `hidden`.

    `w_raw` and `w_sh` carry one weight row per head; head h only writes the
    channels `head_expansion` assigns to it.
    """
    per_head = head_spec(hidden, n_heads)
    radial_in = IrrepsTensor(IrrepsSpec.scalars(rbf.shape[1]), rbf)
    sh_irreps = {ir for _, ir in sh.spec}
    parts = []
    for h in range(n_heads):
        radial = equivariant_linear(radial_in, per_head.filter(lambda ir: ir == SCALAR), w_raw[h])
        angular = equivariant_linear(sh, per_head.filter(lambda ir: ir in sh_irreps), w_sh[h])
        parts.append(embed_into(radial, per_head) + embed_into(angular, per_head))
    return merge_heads(parts, hidden)


def attention_logits(q: IrrepsTensor, k: IrrepsTensor, weights: tc.Tensor, n_heads: int,
                     temperature: float, path_lmax: Optional[int] = None) -> tc.Tensor:
    """Per-head mean of the 0e outputs of TP(q, k), divided by the temperature: [E, n_heads]."""
    n_scalar = q.spec.num_scalar_channels
    scores = tensor_product(q, k, IrrepsSpec.scalars(n_scalar), weights, path_lmax)
    per_head = tc.reshape(scores.data, (q.batch, n_heads, n_scalar // n_heads))
    return per_head.mean(axis=2) * (1.0 / temperature)


def segment_softmax(logits: tc.Tensor, dst: np.ndarray, n_nodes: int) -> tc.Tensor:
    """Softmax over the incoming edges of each destination node, per head."""
    if logits.shape[0] == 0:
        return logits
    shift = np.full((n_nodes, logits.shape[1]), -np.inf)
    np.maximum.at(shift, dst, logits.data)
    weights = tc.exp(logits - tc.constant(shift[dst]))
    totals = tc.scatter_add(weights, dst, n_nodes)
    return weights / tc.index_select(totals, dst)


def dual_path_message(q: IrrepsTensor, v: IrrepsTensor, alpha: tc.Tensor, dst: np.ndarray, n_nodes: int,
                      weights: tc.Tensor, n_heads: int, path_lmax: Optional[int] = None) -> IrrepsTensor:
    """
    m_ij = β⊙v_j + (1-β)⊙q_i with one β per channel, then m_i = Σ_j α_ij·m_ij.
    """
    spec = q.spec
    gates = tensor_product(q, v, IrrepsSpec.scalars(spec.num_channels), weights, path_lmax)
    beta = tc.sigmoid(gates.data) @ tc.constant(channel_expansion(spec))
    message = q.data + beta * (v.data - q.data)
    attention = alpha @ tc.constant(head_expansion(spec, n_heads))
    return IrrepsTensor(spec, tc.scatter_add(attention * message, dst, n_nodes))


def _gated(t: IrrepsTensor, spec: IrrepsSpec) -> IrrepsTensor:
    # t carries `spec` followed by one 0e gate per l>0 channel
    n_gates = spec.num_gated_channels
    body = IrrepsTensor(spec, t.data[:, :spec.dim])
    gates = IrrepsTensor(IrrepsSpec.scalars(n_gates), t.data[:, spec.dim:])
    return gate(body, gates)


def node_update(x: IrrepsTensor, m: IrrepsTensor, w_trans: tc.Tensor) -> IrrepsTensor:
    """x' = Gate(W_trans·m) + x."""
    out_spec = x.spec + IrrepsSpec.scalars(x.spec.num_gated_channels)
    return _gated(equivariant_linear(m, out_spec, w_trans), x.spec) + x


def channel_norms(x: IrrepsTensor) -> Optional[tc.Tensor]:
    """Per-channel sqrt(|x_c|² + eps) for every l>0 channel: [batch, n_gated]."""
    norms = []
    for index, (_, ir) in enumerate(x.spec):
        if ir.l == 0:
            continue
        block = x.block(index)
        norms.append(tc.sqrt((block * block).sum(axis=2) + NORM_EPS))
    if not norms:
        return None
    return norms[0] if len(norms) == 1 else tc.concat(norms, axis=1)


def multi_perspective_pool(x: IrrepsTensor, graph_index: np.ndarray, atoms_per_graph: np.ndarray) -> PooledFeatures:
    counts = np.asarray(atoms_per_graph, dtype=np.int64)
    n_graphs = counts.shape[0]
    if n_graphs == 0 or np.any(counts == 0):
        raise ContractError(f"cannot pool an empty graph (atoms per graph: {counts.tolist()})")

    summed = tc.scatter_add(x.data, graph_index, n_graphs)
    mean = summed / tc.constant(counts[:, None].astype(np.float64))

    invariants = [x.scalars()]
    norms = channel_norms(x)
    if norms is not None:
        invariants.append(norms)
    max_in = invariants[0] if len(invariants) == 1 else tc.concat(invariants, axis=1)
    return PooledFeatures(add=IrrepsTensor(x.spec, summed),
                          mean=IrrepsTensor(x.spec, mean),
                          max=tc.segment_max(max_in, graph_index, n_graphs))


def mlp(x: tc.Tensor, layers: Sequence[Tuple[tc.Tensor, tc.Tensor]]) -> tc.Tensor:
    """SiLU between layers, linear output."""
    for index, (weight, bias) in enumerate(layers):
        x = x @ weight + bias
        if index < len(layers) - 1:
            x = tc.silu(x)
    return x


def energy_head(pooled_scalars: tc.Tensor, layers: Sequence[Tuple[tc.Tensor, tc.Tensor]]) -> tc.Tensor:
    out = mlp(pooled_scalars, layers)
    return tc.reshape(out, (out.shape[0],))


def stress_head(pooled_scalars: tc.Tensor, layers: Sequence[Tuple[tc.Tensor, tc.Tensor]]) -> tc.Tensor:
    """Six Voigt components (xx, yy, zz, yz, xz, xy) per graph."""
    return mlp(pooled_scalars, layers)


def force_head(x: IrrepsTensor, pooled_scalars: tc.Tensor, graph_index: np.ndarray, hidden: IrrepsSpec,
               gated_layers: Sequence[Tuple[tc.Tensor, tc.Tensor]], w_out: tc.Tensor) -> tc.Tensor:
    """
    f_i from x_i ⊕ pooled_scalars[b_i] through gated equivariant layers and a 1x1o readout.
    """
    context = tc.index_select(pooled_scalars, graph_index)
    h = x.concat(IrrepsTensor(IrrepsSpec.scalars(context.shape[1]), context))
    out_spec = hidden + IrrepsSpec.scalars(hidden.num_gated_channels)
    for weight, bias in gated_layers:
        h = _gated(equivariant_linear(h, out_spec, weight, bias), hidden)
    vectors = equivariant_linear(h, FORCE_IRREPS, w_out)
    return vectors.data[:, _CARTESIAN_FROM_1O]


# ==============================================================================
# MESSAGE PASSING LAYER
# ==============================================================================

class MessagePassingLayer:
    """One dual-path attention layer; input and output share `hidden`."""

    WEIGHTS = ("W_q", "W_k", "W_v", "W_edge_raw", "W_edge_sh", "W_att", "W_beta", "W_trans")

    def __init__(self, model: "MLANet", prefix: str):
        self.model = model
        self.prefix = prefix

    def weight(self, name: str) -> tc.Tensor:
        return self.model.params[f"{self.prefix}.{name}"]

    def __call__(self, x: IrrepsTensor, ctx: EdgeContext) -> IrrepsTensor:
        model = self.model
        hidden = model.hidden
        path_lmax = model.config.tp_path_lmax

        e = edge_features(ctx.rbf, ctx.sh, hidden, self.weight("W_edge_raw"), self.weight("W_edge_sh"),
                          model.n_heads)
        q_node = equivariant_linear(x, hidden, self.weight("W_q"))
        k_node = equivariant_linear(x, hidden, self.weight("W_k"))
        v_node = equivariant_linear(x, hidden, self.weight("W_v"))

        q = q_node.index_select(ctx.dst) + e
        k = k_node.index_select(ctx.src) + e
        v = v_node.index_select(ctx.src)

        logits = attention_logits(q, k, self.weight("W_att"), model.n_heads, model.temperature, path_lmax)
        alpha = segment_softmax(logits, ctx.dst, ctx.n_nodes)
        m = dual_path_message(q, v, alpha, ctx.dst, ctx.n_nodes, self.weight("W_beta"), model.n_heads, path_lmax)
        return node_update(x, m, self.weight("W_trans"))


# ==============================================================================
# MODEL
# ==============================================================================

class MLANet:
    """
    Full network. `forward(graph)` records on the innermost open tape when parameters
    require gradients; wrap inference in `tensor_core.no_grad()`.
    """

    def __init__(self, config: ModelConfig, reference_energies: Optional[np.ndarray] = None):
        self.config = config
        self.hidden = config.hidden_spec
        self.sh_spec = IrrepsSpec.spherical_harmonics(config.l_max)
        self.n_heads = config.n_heads
        n_scalar = self.hidden.num_scalar_channels
        self.temperature = config.temperature or math.sqrt(n_scalar / self.n_heads)
        self.node_input_spec = IrrepsSpec.scalars(config.embed_dim + config.n_extra_scalars)

        self.reference_energies = np.zeros(config.z_max + 1)
        if reference_energies is not None:
            self.set_reference_energies(reference_energies)

        self.params: Dict[str, tc.Tensor] = OrderedDict()
        self._init_parameters(np.random.default_rng(config.seed))

        n_layers = config.n_layers_energy + config.n_layers_force
        self.layers = [MessagePassingLayer(self, f"layers.{i}") for i in range(n_layers)]
        self.energy_layers = self.layers[:config.n_layers_energy]
        self.force_layers = self.layers[config.n_layers_energy:]

        LOG.info(f"✅ MLANet built: hidden={self.hidden}, l_E={config.n_layers_energy}, "
                 f"l_F={config.n_layers_force}, heads={self.n_heads}, {self.num_parameters()} parameters")

    # Parameters ---------------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = tc.parameter(value, name=name)

    def _add_mlp(self, prefix: str, sizes: List[int], rng: np.random.Generator) -> None:
        for index, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self._add(f"{prefix}.{index}.weight", rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in))
            self._add(f"{prefix}.{index}.bias", np.zeros(fan_out))

    def _init_parameters(self, rng: np.random.Generator) -> None:
        config = self.config
        hidden = self.hidden
        scalars = hidden.filter(lambda ir: ir == SCALAR)
        sh_irreps = {ir for _, ir in self.sh_spec}
        per_head = head_spec(hidden, config.n_heads)
        raw_plan = linear_plan(IrrepsSpec.scalars(config.n_rbf), per_head.filter(lambda ir: ir == SCALAR))
        sh_plan = linear_plan(self.sh_spec, per_head.filter(lambda ir: ir in sh_irreps))
        gated_spec = hidden + IrrepsSpec.scalars(hidden.num_gated_channels)
        path_lmax = config.tp_path_lmax

        self._add("embedding", rng.standard_normal((config.z_max, config.embed_dim)))
        self._add("lift.weight", linear_plan(self.node_input_spec, scalars).init_weights(rng))

        for i in range(config.n_layers_energy + config.n_layers_force):
            prefix = f"layers.{i}"
            for name in ("W_q", "W_k", "W_v"):
                self._add(f"{prefix}.{name}", linear_plan(hidden, hidden).init_weights(rng))
            self._add(f"{prefix}.W_edge_raw", np.stack([raw_plan.init_weights(rng) for _ in range(config.n_heads)]))
            self._add(f"{prefix}.W_edge_sh", np.stack([sh_plan.init_weights(rng) for _ in range(config.n_heads)]))
            self._add(f"{prefix}.W_att", tensor_product_plan(
                hidden, hidden, IrrepsSpec.scalars(hidden.num_scalar_channels), path_lmax).init_weights(rng))
            self._add(f"{prefix}.W_beta", tensor_product_plan(
                hidden, hidden, IrrepsSpec.scalars(hidden.num_channels), path_lmax).init_weights(rng))
            self._add(f"{prefix}.W_trans", linear_plan(hidden, gated_spec).init_weights(rng))

        pooled_width = self.pooled_width
        widths = [pooled_width] + [config.mlp_hidden] * config.n_mlp_layers
        self._add_mlp("energy_head", widths + [1], rng)
        if config.stress:
            self._add_mlp("stress_head", widths + [6], rng)

        in_spec = hidden + IrrepsSpec.scalars(pooled_width)
        for i in range(config.n_mlp_layers):
            plan = linear_plan(in_spec, gated_spec)
            self._add(f"force_head.{i}.weight", plan.init_weights(rng))
            self._add(f"force_head.{i}.bias", np.zeros(plan.bias_numel))
            in_spec = hidden
        self._add("force_head.out.weight", linear_plan(in_spec, FORCE_IRREPS).init_weights(rng))

    @property
    def pooled_width(self) -> int:
        n_scalar = self.hidden.num_scalar_channels
        return 3 * n_scalar + self.hidden.num_gated_channels

    def _mlp_layers(self, prefix: str) -> List[Tuple[tc.Tensor, tc.Tensor]]:
        layers, index = [], 0
        while f"{prefix}.{index}.weight" in self.params:
            layers.append((self.params[f"{prefix}.{index}.weight"], self.params[f"{prefix}.{index}.bias"]))
            index += 1
        return layers

    def parameters(self) -> Dict[str, tc.Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, p.data.copy()) for name, p in self.params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = [name for name in self.params if name not in state]
        unexpected = [name for name in state if name not in self.params]
        if missing or unexpected:
            raise ConfigurationError(f"parameter set mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ConfigurationError(f"parameter {name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()
            p.grad = None

    def set_reference_energies(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != self.config.z_max + 1:
            raise ConfigurationError(f"reference energies need {self.config.z_max + 1} entries, got {values.shape[0]}")
        self.reference_energies = values.copy()

    # Forward ------------------------------------------------------------------

    def graph_for(self, structure: AtomicStructure) -> AtomGraph:
        c = self.config
        return build_graph(structure, c.r_cut, c.n_rbf, c.long_range, c.charge)

    def _check_graph(self, graph: AtomGraph) -> AtomGraph:
        unknown = sorted(set(np.unique(graph.node_species).tolist()) - set(self.config.species))
        if unknown:
            raise DataError(f"unknown species z={unknown[0]} (model covers {self.config.species})")
        if abs(graph.r_cut - self.config.r_cut) > 1e-12:
            raise ConfigurationError(f"graph built with r_cut={graph.r_cut}, model expects {self.config.r_cut}")
        if graph.edge_rbf is None:
            graph = graph.with_rbf(self.config.n_rbf)
        n_extra = self.config.n_extra_scalars
        width = 0 if graph.node_extra is None else graph.node_extra.shape[1]
        if width != n_extra:
            raise DataError(f"graph carries {width} extra node scalars, model expects {n_extra}")
        return graph

    def node_inputs(self, graph: AtomGraph) -> IrrepsTensor:
        emb = embed_species(graph.node_species, self.config.embed_dim, self.params["embedding"])
        if graph.node_extra is None:
            return emb
        data = tc.concat([emb.data, tc.constant(graph.node_extra)], axis=1)
        return IrrepsTensor(self.node_input_spec, data)

    def forward(self, graph: AtomGraph) -> ModelOutput:
        graph = self._check_graph(graph)
        ctx = EdgeContext(
            src=graph.edge_src,
            dst=graph.edge_dst,
            n_nodes=graph.n_nodes,
            rbf=tc.constant(graph.edge_rbf),
            sh=spherical_harmonics(self.config.l_max, graph.edge_unit if graph.n_edges else np.zeros((0, 3))),
        )

        x = lift_input(self.node_inputs(graph), self.hidden, self.params["lift.weight"])
        for layer in self.energy_layers:
            x = layer(x, ctx)
        x_energy = x
        for layer in self.force_layers:
            x = layer(x, ctx)

        pooled = multi_perspective_pool(x_energy, graph.graph_index, graph.atoms_per_graph)
        invariants = pooled.scalars()

        energy = energy_head(invariants, self._mlp_layers("energy_head"))
        energy = energy + tc.constant(self.reference_shift(graph))

        force_layers = [(self.params[f"force_head.{i}.weight"], self.params[f"force_head.{i}.bias"])
                        for i in range(self.config.n_mlp_layers)]
        forces = force_head(x, invariants, graph.graph_index, self.hidden, force_layers,
                            self.params["force_head.out.weight"])

        stress = stress_head(invariants, self._mlp_layers("stress_head")) if self.config.stress else None
        return ModelOutput(energy=energy, forces=forces, stress=stress, node_features=x, pooled=pooled)

    __call__ = forward

    def reference_shift(self, graph: AtomGraph) -> np.ndarray:
        per_atom = self.reference_energies[graph.node_species]
        return np.bincount(graph.graph_index, weights=per_atom, minlength=graph.n_graphs)

    def predict(self, structure: AtomicStructure) -> Dict[str, np.ndarray]:
        """Energy, forces (and stress) for one structure without recording gradients."""
        with tc.no_grad():
            out = self.forward(self.graph_for(structure))
        result = {"energy": float(out.energy.data[0]), "forces": out.forces.data.copy()}
        if out.stress is not None:
            result["stress"] = out.stress.data[0].copy()
        return result
