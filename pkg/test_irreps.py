"""Irreps grammar, spherical harmonics, CG table and the equivariant building blocks."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modules import tensor_core as tc
from modules.errors import ConfigurationError, ContractError, DimensionError
from modules.irreps import (Irrep, IrrepsSpec, IrrepsTensor, embed_into, equivariant_linear, gate,
                            get_cg_table, linear_plan, spherical_harmonics, tensor_product,
                            tensor_product_plan)
from modules.verification import random_rotation, rotate_irreps, tensor_product_direct, wigner_d

PRESET_STRINGS = ["64x0e+64x1o+64x2e", "32x0e+32x1o", "128x0e+64x1o+32x2e+16x3o", "16x0e+8x1o+4x2e"]

entries = st.lists(st.tuples(st.integers(1, 64), st.integers(0, 4), st.sampled_from("eo")), min_size=1, max_size=5)


def random_irreps(spec: IrrepsSpec, rng, batch: int = 3) -> IrrepsTensor:
    return IrrepsTensor(spec, tc.constant(rng.normal(size=(batch, spec.dim))))


# ==============================================================================
# GRAMMAR
# ==============================================================================

@pytest.mark.parametrize("text", PRESET_STRINGS)
def test_preset_strings_round_trip(text):
    assert str(IrrepsSpec.parse(text)) == text


@given(entries)
def test_grammar_round_trip(items):
    text = "+".join(f"{m}x{l}{p}" for m, l, p in items)
    spec = IrrepsSpec.parse(text)
    assert str(spec) == text
    assert spec.dim == sum(m * (2 * l + 1) for m, l, _ in items)


def test_dim_and_channels():
    spec = IrrepsSpec.parse("64x0e+64x1o+64x2e")
    assert spec.dim == 64 + 192 + 320
    assert spec.num_channels == 192
    assert spec.lmax == 2
    assert spec.num_gated_channels == 128


@pytest.mark.parametrize("text", ["0x0e", "4x1x", "x0e", "4x-1e", "4*0e"])
def test_bad_grammar(text):
    with pytest.raises(ConfigurationError):
        IrrepsSpec.parse(text)


def test_selection_rule_products():
    assert Irrep.parse("1o") * Irrep.parse("1o") == [Irrep(0, 1), Irrep(1, 1), Irrep(2, 1)]
    assert Irrep.parse("2e") * Irrep.parse("1o") == [Irrep(1, -1), Irrep(2, -1), Irrep(3, -1)]


# ==============================================================================
# SPHERICAL HARMONICS
# ==============================================================================

def test_harmonics_along_z():
    y = spherical_harmonics(2, [[0.0, 0.0, 1.0]]).numpy()[0]
    assert y[0] == 1.0
    np.testing.assert_allclose(y[1:4], [0.0, math.sqrt(3.0), 0.0], atol=1e-15)
    np.testing.assert_allclose(y[4:9], [0.0, 0.0, math.sqrt(5.0), 0.0, 0.0], atol=1e-12)


def test_l1_is_scaled_yzx(rng):
    u = rng.normal(size=(10, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    y = spherical_harmonics(1, u).numpy()
    np.testing.assert_allclose(y[:, 1:4], math.sqrt(3.0) * u[:, [1, 2, 0]], atol=1e-14)


def test_component_normalization(rng):
    u = rng.normal(size=(20, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    y = spherical_harmonics(4, u).numpy()
    for l in range(5):
        block = y[:, l * l:(l + 1) ** 2]
        np.testing.assert_allclose(np.linalg.norm(block, axis=1), math.sqrt(2 * l + 1), rtol=1e-12)


def test_harmonics_need_unit_vectors():
    with pytest.raises(ContractError):
        spherical_harmonics(1, [[1.0, 1.0, 0.0]])


def test_wigner_l1_is_permuted_rotation():
    R = random_rotation(3).rotation
    perm = [1, 2, 0]
    np.testing.assert_allclose(wigner_d(1, R), R[perm][:, perm], atol=1e-12)


@pytest.mark.parametrize("l", [0, 1, 2, 3, 4])
def test_wigner_homomorphism(l):
    R1, R2 = random_rotation(1).rotation, random_rotation(2).rotation
    np.testing.assert_allclose(wigner_d(l, R1 @ R2), wigner_d(l, R1) @ wigner_d(l, R2), atol=1e-9)
    D = wigner_d(l, R1)
    np.testing.assert_allclose(D @ D.T, np.eye(2 * l + 1), atol=1e-9)


# ==============================================================================
# CG TABLE
# ==============================================================================

@pytest.mark.parametrize("l1,l2", [(0, 0), (1, 1), (1, 2), (2, 2), (1, 3), (2, 1)])
def test_cg_columns_orthonormal(l1, l2):
    table = get_cg_table()
    columns = [table.dense(l1, l2, l3).reshape(-1, 2 * l3 + 1)
               for l3 in range(abs(l1 - l2), min(l1 + l2, table.lmax) + 1)]
    M = np.concatenate(columns, axis=1)
    np.testing.assert_allclose(M.T @ M, np.eye(M.shape[1]), atol=1e-12)


def test_cg_scalar_coupling_is_dot_product():
    np.testing.assert_allclose(get_cg_table().dense(1, 1, 0)[:, :, 0], np.eye(3) / math.sqrt(3.0), atol=1e-15)


def test_cg_selection_rule_enforced():
    table = get_cg_table()
    assert not table.allowed(1, 1, 3)
    with pytest.raises(ConfigurationError):
        table.dense(1, 1, 3)
    with pytest.raises(ConfigurationError):
        table.dense(5, 0, 5)


def test_cg_entries_match_dense():
    index, values = get_cg_table().entries(1, 2, 1)
    dense = get_cg_table().dense(1, 2, 1)
    assert len(values) == np.count_nonzero(dense)
    np.testing.assert_allclose(dense[tuple(index.T)], values)


# ==============================================================================
# LINEAR / TENSOR PRODUCT / GATE
# ==============================================================================

def test_linear_identity(rng):
    spec = IrrepsSpec.parse("2x0e+1x1o")
    x = random_irreps(spec, rng)
    out = equivariant_linear(x, spec, tc.constant([1.0, 0.0, 0.0, 1.0, 1.0]))
    np.testing.assert_allclose(out.numpy(), x.numpy())


def test_linear_mixes_scalars_with_bias():
    x = IrrepsTensor(IrrepsSpec.parse("2x0e"), tc.constant([[1.0, 2.0]]))
    out = equivariant_linear(x, IrrepsSpec.parse("1x0e"), tc.constant([3.0, 4.0]), bias=tc.constant([0.5]))
    np.testing.assert_allclose(out.numpy(), [[11.5]])


def test_linear_never_mixes_irreps():
    with pytest.raises(ConfigurationError):
        linear_plan(IrrepsSpec.parse("4x0e"), IrrepsSpec.parse("2x1o"))
    x = IrrepsTensor.zeros(IrrepsSpec.parse("2x0e"), 1)
    with pytest.raises(DimensionError):
        equivariant_linear(x, IrrepsSpec.parse("1x0e"), tc.constant([1.0]))


def test_scalar_product():
    a = IrrepsTensor(IrrepsSpec.parse("1x0e"), tc.constant([[2.0], [-1.0]]))
    b = IrrepsTensor(IrrepsSpec.parse("1x0e"), tc.constant([[3.0], [5.0]]))
    out = tensor_product(a, b, IrrepsSpec.parse("1x0e"), tc.constant([1.0]))
    np.testing.assert_allclose(out.numpy(), [[6.0], [-5.0]])


def test_vector_product_to_scalar_is_scaled_dot(rng):
    va, vb = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    spec = IrrepsSpec.parse("1x1o")
    out = tensor_product(IrrepsTensor(spec, tc.constant(va)), IrrepsTensor(spec, tc.constant(vb)),
                         IrrepsSpec.parse("1x0e"), tc.constant([1.0]))
    np.testing.assert_allclose(out.numpy()[:, 0], np.sum(va * vb, axis=1) / math.sqrt(3.0), atol=1e-14)


def test_unreachable_output_irrep():
    with pytest.raises(ConfigurationError):
        tensor_product_plan(IrrepsSpec.parse("1x0e"), IrrepsSpec.parse("1x0e"), IrrepsSpec.parse("1x1o"))
    with pytest.raises(ConfigurationError):
        tensor_product_plan(IrrepsSpec.parse("1x1o"), IrrepsSpec.parse("1x1o"), IrrepsSpec.parse("1x0o"))


def test_path_lmax_limits_paths():
    full = tensor_product_plan(IrrepsSpec.parse("1x0e+1x1o+1x2e"), IrrepsSpec.parse("1x0e+1x1o+1x2e"),
                               IrrepsSpec.parse("1x0e+1x1o"))
    cut = tensor_product_plan(IrrepsSpec.parse("1x0e+1x1o+1x2e"), IrrepsSpec.parse("1x0e+1x1o+1x2e"),
                              IrrepsSpec.parse("1x0e+1x1o"), 1)
    assert len(cut.paths) < len(full.paths)
    assert all(max(p.l1, p.l2, p.l3) <= 1 for p in cut.paths)


def test_tensor_product_matches_direct_sum(rng):
    spec_a, spec_b = IrrepsSpec.parse("2x0e+2x1o"), IrrepsSpec.parse("1x0e+1x1o+1x2e")
    out_spec = IrrepsSpec.parse("2x0e+2x1o+1x2e")
    plan = tensor_product_plan(spec_a, spec_b, out_spec)
    weights = plan.init_weights(rng)
    a, b = rng.normal(size=(5, spec_a.dim)), rng.normal(size=(5, spec_b.dim))
    fast = tensor_product(IrrepsTensor(spec_a, tc.constant(a)), IrrepsTensor(spec_b, tc.constant(b)),
                          out_spec, tc.constant(weights)).numpy()
    direct = tensor_product_direct(a, spec_a, b, spec_b, out_spec, weights)
    np.testing.assert_allclose(fast, direct, atol=1e-12)


def test_tensor_product_is_equivariant(rng):
    spec_a, spec_b = IrrepsSpec.parse("2x0e+1x1o+1x2e"), IrrepsSpec.spherical_harmonics(2)
    out_spec = IrrepsSpec.parse("2x0e+2x1o+1x2e")
    weights = tc.constant(tensor_product_plan(spec_a, spec_b, out_spec).init_weights(rng))
    R = random_rotation(7).rotation
    a, b = rng.normal(size=(3, spec_a.dim)), rng.normal(size=(3, spec_b.dim))

    def tp(x, y):
        return tensor_product(IrrepsTensor(spec_a, tc.constant(x)), IrrepsTensor(spec_b, tc.constant(y)),
                              out_spec, weights).numpy()

    rotated_inputs = tp(rotate_irreps(a, spec_a, R), rotate_irreps(b, spec_b, R))
    np.testing.assert_allclose(rotated_inputs, rotate_irreps(tp(a, b), out_spec, R), atol=1e-10)


def test_zero_gate_zeroes_vectors(rng):
    spec = IrrepsSpec.parse("1x0e+2x1o")
    x = random_irreps(spec, rng, batch=2)
    gates = IrrepsTensor(IrrepsSpec.parse("2x0e"), tc.constant([[0.0, 1.0], [0.0, 1.0]]))
    out = gate(x, gates).numpy()
    s = x.numpy()[:, 0]
    np.testing.assert_allclose(out[:, 0], s / (1.0 + np.exp(-s)), rtol=1e-12)
    np.testing.assert_allclose(out[:, 1:4], 0.0)
    silu_one = 1.0 / (1.0 + math.exp(-1.0))
    np.testing.assert_allclose(out[:, 4:7], x.numpy()[:, 4:7] * silu_one, rtol=1e-12)


def test_gate_needs_one_scalar_per_channel(rng):
    x = random_irreps(IrrepsSpec.parse("1x0e+2x1o"), rng)
    with pytest.raises(ConfigurationError):
        gate(x, IrrepsTensor.zeros(IrrepsSpec.parse("1x0e"), x.batch))


def test_gate_is_equivariant(rng):
    spec = IrrepsSpec.parse("2x0e+2x1o+1x2e")
    x = rng.normal(size=(4, spec.dim))
    g = IrrepsTensor(IrrepsSpec.parse("3x0e"), tc.constant(rng.normal(size=(4, 3))))
    R = random_rotation(11).rotation
    rotated_first = gate(IrrepsTensor(spec, tc.constant(rotate_irreps(x, spec, R))), g).numpy()
    rotated_after = rotate_irreps(gate(IrrepsTensor(spec, tc.constant(x)), g).numpy(), spec, R)
    np.testing.assert_allclose(rotated_first, rotated_after, atol=1e-12)


def test_embed_into_pads_missing_entries(rng):
    x = random_irreps(IrrepsSpec.parse("2x0e"), rng, batch=2)
    out = embed_into(x, IrrepsSpec.parse("2x0e+1x1o"))
    np.testing.assert_allclose(out.numpy()[:, :2], x.numpy())
    np.testing.assert_allclose(out.numpy()[:, 2:], 0.0)
    with pytest.raises(ConfigurationError):
        embed_into(x, IrrepsSpec.parse("1x1o"))
