"""MLANet forward pass: shapes, symmetries and the attention building blocks."""

import numpy as np
import pytest

from modules import tensor_core as tc
from modules.atomic_graph import AtomicStructure, build_graph, collate
from modules.config import ModelConfig
from modules.datasets import molecule, random_cluster
from modules.errors import ConfigurationError, DataError
from modules.irreps import IrrepsSpec, IrrepsTensor, linear_plan, spherical_harmonics
from modules.mlanet_model import (MLANet, channel_norms, edge_features, head_expansion, head_spec,
                                  multi_perspective_pool, segment_softmax)
from modules.verification import gradcheck, model_equivariance_error, random_rotation


@pytest.fixture
def model(small_config):
    return MLANet(small_config)


def test_predict_shapes(model, water):
    out = model.predict(water)
    assert isinstance(out["energy"], float)
    assert out["forces"].shape == (3, 3)
    assert np.all(np.isfinite(out["forces"]))
    assert "stress" not in out


def test_same_seed_same_parameters(small_config):
    a, b = MLANet(small_config), MLANet(small_config)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rigid_motion_invariance(model, seed):
    s = random_cluster(np.random.default_rng(seed), 5)
    energy_err, force_err = model_equivariance_error(model, s, random_rotation(seed, translation_scale=2.0))
    assert energy_err < 1e-8
    assert force_err < 1e-8


def test_periodic_rigid_motion_invariance(model):
    s = random_cluster(np.random.default_rng(4), 4, periodic=True)
    energy_err, force_err = model_equivariance_error(model, s, random_rotation(9, translation_scale=1.0))
    assert energy_err < 1e-8
    assert force_err < 1e-8


def test_lattice_translation_of_one_atom_changes_nothing(model):
    s = random_cluster(np.random.default_rng(6), 4, periodic=True)
    moved = s.positions.copy()
    moved[0] += 2 * s.cell[0] - s.cell[2]
    before, after = model.predict(s), model.predict(s.with_positions(moved))
    assert after["energy"] == pytest.approx(before["energy"], abs=1e-10)
    np.testing.assert_allclose(after["forces"], before["forces"], atol=1e-10)


def test_inversion_flips_forces(model):
    s = molecule("methanol")
    before = model.predict(s)
    after = model.predict(s.with_positions(-s.positions))
    assert after["energy"] == pytest.approx(before["energy"], abs=1e-10)
    np.testing.assert_allclose(after["forces"], -before["forces"], atol=1e-10)


def test_permutation_equivariance(model):
    s = molecule("methanol")
    perm = np.array([3, 0, 5, 1, 4, 2])
    shuffled = AtomicStructure(positions=s.positions[perm], species=s.species[perm])
    before, after = model.predict(s), model.predict(shuffled)
    assert after["energy"] == pytest.approx(before["energy"], abs=1e-10)
    np.testing.assert_allclose(after["forces"], before["forces"][perm], atol=1e-10)


def test_isolated_atom_has_zero_force(model):
    out = model.predict(AtomicStructure(positions=[[0.0, 0.0, 0.0]], species=[8]))
    np.testing.assert_array_equal(out["forces"], np.zeros((1, 3)))
    assert np.isfinite(out["energy"])


def test_node_features_only_see_the_receptive_field(model):
    # 2 layers at r_cut 4.0: atom 0 sees nothing beyond 8 Å
    chain = np.array([[3.0 * k, 0.0, 0.0] for k in range(6)])
    moved = chain.copy()
    moved[5] += [0.0, 0.3, 0.0]
    outputs = []
    for positions in (chain, moved):
        with tc.no_grad():
            outputs.append(model.forward(model.graph_for(AtomicStructure(positions, [1] * 6))))
    np.testing.assert_allclose(outputs[1].node_features.data.numpy()[0], outputs[0].node_features.data.numpy()[0],
                               rtol=0, atol=1e-14)
    assert not np.allclose(outputs[1].node_features.data.numpy()[4], outputs[0].node_features.data.numpy()[4])


def test_unknown_species(model):
    with pytest.raises(DataError):
        model.predict(AtomicStructure(positions=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], species=[1, 9]))


def test_batched_forward_matches_single(model, water):
    ammonia = molecule("ammonia")
    graphs = [build_graph(s, model.config.r_cut, model.config.n_rbf) for s in (water, ammonia)]
    with tc.no_grad():
        batch = model.forward(collate(graphs))
    np.testing.assert_allclose(batch.energy.numpy(), [model.predict(water)["energy"],
                                                      model.predict(ammonia)["energy"]], atol=1e-12)
    np.testing.assert_allclose(batch.forces.numpy()[3:], model.predict(ammonia)["forces"], atol=1e-12)


def test_reference_energies_shift_total(model, water):
    base = model.predict(water)["energy"]
    shift = np.zeros(model.config.z_max + 1)
    shift[1], shift[8] = -0.5, -2.0
    model.set_reference_energies(shift)
    assert model.predict(water)["energy"] == pytest.approx(base - 3.0, abs=1e-12)
    with pytest.raises(ConfigurationError):
        model.set_reference_energies(np.zeros(3))


def test_stress_head_and_extra_scalars(water):
    config = ModelConfig(hidden_irreps="4x0e+2x1o", r_cut=4.0, embed_dim=4, mlp_hidden=8, stress=True,
                         long_range=True, charge=True)
    out = MLANet(config).predict(AtomicStructure(water.positions, water.species, total_charge=0))
    assert out["stress"].shape == (6,)


def test_multi_head_model(water):
    config = ModelConfig(hidden_irreps="4x0e+2x1o", r_cut=4.0, embed_dim=4, mlp_hidden=8, n_heads=2)
    s = random_cluster(np.random.default_rng(3), 5)
    energy_err, force_err = model_equivariance_error(MLANet(config), s, random_rotation(5))
    assert energy_err < 1e-8 and force_err < 1e-8


def test_gradients_match_finite_differences(model, water):
    error, per_param = gradcheck(model, water, max_per_param=3)
    assert error < 1e-4
    assert set(per_param) == set(model.params)


def test_state_dict_round_trip(small_config, water):
    a = MLANet(small_config)
    b = MLANet(ModelConfig(**{**small_config.__dict__, "seed": 7}))
    b.load_state_dict(a.state_dict())
    assert b.predict(water)["energy"] == a.predict(water)["energy"]
    with pytest.raises(ConfigurationError):
        b.load_state_dict({"embedding": a.state_dict()["embedding"]})


@pytest.mark.parametrize("kwargs", [
    {"hidden_irreps": "4x1o"},
    {"hidden_irreps": "4x0e+2x2e"},
    {"hidden_irreps": "4x0e+2x1o", "l_max": 2},
    {"hidden_irreps": "3x0e+2x1o", "n_heads": 2},
    {"activation": "relu"},
    {"species": []},
])
def test_invalid_model_configs(kwargs):
    with pytest.raises(ConfigurationError):
        ModelConfig(**kwargs)


def test_head_expansion_slices_channels():
    matrix = head_expansion(IrrepsSpec.parse("2x0e+2x1o"), 2)
    np.testing.assert_array_equal(matrix, [[1, 0, 1, 1, 1, 0, 0, 0], [0, 1, 0, 0, 0, 1, 1, 1]])


def test_segment_softmax_normalizes_per_node():
    logits = tc.constant([[1.0], [2.0], [3.0], [0.5]])
    dst = np.array([0, 0, 1, 0])
    alpha = segment_softmax(logits, dst, 2).numpy()[:, 0]
    assert alpha[[0, 1, 3]].sum() == pytest.approx(1.0)
    assert alpha[2] == pytest.approx(1.0)
    e = np.exp([1.0, 2.0, 0.5])
    np.testing.assert_allclose(alpha[[0, 1, 3]], e / e.sum())


def test_pooling_perspectives():
    spec = IrrepsSpec.parse("1x0e+1x1o")
    x = IrrepsTensor(spec, tc.constant([[1.0, 0.0, 3.0, 4.0], [3.0, 0.0, 0.0, 0.0], [5.0, 1.0, 0.0, 0.0]]))
    pooled = multi_perspective_pool(x, np.array([0, 0, 1]), np.array([2, 1]))
    np.testing.assert_allclose(pooled.add.numpy()[:, 0], [4.0, 5.0])
    np.testing.assert_allclose(pooled.mean.numpy()[:, 0], [2.0, 5.0])
    np.testing.assert_allclose(pooled.max.numpy(), [[3.0, 5.0], [5.0, 1.0]], atol=1e-5)
    norms = channel_norms(x).numpy()[:, 0]
    np.testing.assert_allclose(norms, [5.0, 0.0, 1.0], atol=1e-5)


def test_dimer_forces_lie_along_the_bond(model):
    axis = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
    out = model.predict(AtomicStructure(positions=[np.zeros(3), 1.1 * axis], species=[6, 6]))
    for f in out["forces"]:
        np.testing.assert_allclose(np.cross(f, axis), 0.0, atol=1e-12)


def test_each_head_owns_its_edge_projection(rng):
    hidden = IrrepsSpec.parse("4x0e+2x1o")
    per_head = head_spec(hidden, 2)
    assert str(per_head) == "2x0e+1x1o"
    directions = rng.normal(size=(5, 3))
    sh = spherical_harmonics(1, directions / np.linalg.norm(directions, axis=1, keepdims=True))
    rbf = tc.constant(rng.normal(size=(5, 8)))
    w_raw = rng.normal(size=(2, linear_plan(IrrepsSpec.scalars(8), IrrepsSpec.parse("2x0e")).weight_numel))
    w_sh = rng.normal(size=(2, linear_plan(sh.spec, per_head).weight_numel))

    base = edge_features(rbf, sh, hidden, tc.constant(w_raw), tc.constant(w_sh), n_heads=2).numpy()
    w_raw[1] += 1.0
    w_sh[1] += 1.0
    bumped = edge_features(rbf, sh, hidden, tc.constant(w_raw), tc.constant(w_sh), n_heads=2).numpy()

    owned = head_expansion(hidden, 2)[1].astype(bool)
    diff = np.abs(bumped - base)
    np.testing.assert_array_equal(diff[:, ~owned], 0.0)
    assert np.all(diff[:, owned].max(axis=0) > 0.0)


def test_multi_head_edge_weights_have_one_row_per_head():
    config = ModelConfig(hidden_irreps="4x0e+2x1o", r_cut=4.0, embed_dim=4, mlp_hidden=8, n_heads=2)
    model = MLANet(config)
    for name in ("layers.0.W_edge_raw", "layers.0.W_edge_sh"):
        rows = model.params[name].data
        assert rows.shape[0] == 2
        assert not np.allclose(rows[0], rows[1])
