"""Tensor core: forward values, backward rules and error contracts."""

import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from modules import tensor_core as tc
from modules.errors import ContractError, DimensionError, TensorIndexError

finite = st.floats(min_value=-3.0, max_value=3.0, allow_nan=False)


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (f(up) - f(down)) / (2 * h)
    return grad


def test_matmul_values():
    out = tc.matmul(tc.constant([[1.0, 2.0], [3.0, 4.0]]), tc.constant([[0.0], [1.0]]))
    np.testing.assert_allclose(out.numpy(), [[2.0], [4.0]])


def test_matmul_identity():
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_allclose(tc.matmul(tc.constant(a), tc.constant(np.eye(3))).numpy(), a)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        tc.matmul(tc.zeros((2, 3)), tc.zeros((2, 3)))


def test_matmul_gradient_matches_finite_difference(rng):
    a0 = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    with tc.Tape():
        a = tc.parameter(a0)
        loss = tc.sum_reduce(tc.matmul(a, tc.constant(b)) * tc.matmul(a, tc.constant(b)))
        tc.backward(loss)
    expected = numeric_grad(lambda x: float(np.sum((x @ b) ** 2)), a0)
    np.testing.assert_allclose(a.grad, expected, rtol=1e-6, atol=1e-8)


def test_activations_at_zero():
    assert tc.silu(tc.constant(0.0)).item() == 0.0
    assert tc.sigmoid(tc.constant(0.0)).item() == 0.5


@given(arrays(np.float64, 5, elements=finite))
def test_silu_gradient(x0):
    with tc.Tape():
        x = tc.parameter(x0)
        tc.backward(tc.sum_reduce(tc.silu(x)))
    s = 1.0 / (1.0 + np.exp(-x0))
    np.testing.assert_allclose(x.grad, s * (1.0 + x0 * (1.0 - s)), rtol=1e-10, atol=1e-12)


def test_scatter_add_sums_rows():
    rows = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    out = tc.scatter_add(tc.constant(rows), np.array([0, 0, 1]), 2)
    np.testing.assert_allclose(out.numpy(), [[4.0, 6.0], [5.0, 6.0]])


def test_scatter_add_gradient_gathers():
    with tc.Tape():
        x = tc.parameter(np.ones((3, 2)))
        out = tc.scatter_add(x, np.array([0, 0, 1]), 2)
        tc.backward(tc.sum_reduce(out * tc.constant([[1.0, 1.0], [10.0, 10.0]])))
    np.testing.assert_allclose(x.grad, [[1.0, 1.0], [1.0, 1.0], [10.0, 10.0]])


def test_scatter_add_index_out_of_range():
    with pytest.raises(TensorIndexError):
        tc.scatter_add(tc.zeros((3, 2)), np.array([0, 1, 2]), 2)
    with pytest.raises(TensorIndexError):
        tc.scatter_add(tc.zeros((2, 2)), np.array([0, -1]), 2)


def test_index_select_gradient_accumulates_repeats():
    with tc.Tape():
        x = tc.parameter(np.arange(4.0).reshape(2, 2))
        tc.backward(tc.sum_reduce(tc.index_select(x, np.array([1, 1, 0]))))
    np.testing.assert_allclose(x.grad, [[1.0, 1.0], [2.0, 2.0]])


def test_backward_of_sum_is_ones():
    with tc.Tape():
        w = tc.parameter(np.arange(6.0).reshape(2, 3))
        tc.backward(tc.sum_reduce(w))
    np.testing.assert_allclose(w.grad, np.ones((2, 3)))


def test_backward_of_square_is_twice_input():
    w0 = np.array([1.0, -2.0, 0.5])
    with tc.Tape():
        w = tc.parameter(w0)
        tc.backward(tc.sum_reduce(w * w))
    np.testing.assert_allclose(w.grad, 2 * w0)


def test_repeated_backward_accumulates():
    with tc.Tape():
        w = tc.parameter([1.0, 2.0])
        loss = tc.sum_reduce(w * w)
        tc.backward(loss)
        tc.backward(loss)
    np.testing.assert_allclose(w.grad, [4.0, 8.0])


def test_backward_needs_scalar():
    with tc.Tape():
        w = tc.parameter([1.0, 2.0])
        with pytest.raises(ContractError):
            tc.backward(w * 2.0)


def test_unused_leaf_gets_zero_grad():
    with tc.Tape():
        used = tc.parameter([1.0, 2.0])
        unused = tc.parameter([3.0])
        tc.backward(tc.sum_reduce(used) + tc.sum_reduce(unused) * 0.0)
    np.testing.assert_allclose(unused.grad, [0.0])


def test_no_grad_records_nothing():
    with tc.Tape() as tape:
        w = tc.parameter([1.0, 2.0])
        with tc.no_grad():
            out = w * 3.0
        assert len(tape) == 0
        assert not out.requires_grad
    assert tc.is_grad_enabled()


def test_ops_outside_a_tape_are_not_recorded():
    w = tc.parameter([1.0, 2.0])
    out = tc.sum_reduce(w * w)
    assert tc.current_tape() is None
    assert not out.requires_grad
    with pytest.raises(ContractError):
        tc.backward(out)
    with tc.Tape() as tape:
        tc.backward(tc.sum_reduce(w * w))
        assert len(tape) == 2
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_forward_outside_a_tape_keeps_no_graph(small_config, water):
    from modules.mlanet_model import MLANet

    model = MLANet(small_config)
    out = model.forward(model.graph_for(water))
    assert tc.is_grad_enabled()
    assert tc.current_tape() is None
    assert not out.energy.requires_grad
    assert out.energy._node is None


def test_broadcast_rules():
    assert tc.add(tc.zeros((4, 3)), tc.ones(3)).shape == (4, 3)
    assert tc.mul(tc.zeros((4, 3)), tc.ones((4, 1))).shape == (4, 3)
    assert tc.add(tc.zeros((4, 3)), 1.0).shape == (4, 3)
    with pytest.raises(DimensionError):
        tc.add(tc.zeros((4, 3)), tc.zeros(4))
    with pytest.raises(DimensionError):
        tc.mul(tc.zeros((2, 3)), tc.zeros((3, 2)))


def test_broadcast_gradient_is_reduced():
    with tc.Tape():
        b = tc.parameter(np.zeros(3))
        tc.backward(tc.sum_reduce(tc.add(tc.ones((4, 3)), b)))
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])


def test_einsum_gradient(rng):
    a0 = rng.normal(size=(2, 3, 4))
    w0 = rng.normal(size=(4, 5))
    with tc.Tape():
        a = tc.parameter(a0)
        w = tc.parameter(w0)
        out = tc.einsum("bij,jk->bik", a, w)
        tc.backward(tc.sum_reduce(out * out))
    np.testing.assert_allclose(
        w.grad, numeric_grad(lambda x: float(np.sum(np.einsum("bij,jk->bik", a0, x) ** 2)), w0), rtol=1e-6)
    np.testing.assert_allclose(
        a.grad, numeric_grad(lambda x: float(np.sum(np.einsum("bij,jk->bik", x, w0) ** 2)), a0), rtol=1e-6)


def test_einsum_private_index_gradient():
    with tc.Tape():
        a = tc.parameter(np.ones((2, 3)))
        tc.backward(tc.sum_reduce(tc.einsum("ij,k->k", a, tc.constant([1.0, 2.0]))))
    np.testing.assert_allclose(a.grad, np.full((2, 3), 3.0))


def test_einsum_rejects_ellipsis():
    with pytest.raises(ContractError):
        tc.einsum("...i->i", tc.zeros((2, 3)))


def test_segment_max_values_and_gradient():
    x0 = np.array([[1.0, 5.0], [3.0, 2.0], [4.0, 4.0]])
    with tc.Tape():
        x = tc.parameter(x0)
        out = tc.segment_max(x, np.array([0, 0, 1]), 2)
        tc.backward(tc.sum_reduce(out))
    np.testing.assert_allclose(out.numpy(), [[3.0, 5.0], [4.0, 4.0]])
    np.testing.assert_allclose(x.grad, [[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])


def test_segment_max_tie_goes_to_first_row():
    with tc.Tape():
        x = tc.parameter([[2.0], [2.0]])
        tc.backward(tc.sum_reduce(tc.segment_max(x, np.array([0, 0]), 1)))
    np.testing.assert_allclose(x.grad, [[1.0], [0.0]])


def test_segment_max_empty_segment():
    with pytest.raises(ContractError):
        tc.segment_max(tc.zeros((2, 1)), np.array([0, 0]), 2)


def test_concat_and_reshape_gradients():
    with tc.Tape():
        a = tc.parameter(np.ones((2, 2)))
        b = tc.parameter(np.ones((2, 1)))
        joined = tc.reshape(tc.concat([a, b], axis=1), (6,))
        tc.backward(tc.sum_reduce(joined * tc.constant(np.arange(6.0))))
    np.testing.assert_allclose(a.grad, [[0.0, 1.0], [3.0, 4.0]])
    np.testing.assert_allclose(b.grad, [[2.0], [5.0]])


def test_elementwise_dispatch():
    np.testing.assert_allclose(tc.elementwise("add", tc.ones(2), tc.ones(2)).numpy(), [2.0, 2.0])
    with pytest.raises(ContractError):
        tc.elementwise("gelu", tc.ones(2))


def test_tapes_are_thread_local():
    results = {}

    def work(key: int):
        with tc.Tape():
            w = tc.parameter([float(key)])
            tc.backward(tc.sum_reduce(w * w))
            results[key] = w.grad.copy()

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for key, grad in results.items():
        np.testing.assert_allclose(grad, [2.0 * key])
