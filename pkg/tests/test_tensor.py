import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparselab import tensor as T
from gradcheck_cases import CASES, check_case


def test_matmul_examples():
    eye = T.Tensor([[1, 0], [0, 1]])
    b = T.Tensor([[3, 4], [5, 6]])
    assert np.array_equal(T.matmul(eye, b).values, [[3, 4], [5, 6]])
    assert T.matmul(T.Tensor([[1, 2]]), T.Tensor([[3], [4]])).values.tolist() == [[11.0]]
    assert T.matmul(T.Tensor([[0]]), T.Tensor([[7]])).values.tolist() == [[0.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_backward_formula():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = T.Tensor([[0.5, -1.0], [2.0, 1.0]], requires_grad=True)
    T.backward(T.tensor_sum(T.matmul(a, b)))
    ones = np.ones((2, 2))
    assert np.array_equal(a.grad, ones @ b.values.T)
    assert np.array_equal(b.grad, a.values.T @ ones)


def test_softmax_examples():
    assert np.allclose(T.softmax_rows(T.Tensor([[0.0, 0.0]])).values, [[0.5, 0.5]], atol=1e-15)
    assert np.allclose(T.softmax_rows(T.Tensor([[1000.0, 1000.0]])).values, [[0.5, 0.5]], atol=1e-15)
    out = T.softmax_rows(T.Tensor([[0.0, math.log(3)]])).values
    assert np.allclose(out, [[0.25, 0.75]], atol=1e-15)


def test_softmax_nan_raises():
    with pytest.raises(T.NumericError):
        T.softmax_rows(T.Tensor([[0.0, float("nan")]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = T.softmax_rows(T.Tensor(x)).values
    assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-12)
    y2 = T.softmax_rows(T.Tensor(x + c)).values
    assert np.max(np.abs(y - y2)) <= 1e-12


def test_layer_norm_examples():
    one = T.Tensor(np.ones(3))
    zero = T.Tensor(np.zeros(3))
    assert np.array_equal(T.layer_norm(T.Tensor([1.0, 1.0, 1.0]), one, zero, 1e-6).values, [0, 0, 0])
    out = T.layer_norm(T.Tensor([-1.0, 1.0]), T.Tensor([1.0, 1.0]), T.Tensor([0.0, 0.0]), 1e-12).values
    assert np.allclose(out, [-1, 1], atol=1e-9)
    out = T.layer_norm(T.Tensor([0.0, 2.0]), T.Tensor([2.0, 2.0]), T.Tensor([1.0, 1.0]), 1e-12).values
    assert np.allclose(out, [-1, 3], atol=1e-9)


def test_layer_norm_moments():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(4, 16))
    d = 16
    out = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(d)), T.Tensor(np.zeros(d)), 1e-12).values
    assert np.all(np.abs(out.mean(axis=-1)) <= 1e-9)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) <= 1e-6)


def test_layer_norm_shape_error():
    with pytest.raises(T.ShapeError):
        T.layer_norm(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)))


def test_cross_entropy_examples():
    assert T.cross_entropy_loss(T.Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert T.cross_entropy_loss(T.Tensor([[100.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)
    assert T.cross_entropy_loss(T.Tensor([[0.0, math.log(3)]]), [0]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    x = T.Tensor([[0.0, math.log(3)], [1.0, 1.0]], requires_grad=True)
    T.backward(T.cross_entropy_loss(x, [0, 1]))
    expected = np.array([[0.25 - 1, 0.75], [0.5, 0.5 - 1]]) / 2
    assert np.allclose(x.grad, expected, atol=1e-15)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy_loss(T.Tensor([[0.0, 0.0]]), [2])


def test_backward_sum_and_square():
    w = T.Tensor(np.arange(5.0), requires_grad=True)
    T.backward(T.tensor_sum(w))
    assert np.array_equal(w.grad, np.ones(5))
    w = T.Tensor([2.0, -3.0], requires_grad=True)
    T.backward(T.tensor_sum(T.square(w)))
    assert np.array_equal(w.grad, [4.0, -6.0])


def test_backward_accumulates_without_reset():
    w = T.Tensor([2.0, -3.0], requires_grad=True)
    loss = T.tensor_sum(T.square(w))
    T.backward(loss)
    T.backward(loss)
    assert np.array_equal(w.grad, [8.0, -12.0])
    w.zero_grad()
    T.backward(loss)
    assert np.array_equal(w.grad, [4.0, -6.0])


def test_backward_rejects_non_scalar():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.scale(w, 2.0))


def test_shared_input_gradients_add_up():
    w = T.Tensor([1.5, -0.5], requires_grad=True)
    T.backward(T.tensor_sum(T.mul(w, w)))
    assert np.array_equal(w.grad, [3.0, -1.0])


def test_tape_is_creation_ordered():
    a = T.Tensor(np.ones((2, 2)), requires_grad=True)
    b = T.relu(T.matmul(a, a))
    c = T.tensor_sum(T.add(b, a))
    tape = T.ComputationTape.from_output(c)
    seqs = [n.seq for n in tape.nodes]
    assert seqs == sorted(seqs)
    position = {id(n.output): i for i, n in enumerate(tape.nodes)}
    for i, n in enumerate(tape.nodes):
        for inp in n.inputs:
            if inp.node is not None:
                assert position[id(inp)] < i


def test_no_grad_skips_recording():
    a = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        out = T.scale(a, 2.0)
    assert out.node is None and not out.requires_grad


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4, 8))
    w = rng.normal(size=(8, 8))

    def run():
        h = T.softmax_rows(T.matmul(T.Tensor(x), T.Tensor(w)))
        return T.layer_norm(h, T.Tensor(np.ones(8)), T.Tensor(np.zeros(8))).values

    assert run().tobytes() == run().tobytes()


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    for seed in range(10):
        assert check_case(name, seed) <= 1e-4, (name, seed)
