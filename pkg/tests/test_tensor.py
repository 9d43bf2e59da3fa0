from __future__ import annotations

import numpy as np
import pytest
from scipy.linalg import expm

from dtn.errors import ForeignNodeError
from dtn.errors import NonScalarLossError
from dtn.errors import ShapeMismatchError
from dtn.errors import TensorError
from dtn.tensor import Tape
from dtn.tensor import Tensor
from dtn.tensor import backward
from dtn.tensor import contract
from dtn.tensor import einsum
from dtn.tensor import frobenius_norm
from dtn.tensor import log_softmax
from dtn.tensor import matmul
from dtn.tensor import matrix_exp_2x2
from dtn.tensor import mul
from dtn.tensor import sigmoid
from dtn.tensor import stack
from dtn.tensor import tensor_sum

from .utils import expm_taylor
from .utils import numeric_gradient


def test_contract_vector_dot():
    assert contract([1.0, 2.0], [3.0, 4.0], [(0, 0)]).item() == 11.0


def test_contract_matrix_product():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[0.0, 1.0], [1.0, 0.0]])
    result = contract(a, b, [(1, 0)])
    np.testing.assert_array_equal(result.numpy(), [[2.0, 1.0], [4.0, 3.0]])


def test_contract_keeps_free_axes_in_order(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((4, 5))
    result = contract(a, b, [(2, 0)])
    assert result.shape == (2, 3, 5)
    np.testing.assert_allclose(result.numpy(), np.tensordot(a, b, axes=(2, 0)))


def test_contract_rejects_mismatched_extents():
    with pytest.raises(ShapeMismatchError):
        contract(np.ones(2), np.ones(3), [(0, 0)])


def test_tensor_rejects_empty_extent():
    with pytest.raises(ShapeMismatchError):
        Tensor(np.ones((0, 2)))


def test_gradient_of_dot_product():
    tape = Tape()
    a = tape.parameter("a", [1.0, 2.0])
    loss = contract(a, [3.0, 4.0], [(0, 0)])
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads["a"].numpy(), [3.0, 4.0])


def test_unused_parameter_gets_zero_gradient():
    tape = Tape()
    a = tape.parameter("a", [1.0, 2.0])
    tape.parameter("b", np.ones((2, 2)))
    grads = backward(tape, tensor_sum(mul(a, a)))
    np.testing.assert_array_equal(grads["b"].numpy(), np.zeros((2, 2)))
    np.testing.assert_array_equal(grads["a"].numpy(), [2.0, 4.0])


def test_backward_requires_scalar_loss():
    tape = Tape()
    a = tape.parameter("a", [1.0, 2.0])
    with pytest.raises(NonScalarLossError):
        backward(tape, mul(a, 2.0))


def test_backward_rejects_loss_from_another_tape():
    first, second = Tape(), Tape()
    a = first.parameter("a", [1.0])
    second.parameter("b", [1.0])
    with pytest.raises(ForeignNodeError):
        backward(second, tensor_sum(a))


def test_mixing_tapes_is_an_error():
    a = Tape().parameter("a", [1.0])
    b = Tape().parameter("b", [1.0])
    with pytest.raises(ForeignNodeError):
        mul(a, b)


def test_duplicate_parameter_name():
    tape = Tape()
    tape.parameter("a", 1.0)
    with pytest.raises(TensorError):
        tape.parameter("a", 2.0)


def test_repeated_fancy_index_accumulates():
    tape = Tape()
    a = tape.parameter("a", [1.0, 2.0, 3.0])
    grads = backward(tape, tensor_sum(a[np.array([0, 0, 1])]))
    np.testing.assert_array_equal(grads["a"].numpy(), [2.0, 1.0, 0.0])


def test_value_used_twice_accumulates():
    tape = Tape()
    a = tape.parameter("a", [2.0])
    loss = tensor_sum(mul(mul(a, a), a))
    assert backward(tape, loss)["a"].item() == pytest.approx(12.0)


def test_einsum_gradients_match_finite_differences(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2, 2))
    c = rng.standard_normal((2,))

    def value(a_value):
        return float(np.sum(np.einsum("ij,jkl,l->ik", a_value, b, c) ** 2))

    tape = Tape()
    a_param = tape.parameter("a", a)
    out = einsum("ij,jkl,l->ik", a_param, b, c)
    grads = backward(tape, tensor_sum(mul(out, out)))
    np.testing.assert_allclose(
        grads["a"].numpy(), numeric_gradient(value, a), rtol=1e-6, atol=1e-8
    )


def test_einsum_gradient_of_summed_out_label(rng):
    a = rng.standard_normal((3, 4))
    tape = Tape()
    a_param = tape.parameter("a", a)
    grads = backward(tape, einsum("ij->", a_param))
    np.testing.assert_array_equal(grads["a"].numpy(), np.ones((3, 4)))


def test_matmul_and_stack_gradients(rng):
    a = rng.standard_normal((2, 3, 3))
    b = rng.standard_normal((3, 3))
    weights = rng.standard_normal((2, 3, 3))

    def value(a_value):
        return float(np.sum((a_value @ b) * weights))

    tape = Tape()
    a_param = tape.parameter("a", a)
    parts = [matmul(a_param[i], b) for i in range(2)]
    product = stack(parts, axis=0)
    grads = backward(tape, tensor_sum(mul(product, weights)))
    np.testing.assert_allclose(
        grads["a"].numpy(), numeric_gradient(value, a), rtol=1e-6, atol=1e-8
    )


def test_log_softmax_gradient(rng):
    logits = rng.standard_normal((2, 5))
    weights = rng.standard_normal((2, 5))

    def value(x):
        shifted = x - x.max(axis=-1, keepdims=True)
        return float(np.sum(weights * (shifted - np.log(np.exp(shifted).sum(-1, keepdims=True)))))

    tape = Tape()
    param = tape.parameter("x", logits)
    grads = backward(tape, tensor_sum(mul(log_softmax(param), weights)))
    np.testing.assert_allclose(
        grads["x"].numpy(), numeric_gradient(value, logits), rtol=1e-6, atol=1e-8
    )


def test_sigmoid_is_stable_for_large_inputs():
    out = sigmoid([-800.0, 0.0, 800.0]).numpy()
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


@pytest.mark.parametrize(
    "values,expected",
    [
        ([1.0, 1.0], np.sqrt(2.0)),
        ([0.0, 0.0], 0.0),
        ([3.0, 4.0], 5.0),
    ],
)
def test_frobenius_norm(values, expected):
    assert frobenius_norm(values).item() == pytest.approx(expected)


def test_frobenius_norm_gradient_at_zero_is_zero():
    tape = Tape()
    a = tape.parameter("a", [0.0, 0.0])
    grads = backward(tape, frobenius_norm(a))
    np.testing.assert_array_equal(grads["a"].numpy(), [0.0, 0.0])


def test_matrix_exp_of_zero_is_identity():
    np.testing.assert_array_equal(matrix_exp_2x2(np.zeros((2, 2))).numpy(), np.eye(2))


def test_matrix_exp_of_diagonal():
    out = matrix_exp_2x2(np.diag([1.0, -2.0])).numpy()
    np.testing.assert_allclose(out, np.diag([np.e, np.exp(-2.0)]), rtol=1e-14)


@pytest.mark.parametrize(
    "matrix",
    [
        [[0.3, 1.2], [-0.7, 0.1]],  # complex eigenvalues
        [[0.5, 2.0], [1.5, -0.4]],  # real distinct eigenvalues
        [[1.0, 1.0], [0.0, 1.0]],  # defective
        [[1.0, 1e-9], [1e-9, 1.0]],  # nearly degenerate
    ],
)
def test_matrix_exp_matches_scipy_and_series(matrix):
    matrix = np.array(matrix)
    out = matrix_exp_2x2(matrix).numpy()
    np.testing.assert_allclose(out, expm(matrix), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(out, expm_taylor(matrix), rtol=1e-12, atol=1e-14)


def test_matrix_exp_batched(rng):
    batch = rng.standard_normal((3, 4, 2, 2))
    out = matrix_exp_2x2(batch).numpy()
    for index in np.ndindex(3, 4):
        np.testing.assert_allclose(out[index], expm(batch[index]), rtol=1e-11)


@pytest.mark.parametrize(
    "matrix",
    [
        [[0.3, 1.2], [-0.7, 0.1]],
        [[0.5, 2.0], [1.5, -0.4]],
        [[0.2, 0.0], [0.0, 0.2]],
    ],
)
def test_matrix_exp_gradient(matrix, rng):
    matrix = np.array(matrix)
    weights = rng.standard_normal((2, 2))

    def value(m):
        return float(np.sum(expm(m) * weights))

    tape = Tape()
    param = tape.parameter("h", matrix)
    grads = backward(tape, tensor_sum(mul(matrix_exp_2x2(param), weights)))
    np.testing.assert_allclose(
        grads["h"].numpy(), numeric_gradient(value, matrix), rtol=1e-6, atol=1e-8
    )


def test_matrix_exp_needs_2x2():
    with pytest.raises(ShapeMismatchError):
        matrix_exp_2x2(np.eye(3))


def test_contract_is_bilinear(rng):
    a, a2 = rng.standard_normal((2, 3, 4))
    b, b2 = rng.standard_normal((2, 4, 5))
    axes = [(1, 0)]
    base = contract(a, b, axes).numpy()
    for alpha in (-2.5, 0.0, 0.3, 7.0):
        np.testing.assert_allclose(contract(alpha * a, b, axes).numpy(), alpha * base)
        np.testing.assert_allclose(contract(a, alpha * b, axes).numpy(), alpha * base)
    np.testing.assert_allclose(
        contract(a + a2, b, axes).numpy(), base + contract(a2, b, axes).numpy()
    )
    np.testing.assert_allclose(
        contract(a, b + b2, axes).numpy(), base + contract(a, b2, axes).numpy()
    )


def test_matrix_exp_inverse_of_random_matrices(rng):
    for h in rng.uniform(-2.0, 2.0, size=(200, 2, 2)):
        product = matrix_exp_2x2(h).numpy() @ matrix_exp_2x2(-h).numpy()
        np.testing.assert_allclose(product, np.eye(2), atol=1e-10)


@pytest.mark.parametrize("delta", [0.0, 1e-9, 1e-8, 2e-8, 1e-5, 0.0316, 0.0317, 1.3])
@pytest.mark.parametrize("rotation", [False, True])
def test_matrix_exp_inverse_around_series_switch(delta, rotation):
    # rotation gives δ² = -delta², the cos/sin branch
    off = -delta if rotation else delta
    h = np.array([[0.4, delta], [off, 0.4]])
    product = matrix_exp_2x2(h).numpy() @ matrix_exp_2x2(-h).numpy()
    np.testing.assert_allclose(product, np.eye(2), atol=1e-10)
    np.testing.assert_allclose(matrix_exp_2x2(h).numpy(), expm(h), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("z", [-1.1e-3, -0.9e-3, 0.9e-3, 1.1e-3])
def test_matrix_exp_gradient_across_derivative_series_switch(z, rng):
    # δ² = a² + b·c lands on either side of the series cut
    a, b = 0.01, 0.03
    matrix = np.array([[0.2 + a, b], [(z - a * a) / b, 0.2 - a]])
    weights = rng.standard_normal((2, 2))

    def value(m):
        return float(np.sum(expm(m) * weights))

    tape = Tape()
    param = tape.parameter("h", matrix)
    grads = backward(tape, tensor_sum(mul(matrix_exp_2x2(param), weights)))
    np.testing.assert_allclose(
        grads["h"].numpy(), numeric_gradient(value, matrix), rtol=1e-6, atol=1e-8
    )


def test_tape_replay_is_deterministic(rng):
    cores = rng.standard_normal((4, 3, 3))
    weights = rng.standard_normal((4, 3))

    def run():
        tape = Tape()
        param = tape.parameter("cores", cores)
        hidden = matrix_exp_2x2(einsum("nij,nj->ni", param, weights)[:, :2].reshape(2, 2, 2))
        loss = tensor_sum(sigmoid(mul(hidden, hidden)))
        return loss.item(), backward(tape, loss)["cores"].numpy()

    first_value, first_grad = run()
    second_value, second_grad = run()
    assert first_value == second_value
    np.testing.assert_array_equal(first_grad, second_grad)
