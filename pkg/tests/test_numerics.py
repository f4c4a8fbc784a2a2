import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from modt import numerics as nx
from modt.numerics import (
    GradTape,
    InvalidInputError,
    Tensor,
    backward,
    finite_difference_gradient,
    gradient_error,
    softmax_rows,
)


def grad_check(fn, shapes, seed=0, points=10, h=1e-5):
    """Compare backward() to central differences at ``points`` random inputs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        xs = [rng.normal(size=s) for s in shapes]
        ts = [Tensor(x, requires_grad=True) for x in xs]
        with GradTape() as tape:
            out = fn(*ts)
        grads = backward(out, tape)
        for i, x in enumerate(xs):

            def f(xi, i=i):
                args = [Tensor(v) for v in xs]
                args[i] = Tensor(xi)
                return fn(*args).item()

            num = finite_difference_gradient(f, x, h)
            worst = max(worst, gradient_error(nx.grad_of(grads, ts[i]), num))
    return worst


def test_softmax_uniform_row():
    out = softmax_rows(Tensor([[2.5, 2.5, 2.5]])).value
    np.testing.assert_allclose(out, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_softmax_shift_invariance():
    a = softmax_rows(Tensor([[0.3, 1.7]])).value
    b = softmax_rows(Tensor([[0.3 + 41.0, 1.7 + 41.0]])).value
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_softmax_hand_value():
    out = softmax_rows(Tensor([[0.0, math.log(2.0)]])).value
    np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], atol=1e-15)


def test_softmax_large_values_stay_finite():
    out = softmax_rows(Tensor([[1000.0, 0.0, -1000.0]])).value
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0)


def test_softmax_empty_rejected():
    with pytest.raises(InvalidInputError):
        softmax_rows(Tensor(np.zeros((2, 0))))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(m):
    out = softmax_rows(Tensor(m)).value
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(out >= 0) and np.all(out <= 1)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_softmax_open_interval_for_moderate_inputs(m):
    out = softmax_rows(Tensor(m)).value
    assert np.all(out > 0) and np.all(out < 1)


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    with GradTape() as tape:
        y = x * x
    assert backward(y, tape)[x] == pytest.approx(6.0)


def test_backward_constant_gives_zero():
    x = Tensor(3.0, requires_grad=True)
    with GradTape() as tape:
        y = x * 0.0 + 5.0
    assert backward(y, tape)[x] == 0.0


def test_nonparticipating_tensor_has_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([4.0], requires_grad=True)
    with GradTape() as tape:
        y = nx.sum_(x * x)
    grads = backward(y, tape)
    np.testing.assert_array_equal(nx.grad_of(grads, unused), [0.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = x * 2.0
    with pytest.raises(InvalidInputError):
        backward(y, tape)


def test_softmax_sum_of_squares_matches_finite_differences():
    fn = lambda m: nx.sum_(softmax_rows(m) * softmax_rows(m))
    assert grad_check(fn, [(3, 3)]) < 1e-4


def test_shared_subexpression_accumulates():
    x = Tensor(2.0, requires_grad=True)
    with GradTape() as tape:
        y = x * x
        z = y * y + y  # x^4 + x^2
    assert backward(z, tape)[x] == pytest.approx(4 * 8 + 2 * 2)


@pytest.mark.parametrize(
    "name,fn,shapes",
    [
        ("matmul", lambda a, b: nx.sum_((a @ b) * (a @ b)), [(3, 4), (4, 2)]),
        ("add_broadcast", lambda a, b: nx.sum_(nx.tanh(a + b)), [(3, 4), (1, 4)]),
        ("sub_mul", lambda a, b: nx.sum_((a - b) * a), [(2, 3), (2, 3)]),
        ("div", lambda a, b: nx.sum_(a / (b * b + 1.0)), [(2, 3), (2, 3)]),
        ("exp_log", lambda a: nx.sum_(nx.log(nx.exp(a) + 1.0)), [(3, 3)]),
        ("sqrt", lambda a: nx.sum_(nx.sqrt(a * a + 0.5)), [(3, 2)]),
        ("sigmoid", lambda a: nx.sum_(nx.sigmoid(a) * a), [(2, 4)]),
        ("softplus", lambda a: nx.sum_(nx.softplus(a) * a), [(2, 4)]),
        ("abs", lambda a: nx.sum_(nx.abs_(a) * a), [(3, 3)]),
        ("transpose", lambda a: nx.sum_(a @ a.T @ a), [(3, 2)]),
        ("reshape", lambda a: nx.sum_(nx.reshape(a, (2, 6)) @ nx.reshape(a, (6, 2))), [(3, 4)]),
        ("slice", lambda a: nx.sum_(a[:, 1:3] * a[:, 0:2]), [(3, 4)]),
        ("take_rows", lambda a: nx.sum_(nx.tanh(nx.take_rows(a, [2, 0, 2])) * 3.0), [(3, 2)]),
        ("concat", lambda a, b: nx.sum_(nx.tanh(nx.concat([a, b], axis=1))), [(2, 2), (2, 3)]),
        ("mean", lambda a: nx.mean(a * a, axis=1, keepdims=True)[1, 0], [(3, 4)]),
        ("group_max", lambda a: nx.sum_(nx.group_max(a, 3) * 1.5), [(6, 4)]),
        ("log_softmax", lambda a: nx.sum_(nx.log_softmax_rows(a) * a), [(3, 4)]),
        ("softmax_matmul", lambda a, b: nx.sum_(softmax_rows(a @ b.T) @ b), [(4, 3), (4, 3)]),
    ],
)
def test_ops_match_finite_differences(name, fn, shapes):
    assert grad_check(fn, shapes) < 1e-4, name


def test_finite_difference_of_sum_is_ones():
    x = np.random.default_rng(1).normal(size=(3, 2))
    np.testing.assert_allclose(finite_difference_gradient(np.sum, x, 1e-5), np.ones((3, 2)), atol=1e-9)


def test_finite_difference_square():
    g = finite_difference_gradient(lambda v: float(v[0] ** 2), np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) < 1e-8


def test_finite_difference_rejects_bad_step():
    with pytest.raises(InvalidInputError):
        finite_difference_gradient(np.sum, np.ones(2), 0.0)


def test_ops_are_pure():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    run = lambda: softmax_rows(Tensor(a) @ Tensor(b)).value
    assert run().tobytes() == run().tobytes()


def test_tensor_values_are_immutable():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.value[0] = 2.0


def test_log_is_clamped():
    x = Tensor([0.0, 1.0], requires_grad=True)
    with GradTape() as tape:
        y = nx.sum_(nx.log(x))
    assert y.item() == pytest.approx(math.log(1e-12))
    g = backward(y, tape)[x]
    assert np.all(np.isfinite(g)) and g[0] == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_results_raise():
    with pytest.raises(FloatingPointError):
        nx.div(Tensor([1.0]), Tensor([0.0]))


def test_gradient_error_uses_absolute_floor():
    assert gradient_error(np.array([1e-8]), np.array([3e-8])) == pytest.approx(2e-8)
    assert gradient_error(np.array([1.0]), np.array([1.0001])) == pytest.approx(1e-4 / 1.0001)
