import numpy as np
import pytest

import tensor_core
from conftest import assert_gradients
from errors import DimensionError, UsageError
from tensor_core import (GradientStore, Tape, Tensor, add, backward, binary_cross_entropy_with_logits,
                         channel_affine, cross_entropy, global_average_pool, gradient_hook, linear, mean, mul,
                         relu, rescale_nonlinearity, reshape, scale, select_class, sigmoid, softmax, sub,
                         tensor_abs, tensor_sum)


def test_tensor_is_read_only_and_promotes_integers():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float64
    with pytest.raises(ValueError):
        t.data[0] = 5


def test_float32_is_kept():
    assert Tensor(np.ones(3, dtype=np.float32)).dtype == np.float32


def test_untaped_ops_are_not_recorded():
    out = add(Tensor([1.0]), Tensor([2.0]))
    assert out.tape is None
    assert out.node is None


def test_relu_gradient_at_minus_one_and_two():
    tape = Tape()
    x = tape.watch(np.array([-1.0, 2.0]))
    store = backward(tensor_sum(relu(x)), tape)
    np.testing.assert_array_equal(store.grad(x).data, [0.0, 1.0])


def test_relu_subgradient_at_zero_is_zero():
    tape = Tape()
    x = tape.watch(np.array([0.0]))
    assert backward(tensor_sum(relu(x)), tape).grad(x).data[0] == 0.0


def test_sum_of_two_paths_accumulates():
    tape = Tape()
    x = tape.watch(np.array([3.0]))
    y = add(mul(x, x), scale(x, 2.0))
    assert backward(tensor_sum(y), tape).grad(x).item() == pytest.approx(8.0)


def test_backward_needs_single_element():
    tape = Tape()
    x = tape.watch(np.ones(3))
    with pytest.raises(DimensionError):
        backward(relu(x), tape)


def test_backward_on_untaped_scalar_is_a_usage_error():
    with pytest.raises(UsageError):
        backward(Tensor(1.0), Tape())


def test_mixing_tapes_is_rejected():
    a = Tape().watch(np.ones(2))
    b = Tape().watch(np.ones(2))
    with pytest.raises(UsageError):
        add(a, b)


def test_unreachable_tensor_gets_zero_gradient():
    tape = Tape()
    x = tape.watch(np.ones(2))
    unused = tape.watch(np.ones((2, 2)))
    store = backward(tensor_sum(x), tape)
    assert isinstance(store, GradientStore)
    np.testing.assert_array_equal(store.grad(unused).data, np.zeros((2, 2)))


def test_grad_of_foreign_tensor_is_a_usage_error():
    tape = Tape()
    x = tape.watch(np.ones(2))
    store = backward(tensor_sum(x), tape)
    with pytest.raises(UsageError):
        store.grad(Tape().watch(np.ones(2)))


def test_debug_checks_catch_non_finite_values(monkeypatch):
    monkeypatch.setattr(tensor_core, "DEBUG_CHECKS", True)
    tape = Tape()
    x = tape.watch(np.array([np.inf]))
    with pytest.raises(FloatingPointError):
        sub(x, x)


def test_gradient_hook_rewrites_the_incoming_gradient():
    tape = Tape()
    x = tape.watch(np.ones(3))
    y = gradient_hook(x, lambda g: 3 * g)
    np.testing.assert_array_equal(y.data, x.data)
    np.testing.assert_array_equal(backward(tensor_sum(y), tape).grad(x).data, [3.0, 3.0, 3.0])


def test_select_class_rejects_bad_index():
    with pytest.raises(UsageError):
        select_class(Tensor(np.zeros((2, 3))), 3)


def random_shape(rng, ndim, low=1, high=4):
    return tuple(int(n) for n in rng.integers(low, high + 1, size=ndim))


def broadcast_pair(rng):
    shape = random_shape(rng, int(rng.integers(1, 4)))
    other = tuple(1 if rng.random() < 0.4 else n for n in shape)[int(rng.integers(0, len(shape))):]
    return [rng.normal(size=shape), rng.normal(size=other)]


def one(ndim_low=1, ndim_high=3):
    return lambda rng: [rng.normal(size=random_shape(rng, int(rng.integers(ndim_low, ndim_high + 1))))]


def linear_args(rng):
    n, i, o = random_shape(rng, 3)
    return [rng.normal(size=(n, i)), rng.normal(size=(o, i)), rng.normal(size=o)]


def affine_args(rng):
    shape = random_shape(rng, 4)
    return [rng.normal(size=shape), rng.normal(size=shape[1]), rng.normal(size=shape[1])]


GRADIENT_CASES = {
    "add": (lambda rng: add, broadcast_pair),
    "sub": (lambda rng: sub, broadcast_pair),
    "mul": (lambda rng: mul, broadcast_pair),
    "scale": (lambda rng: lambda x: scale(x, rng.normal()), one()),
    "relu": (lambda rng: relu, one()),
    "sigmoid": (lambda rng: sigmoid, one()),
    "softmax": (lambda rng: softmax, one(2, 2)),
    "abs": (lambda rng: tensor_abs, one()),
    "sum": (lambda rng: lambda x: tensor_sum(x, axis=1), one(3, 3)),
    "mean": (lambda rng: lambda x: mean(x, axis=(0, 2)), one(3, 3)),
    "reshape": (lambda rng: lambda x: reshape(x, x.shape[::-1]), one(2, 3)),
    "linear": (lambda rng: linear, linear_args),
    "channel_affine": (lambda rng: channel_affine, affine_args),
    "global_average_pool": (lambda rng: global_average_pool, one(4, 4)),
    "select_class": (lambda rng: lambda z: select_class(z, 0), one(2, 2)),
}


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_gradients_match_finite_differences(name):
    make_op, make_args = GRADIENT_CASES[name]
    rng = np.random.default_rng(sorted(GRADIENT_CASES).index(name))
    for _ in range(20):
        op = make_op(rng)
        assert_gradients(op, *make_args(rng))


@pytest.mark.parametrize("loss", [cross_entropy, binary_cross_entropy_with_logits])
def test_loss_gradients(loss):
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(1, 5))
        classes = 1 if loss is binary_cross_entropy_with_logits else int(rng.integers(2, 6))
        z = rng.normal(size=(n, classes))
        labels = rng.integers(0, max(classes, 2), size=n)
        assert_gradients(lambda logits: loss(logits, labels), z)


def test_cross_entropy_of_uniform_logits_is_log_classes():
    assert cross_entropy(np.zeros((2, 4)), [0, 3]).item() == pytest.approx(np.log(4))


def test_rescale_relu_multiplier_is_the_difference_ratio():
    tape = Tape()
    x = tape.watch(np.array([2.0, -1.0, 3.0]))
    out = rescale_nonlinearity(x, np.array([0.0, 0.0, 1.0]))
    np.testing.assert_array_equal(out.data, [2.0, 0.0, 3.0])
    grad = backward(tensor_sum(out), tape).grad(x).data
    np.testing.assert_allclose(grad, [1.0, 0.0, 1.0])
    # attribution to x is multiplier * (x - reference)
    assert grad[0] * 2.0 == 2.0


def test_rescale_falls_back_to_local_derivative_near_reference():
    tape = Tape()
    x = tape.watch(np.array([0.5]))
    out = rescale_nonlinearity(x, np.array([0.5]), kind="sigmoid")
    grad = backward(tensor_sum(out), tape).grad(x).item()
    s = 1 / (1 + np.exp(-0.5))
    assert grad == pytest.approx(s * (1 - s))


def test_rescale_unknown_kind():
    with pytest.raises(UsageError):
        rescale_nonlinearity(Tensor([1.0]), np.zeros(1), kind="tanh")
