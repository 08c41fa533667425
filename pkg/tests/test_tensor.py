import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lipread3d.errors import ContractError, ShapeError
from lipread3d.gradcheck import check_gradients, relative_error
from lipread3d.tensor import (Rng, Tape, Tensor, add, backward, concat, expand, flip, matmul, mean, mul, narrow,
                              no_grad, relu, reshape, scale, stack, sum_all, tensor_create, transpose)

import naive


def test_create_initialisers():
    z = tensor_create([2, 3])
    assert z.shape == (2, 3) and z.dtype == np.float32 and not z.data.any()
    c = tensor_create([4], "constant", value=2.5)
    assert np.all(c.data == 2.5)
    u = tensor_create([1000], "uniform", low=-0.5, high=0.5, rng=Rng(0))
    assert u.data.min() >= -0.5 and u.data.max() < 0.5
    k = tensor_create([256, 64, 3, 3], "kaiming", rng=Rng(1))
    assert abs(k.data.std() / np.sqrt(2 / (64 * 9)) - 1) < 0.02


@pytest.mark.parametrize("shape", [[], [0, 2], [3, -1]])
def test_create_rejects_bad_extents(shape):
    with pytest.raises(ShapeError):
        tensor_create(shape)


def test_create_needs_rng_for_random_init():
    with pytest.raises(ContractError):
        tensor_create([2], "uniform")
    with pytest.raises(ContractError):
        tensor_create([2], "nope")


def test_rng_is_deterministic_and_spawn_independent():
    a, b = Rng(7), Rng(7)
    assert np.array_equal(a.normal((5,)), b.normal((5,)))
    assert np.array_equal(Rng(7).spawn(3).uniform(0, 1, 4), Rng(7).spawn(3).uniform(0, 1, 4))
    assert not np.array_equal(Rng(7).spawn(3).uniform(0, 1, 4), Rng(7).spawn(4).uniform(0, 1, 4))
    assert isinstance(Rng(0).random(), float)
    assert Rng(0).random(3).shape == (3,)


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_matmul_matches_loops():
    r = np.random.default_rng(0)
    a, b = r.standard_normal((4, 6)), r.standard_normal((6, 3))
    got = matmul(Tensor(a), Tensor(b)).data
    assert np.abs(got - naive.matmul(a, b)).max() < 1e-5


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_no_recording_without_grad_inputs():
    with Tape() as tape:
        add(Tensor(np.ones(2)), Tensor(np.ones(2)))
    assert len(tape) == 0


def test_no_grad_suspends_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            y = relu(x)
    assert len(tape) == 0 and not y.requires_grad


def test_fan_out_gradients_sum():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        y = sum_all(add(mul(x, x), x))
    backward(tape, y)
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_late_requires_grad_gets_its_own_node():
    a, b = Tensor(np.ones(2)), Tensor(np.ones(3))
    a.requires_grad = True
    b.requires_grad = True
    assert a.node is not None and b.node is not None and a.node != b.node
    with Tape() as tape:
        y = add(sum_all(scale(a, 2.0)), sum_all(scale(b, 3.0)))
    backward(tape, y)
    assert np.allclose(a.grad, 2.0) and np.allclose(b.grad, 3.0)


def test_backward_rejects_non_scalar_and_untaped_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = relu(x)
    with pytest.raises(ContractError):
        backward(tape, y)
    with pytest.raises(ContractError):
        backward(Tape(), sum_all(Tensor(np.ones(3))))


def test_gradcheck_detects_a_wrong_gradient():
    from lipread3d.tensor import make_result

    def bad_square(t):
        return make_result(t.data ** 2, (t,), lambda g: (g * t.data,), "bad_square")  # missing factor 2

    x = Tensor(np.array([0.5, 1.5, -2.0]), requires_grad=True)
    report = check_gradients(lambda: sum_all(bad_square(x)), [x], h=1e-6)
    assert not report.passed and len(report.failures) == 3


def test_relative_error_floor():
    assert relative_error(0.0, 1e-12, floor=1e-4) == pytest.approx(1e-8)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


small = hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=3, min_side=1, max_side=4),
                   elements=st.floats(-10, 10))


@settings(max_examples=40, deadline=None)
@given(small)
def test_transpose_reshape_round_trip(a):
    x = Tensor(a)
    axes = tuple(reversed(range(a.ndim)))
    back = transpose(transpose(x, axes), axes)
    assert np.array_equal(back.data, a)
    assert np.array_equal(reshape(reshape(x, (a.size,)), a.shape).data, a)


@settings(max_examples=40, deadline=None)
@given(small)
def test_flip_is_an_involution_and_its_own_adjoint(a):
    x = Tensor(a, requires_grad=True)
    w = np.arange(a.size, dtype=np.float64).reshape(a.shape)
    with Tape() as tape:
        y = sum_all(mul(flip(x, 0), Tensor(w)))
    backward(tape, y)
    assert np.array_equal(flip(flip(Tensor(a), 0), 0).data, a)
    assert np.array_equal(x.grad, np.flip(w, 0))


@settings(max_examples=40, deadline=None)
@given(small)
def test_concat_narrow_inverse(a):
    x = Tensor(a)
    both = concat([x, x], axis=0)
    assert np.array_equal(narrow(both, 0, a.shape[0], a.shape[0]).data, a)
    assert stack([x, x], axis=0).shape == (2,) + a.shape


@settings(max_examples=40, deadline=None)
@given(small)
def test_linear_ops_have_exact_gradients(a):
    # d/dx sum(c * mean(x)) over all axes is c / size everywhere
    x = Tensor(a, requires_grad=True)
    with Tape() as tape:
        y = scale(sum_all(mean(x, tuple(range(a.ndim)))), 3.0)
    backward(tape, y)
    assert np.allclose(x.grad, 3.0 / a.size)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5))
def test_expand_gradient_sums_over_the_broadcast_axis(n, m):
    x = Tensor(np.ones((1, m)), requires_grad=True)
    with Tape() as tape:
        y = sum_all(expand(x, (n, m)))
    backward(tape, y)
    assert np.array_equal(x.grad, np.full((1, m), float(n)))
