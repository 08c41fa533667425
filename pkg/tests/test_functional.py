import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipread3d import functional as F
from lipread3d.checks import gradcheck_op, op_cases
from lipread3d.errors import ContractError, ShapeError
from lipread3d.functional import ConvSpec, PoolSpec
from lipread3d.tensor import Tape, Tensor, backward, sum_all, mul

import naive


def _rand(r, *shape):
    return r.standard_normal(shape)


@pytest.mark.parametrize("seed", range(6))
def test_conv3d_matches_loops(seed):
    r = np.random.default_rng(seed)
    C, O = r.integers(1, 4), r.integers(1, 4)
    k = tuple(int(v) for v in r.integers(1, 4, 3))
    s = tuple(int(v) for v in r.integers(1, 3, 3))
    p = tuple(int(v) for v in r.integers(0, 2, 3))
    x = _rand(r, 2, C, 5, 6, 5)
    w = _rand(r, O, C, *k)
    b = _rand(r, O)
    got = F.conv3d(Tensor(x), Tensor(w), Tensor(b), s, p).data
    assert np.abs(got - naive.conv3d(x, w, b, s, p)).max() <= 1e-5


def test_conv3d_float32_path_matches_loops():
    r = np.random.default_rng(9)
    x, w = _rand(r, 1, 3, 4, 7, 7).astype(np.float32), _rand(r, 5, 3, 3, 3, 3).astype(np.float32)
    got = F.conv3d(Tensor(x), Tensor(w), None, (1, 2, 2), (1, 1, 1)).data
    assert got.dtype == np.float32
    assert np.abs(got - naive.conv3d(x, w, None, (1, 2, 2), (1, 1, 1))).max() <= 1e-5


def test_conv3d_chunked_path_equals_single_pass(monkeypatch):
    r = np.random.default_rng(3)
    x, w = _rand(r, 2, 2, 6, 5, 5), _rand(r, 3, 2, 3, 3, 3)
    whole = F.conv3d(Tensor(x), Tensor(w), None, 1, 1).data
    monkeypatch.setattr(F, "COL_BUDGET", 64)
    chunked = F.conv3d(Tensor(x), Tensor(w), None, 1, 1).data
    assert np.allclose(whole, chunked, atol=1e-12)


def test_conv3d_replicate_temporal_padding():
    r = np.random.default_rng(4)
    x, w = _rand(r, 1, 2, 4, 5, 5), _rand(r, 3, 2, 3, 3, 3)
    got = F.conv3d(Tensor(x), Tensor(w), None, 1, (1, 1, 1), "replicate").data
    xt = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0), (0, 0)), mode="edge")
    want = naive.conv3d(xt, w, None, (1, 1, 1), (0, 1, 1))
    assert np.abs(got - want).max() <= 1e-5


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        F.conv3d(Tensor(np.zeros((1, 2, 3, 3, 3))), Tensor(np.zeros((1, 3, 1, 1, 1))))
    with pytest.raises(ShapeError):
        ConvSpec(1, 1, (0, 1, 1))
    with pytest.raises(ShapeError):
        ConvSpec(1, 1, 3).output_extents((1, 1, 1))


@pytest.mark.parametrize("seed", range(4))
def test_conv2d_matches_loops(seed):
    r = np.random.default_rng(100 + seed)
    x, w, b = _rand(r, 2, 3, 7, 6), _rand(r, 4, 3, 3, 2), _rand(r, 4)
    got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), (2, 1), (1, 0)).data
    assert np.abs(got - naive.conv2d(x, w, b, (2, 1), (1, 0))).max() <= 1e-5


@pytest.mark.parametrize("kind", ["max", "avg"])
@pytest.mark.parametrize("ceil_mode", [False, True])
def test_pool_matches_loops(kind, ceil_mode):
    r = np.random.default_rng(5)
    x = _rand(r, 2, 2, 5, 7, 6)
    spec = PoolSpec(kind, (2, 3, 2), (2, 2, 2), (1, 1, 0), ceil_mode)
    got = F.pool3d(Tensor(x), spec).data
    want = naive.pool3d(x, kind, spec.kernel, spec.stride, spec.padding, ceil_mode)
    assert got.shape == want.shape
    assert np.abs(got - want).max() <= 1e-5


def test_pool_ceil_mode_extents():
    # a 1x2x2 / stride 2 pool on odd extents keeps the partial window
    assert PoolSpec("max", (1, 2, 2), (1, 2, 2), ceil_mode=True).output_extents((3, 7, 7))[0] == (3, 4, 4)
    assert PoolSpec("max", (1, 2, 2), (1, 2, 2)).output_extents((3, 7, 7))[0] == (3, 3, 3)
    with pytest.raises(ContractError):
        PoolSpec("median")


def test_maxpool_gradient_goes_to_first_maximum():
    x = Tensor(np.ones((1, 1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        y = sum_all(F.pool3d(x, PoolSpec("max", (1, 2, 2), (1, 2, 2))))
    backward(tape, y)
    assert x.grad.ravel().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_batchnorm_train_and_eval():
    r = np.random.default_rng(6)
    x = _rand(r, 4, 3, 2, 2, 2) * 3 + 1
    g, b = _rand(r, 3), _rand(r, 3)
    rm, rv = np.zeros(3), np.ones(3)
    got = F.batchnorm(Tensor(x), Tensor(g), Tensor(b), rm, rv, True).data
    assert np.abs(got - naive.batchnorm_train(x, g, b)).max() < 1e-10
    mu = x.mean(axis=(0, 2, 3, 4))
    var = x.var(axis=(0, 2, 3, 4))
    assert np.allclose(rm, 0.1 * mu) and np.allclose(rv, 0.9 + 0.1 * var)
    ev = F.batchnorm(Tensor(x), Tensor(g), Tensor(b), rm, rv, False).data
    shape = (1, 3, 1, 1, 1)
    want = (x - rm.reshape(shape)) / np.sqrt(rv.reshape(shape) + 1e-5) * g.reshape(shape) + b.reshape(shape)
    assert np.allclose(ev, want)


def test_batchnorm_needs_two_values_per_channel():
    with pytest.raises(ContractError):
        F.batchnorm(Tensor(np.ones((1, 2, 1, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                    np.zeros(2), np.ones(2), True)


def test_cross_entropy_matches_loops():
    r = np.random.default_rng(7)
    logits = _rand(r, 5, 4) * 4
    labels = r.integers(0, 4, 5)
    loss, probs = F.softmax_cross_entropy(Tensor(logits), labels)
    assert abs(float(loss.data) - naive.cross_entropy(logits, labels)) < 1e-10
    assert np.allclose(probs.sum(axis=1), 1.0)
    with pytest.raises(ContractError):
        F.softmax_cross_entropy(Tensor(logits), np.full(5, 4))


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_sequence_matches_loops(reverse):
    r = np.random.default_rng(8)
    H, D = 3, 4
    args = [_rand(r, 2, 5, D), _rand(r, 4 * H, D), _rand(r, 4 * H, H), _rand(r, 4 * H), _rand(r, 4 * H)]
    got = F.lstm_sequence(*[Tensor(a) for a in args], reverse=reverse).data
    assert np.abs(got - naive.lstm(*args, reverse=reverse)).max() < 1e-12


def test_lstm_cell_step_agrees_with_fused_sequence():
    from lipread3d.backends import LSTMDirection, lstm_cell_step
    from lipread3d.tensor import Rng

    d = LSTMDirection(4, 3, Rng(0))
    x = np.random.default_rng(0).standard_normal((2, 5, 4)).astype(np.float32)
    fused = d(Tensor(x)).data
    h = c = Tensor(np.zeros((2, 3), dtype=np.float32))
    for t in range(5):
        h, c = lstm_cell_step(d.params, Tensor(x[:, t]), h, c)
        assert np.allclose(h.data, fused[:, t], atol=1e-6)


@pytest.mark.parametrize("name", sorted(op_cases()))
def test_op_gradients(name):
    report = gradcheck_op(name)
    assert report.passed, (str(report), report.failures[:3])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_conv3d_is_linear_in_the_input(seed, alpha):
    r = np.random.default_rng(seed)
    x, y, w = _rand(r, 1, 2, 3, 4, 4), _rand(r, 1, 2, 3, 4, 4), _rand(r, 2, 2, 2, 2, 2)
    conv = lambda v: F.conv3d(Tensor(v), Tensor(w), None, 1, (1, 0, 1)).data
    assert np.allclose(conv(x + alpha * y), conv(x) + alpha * conv(y), atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_conv3d_backward_is_the_adjoint(seed):
    # <conv(x), g> == <x, conv^T(g)> for the input gradient
    r = np.random.default_rng(seed)
    x = Tensor(_rand(r, 1, 2, 4, 5, 5), requires_grad=True)
    w = Tensor(_rand(r, 3, 2, 3, 3, 3))
    y = F.conv3d(x, w, None, (1, 2, 1), (1, 1, 1))
    g = _rand(r, *y.shape)
    with Tape() as tape:
        out = sum_all(mul(F.conv3d(x, w, None, (1, 2, 1), (1, 1, 1)), Tensor(g)))
    backward(tape, out)
    assert np.isclose(np.sum(y.data * g), np.sum(x.data * x.grad))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_pool_bounds(seed):
    r = np.random.default_rng(seed)
    x = _rand(r, 1, 1, 4, 6, 6)
    mx = F.pool3d(Tensor(x), PoolSpec("max", (2, 2, 2), (2, 2, 2))).data
    av = F.pool3d(Tensor(x), PoolSpec("avg", (2, 2, 2), (2, 2, 2))).data
    assert np.all(av <= mx + 1e-12) and mx.max() == x.max()


