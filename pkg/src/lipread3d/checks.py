"""Reusable numerical checks: per-op and whole-model gradient checks, temporal reach."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import functional as F
from .backends import BiLSTM, BiLstmSpec
from .config import ExperimentConfig
from .errors import ConfigError
from .functional import PoolSpec
from .gradcheck import GradCheckReport, check_gradients
from .layers import Module
from .tensor import (Rng, Tensor, add, concat, expand, flip, matmul, mean, mul, narrow, relu, reshape, scale,
                     sigmoid, stack, sub, sum_all, tanh, transpose)

# step and relative-error floor used for 64-bit central differences; the floor
# keeps exactly-zero gradients (a conv bias feeding batch norm) from being
# judged on round-off
GRAD_H = 1e-6
GRAD_FLOOR = 1e-4


def _t(rng: np.random.Generator, *shape, grad: bool = True) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


def _weighted(y: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar sum(y * r) with fixed random r, so every output entry matters."""
    return sum_all(mul(y, Tensor(rng.standard_normal(y.shape))))


def op_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """One small float64 instance per differentiable op: name -> (loss fn, inputs)."""
    r = np.random.default_rng(seed)
    cases: dict[str, tuple[Callable[[], Tensor], list[Tensor]]] = {}

    def add_case(name, fn, inputs):
        w = np.random.default_rng(seed + 1)
        probe = fn(*inputs)
        weights = Tensor(w.standard_normal(probe.shape))
        cases[name] = (lambda: sum_all(mul(fn(*inputs), weights)), list(inputs))

    a, b = _t(r, 3, 4), _t(r, 3, 4)
    add_case("add", add, [a, b])
    add_case("sub", sub, [_t(r, 3, 4), _t(r, 3, 4)])
    add_case("mul", mul, [_t(r, 3, 4), _t(r, 3, 4)])
    add_case("relu", relu, [Tensor(r.standard_normal((4, 5)) + np.sign(r.standard_normal((4, 5))) * 0.1,
                                   requires_grad=True)])
    add_case("scale", lambda x: scale(x, -2.5), [_t(r, 3, 4)])
    add_case("expand", lambda x: expand(x, (3, 4)), [_t(r, 1, 4)])
    add_case("sigmoid", sigmoid, [_t(r, 4, 5)])
    add_case("tanh", tanh, [_t(r, 4, 5)])
    add_case("matmul", matmul, [_t(r, 3, 5), _t(r, 5, 4)])
    add_case("transpose", lambda x: transpose(x, (2, 0, 1)), [_t(r, 2, 3, 4)])
    add_case("reshape", lambda x: reshape(x, (6, 4)), [_t(r, 2, 3, 4)])
    add_case("mean", lambda x: mean(x, (0, 2)), [_t(r, 2, 3, 4)])
    add_case("narrow", lambda x: narrow(x, 1, 1, 2), [_t(r, 2, 4, 3)])
    add_case("flip", lambda x: flip(x, 1), [_t(r, 2, 4, 3)])
    add_case("concat", lambda x, y: concat([x, y], axis=1), [_t(r, 2, 3), _t(r, 2, 2)])
    add_case("stack", lambda x, y: stack([x, y], axis=0), [_t(r, 2, 3), _t(r, 2, 3)])
    add_case("conv3d", lambda x, w, bb: F.conv3d(x, w, bb, (1, 2, 1), (1, 1, 0)),
             [_t(r, 2, 2, 4, 5, 4), _t(r, 3, 2, 3, 3, 2), _t(r, 3)])
    add_case("conv3d_replicate", lambda x, w: F.conv3d(x, w, None, 1, (1, 1, 1), "replicate"),
             [_t(r, 1, 2, 4, 4, 4), _t(r, 2, 2, 3, 3, 3)])
    add_case("conv2d", lambda x, w, bb: F.conv2d(x, w, bb, 2, 1), [_t(r, 2, 3, 6, 5), _t(r, 4, 3, 3, 3), _t(r, 4)])
    add_case("maxpool3d", lambda x: F.pool3d(x, PoolSpec("max", (1, 2, 2), (1, 2, 2), ceil_mode=True)),
             [_t(r, 2, 2, 3, 5, 5)])
    add_case("maxpool3d_overlap", lambda x: F.pool3d(x, PoolSpec("max", (3, 3, 3), 1, 1)), [_t(r, 1, 2, 4, 4, 4)])
    add_case("avgpool3d", lambda x: F.pool3d(x, PoolSpec("avg", (2, 2, 2), (1, 2, 2))), [_t(r, 2, 2, 3, 4, 4)])
    bn_rm, bn_rv = np.zeros(3), np.ones(3)
    add_case("batchnorm", lambda x, g, bb: F.batchnorm(x, g, bb, bn_rm.copy(), bn_rv.copy(), True),
             [_t(r, 4, 3, 2, 2, 2), _t(r, 3), _t(r, 3)])
    add_case("linear", F.linear, [_t(r, 4, 5), _t(r, 5, 3), _t(r, 3)])
    add_case("temporal_mean", F.temporal_mean, [_t(r, 2, 5, 3)])
    add_case("global_spatial_mean", F.global_spatial_mean, [_t(r, 2, 3, 4, 2, 3)])
    H = 3
    lstm_in = [_t(r, 2, 5, 4), Tensor(r.standard_normal((4 * H, 4)) * 0.5, requires_grad=True),
               Tensor(r.standard_normal((4 * H, H)) * 0.5, requires_grad=True), _t(r, 4 * H), _t(r, 4 * H)]
    add_case("lstm_sequence", lambda *xs: F.lstm_sequence(*xs), lstm_in)
    add_case("lstm_sequence_reverse", lambda *xs: F.lstm_sequence(*xs, reverse=True),
             [Tensor(t.data.copy(), requires_grad=True) for t in lstm_in])
    labels = r.integers(0, 5, 4)
    logits = _t(r, 4, 5)
    cases["softmax_cross_entropy"] = (lambda: F.softmax_cross_entropy(logits, labels)[0], [logits])
    return cases


def gradcheck_op(name: str, seed: int = 0, h: float = GRAD_H, tol: float = 1e-4) -> GradCheckReport:
    cases = op_cases(seed)
    if name not in cases:
        raise ConfigError(f"unknown op {name!r}; choose from {sorted(cases)}")
    fn, inputs = cases[name]
    return check_gradients(fn, inputs, h=h, tol=tol, floor=GRAD_FLOOR)


def micro_batch(config: ExperimentConfig, T: int = 8, size: int = 16, batch: int = 2, seed: int = 0,
                dtype=np.float64, requires_grad: bool = False) -> dict:
    r = np.random.default_rng(seed)
    out = {}
    if "gray" in config.inputs:
        out["gray"] = Tensor(r.standard_normal((batch, 1, T, size, size)).astype(dtype), requires_grad=requires_grad)
    if "flow" in config.inputs:
        out["flow"] = Tensor(r.uniform(-1, 1, (batch, 2, T, size, size)).astype(dtype), requires_grad=requires_grad)
    return out


def gradcheck_config(config: ExperimentConfig, seed: int = 0, max_checks: int = 40, vocab: int = 5, T: int = 8,
                     size: int = 16, h: float = GRAD_H, tol: float = 1e-4,
                     include_inputs: bool = True, batch_size: int = 4) -> GradCheckReport:
    """Finite-difference check of a whole micro model (64-bit, train-mode batch norm).

    ``max_checks`` entries are sampled across every parameter tensor (and the
    input clips when ``include_inputs``).
    """
    from .trainer import assemble

    model = assemble(config, vocab, Rng(seed)).to(np.float64)
    batch = micro_batch(config, T, size, batch=batch_size, seed=seed, requires_grad=include_inputs)
    labels = np.arange(batch_size) % vocab
    wrt = model.parameters()
    if include_inputs:
        wrt.extend(batch.values())

    def loss():
        return F.softmax_cross_entropy(model(**batch), labels)[0]

    return check_gradients(loss, wrt, h=h, tol=tol, max_checks=max_checks, seed=seed, floor=GRAD_FLOOR)


def zero_grad_layers(model: Module, batch: dict, labels) -> list[str]:
    """Names of parameter tensors whose gradient is identically zero on ``batch``."""
    from .tensor import Tape, backward

    for p in model.parameters():
        p.grad = None
    with Tape() as tape:
        loss, _ = F.softmax_cross_entropy(model(**batch), labels)
    backward(tape, loss)
    return [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]


def temporal_reach(net: Module, in_channels: int = 1, T: int = 40, size: int = 16, seed: int = 0,
                   probe: Optional[int] = None, time_axis: int = 1) -> int:
    """How many steps a single-frame change spreads in the output sequence.

    Measured, not derived: the output of an eval-mode network (time on
    ``time_axis``, [B,T,D] by default) is compared with and without a
    perturbation of the middle frame.
    """
    from .tensor import no_grad

    r = np.random.default_rng(seed)
    x = r.standard_normal((1, in_channels, T, size, size)).astype(np.float32)
    t0 = T // 2 if probe is None else probe
    y = x.copy()
    y[:, :, t0] += r.standard_normal(y[:, :, t0].shape).astype(np.float32)
    was = net.training
    net.eval()
    with no_grad():
        a = net(Tensor(x)).data
        b = net(Tensor(y)).data
    net.train(was)
    diff = np.moveaxis(np.abs(a - b), time_axis, 1)
    changed = np.nonzero(diff.reshape(diff.shape[0], diff.shape[1], -1).max(axis=(0, 2)) > 0)[0]
    return int(np.abs(changed - t0).max()) if len(changed) else 0


def tied_bilstm(input_size: int, hidden: int, vocab: int, rng: Rng, layers: int = 2) -> BiLSTM:
    from .backends import tie_directions

    net = BiLSTM(BiLstmSpec(input_size, hidden, vocab, layers), rng)
    tie_directions(net)
    return net
