"""Sequence classifiers: feature sequence [B,T,D] -> word logits [B,V]."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .errors import ConfigError, ShapeError
from .functional import ConvSpec, PoolSpec
from .frontends import scaled
from .layers import BatchNorm, Conv, Linear, Module, ModuleList, Pool
from .tensor import (Rng, Tensor, add, concat, expand, matmul, mul, narrow, relu, reshape, sigmoid, tanh,
                     tensor_create, transpose)

GATES = ("input", "forget", "cell", "output")


@dataclass
class LstmCellParams:
    """W_ih [4H,D], W_hh [4H,H], b_ih / b_hh [4H]; gate blocks in ``GATES`` order."""

    w_ih: Tensor
    w_hh: Tensor
    b_ih: Tensor
    b_hh: Tensor

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]


def lstm_cell_step(params: LstmCellParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step built from primitive ops; accepts [D] or [B,D] inputs."""
    H, D = params.hidden, params.input_size
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t, h_prev, c_prev = (reshape(v, (1, v.shape[0])) for v in (x_t, h_prev, c_prev))
    B = x_t.shape[0]
    if x_t.shape != (B, D) or h_prev.shape != (B, H) or c_prev.shape != (B, H):
        raise ShapeError(f"lstm step: x {list(x_t.shape)}, h {list(h_prev.shape)}, c {list(c_prev.shape)} "
                         f"do not match D={D}, H={H}")
    bias = reshape(add(params.b_ih, params.b_hh), (1, 4 * H))
    z = add(add(matmul(x_t, transpose(params.w_ih, (1, 0))), matmul(h_prev, transpose(params.w_hh, (1, 0)))),
            expand(bias, (B, 4 * H)))
    i = sigmoid(narrow(z, 1, 0, H))
    f = sigmoid(narrow(z, 1, H, H))
    g = tanh(narrow(z, 1, 2 * H, H))
    o = sigmoid(narrow(z, 1, 3 * H, H))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    if squeeze:
        h, c = reshape(h, (H,)), reshape(c, (H,))
    return h, c


class LSTMDirection(Module):
    """Parameters for one direction of one layer."""

    def __init__(self, input_size: int, hidden: int, rng: Rng) -> None:
        super().__init__()
        self.w_ih = tensor_create([4 * hidden, input_size], "kaiming", rng=rng, fan_in=input_size, requires_grad=True)
        self.w_hh = tensor_create([4 * hidden, hidden], "kaiming", rng=rng, fan_in=hidden, requires_grad=True)
        b = np.zeros(4 * hidden, dtype=np.float32)
        b[hidden:2 * hidden] = 1.0  # forget gate
        self.b_ih = Tensor(b, requires_grad=True)
        self.b_hh = tensor_create([4 * hidden], "zeros", requires_grad=True)

    @property
    def params(self) -> LstmCellParams:
        return LstmCellParams(self.w_ih, self.w_hh, self.b_ih, self.b_hh)

    def forward(self, x: Tensor, reverse: bool = False) -> Tensor:
        return F.lstm_sequence(x, self.w_ih, self.w_hh, self.b_ih, self.b_hh, reverse)


@dataclass(frozen=True)
class BiLstmSpec:
    input_size: int
    hidden: int = 256
    vocab: int = 500
    layers: int = 2


class BiLSTM(Module):
    """Stacked bidirectional LSTM; last-layer outputs averaged over time, then a linear head."""

    def __init__(self, spec: BiLstmSpec, rng: Rng) -> None:
        super().__init__()
        self.spec = spec
        self.fwd = ModuleList()
        self.bwd = ModuleList()
        size = spec.input_size
        for _ in range(spec.layers):
            self.fwd.append(LSTMDirection(size, spec.hidden, rng))
            self.bwd.append(LSTMDirection(size, spec.hidden, rng))
            size = 2 * spec.hidden
        self.head = Linear(2 * spec.hidden, spec.vocab, rng)

    def sequence(self, feats: Tensor) -> Tensor:
        """Per-step outputs of the last layer, [B,T,2H]."""
        if feats.ndim == 2:
            feats = reshape(feats, (1,) + feats.shape)
        if feats.shape[1] < 1:
            raise ShapeError("empty sequence")
        y = feats
        for f, b in zip(self.fwd, self.bwd):
            y = concat([f(y), b(y, reverse=True)], axis=2)
        return y

    def forward(self, feats: Tensor) -> Tensor:
        return self.head(F.temporal_mean(self.sequence(feats)))


def tie_directions(net: BiLSTM) -> None:
    """Make the network mirror-symmetric in time.

    Backward cells copy the forward cells; from the second layer on, their
    input columns are swapped half-for-half because time reversal swaps the two
    directions' outputs.  The head's two row blocks are made equal.
    """
    H = net.spec.hidden
    for layer, (f, b) in enumerate(zip(net.fwd, net.bwd)):
        w_ih = f.w_ih.data.copy()
        if layer > 0:
            w_ih = np.concatenate([w_ih[:, H:], w_ih[:, :H]], axis=1)
        b.w_ih.data[...] = w_ih
        b.w_hh.data[...] = f.w_hh.data
        b.b_ih.data[...] = f.b_ih.data
        b.b_hh.data[...] = f.b_hh.data
    net.head.weight.data[H:] = net.head.weight.data[:H]


def bilstm_forward(net: BiLSTM, feats: Tensor) -> Tensor:
    return net(feats)


@dataclass(frozen=True)
class Tc1dSpec:
    input_size: int
    conv1: int = 512
    conv2: int = 1024
    kernel: int = 5
    stride: int = 2
    padding: int = 2
    vocab: int = 500


class TC1D(Module):
    """conv(k5,s2,p2)-BN-ReLU -> maxpool(2,2) -> conv(k5,s2,p2)-BN-ReLU -> temporal mean -> linear."""

    def __init__(self, spec: Tc1dSpec, rng: Rng) -> None:
        super().__init__()
        self.spec = spec
        k, s, p = (spec.kernel, 1, 1), (spec.stride, 1, 1), (spec.padding, 0, 0)
        self.conv1 = Conv(ConvSpec(spec.input_size, spec.conv1, k, s, p), rng)
        self.bn1 = BatchNorm(spec.conv1)
        self.pool = Pool(PoolSpec("max", (2, 1, 1), (2, 1, 1)))
        self.conv2 = Conv(ConvSpec(spec.conv1, spec.conv2, k, s, p), rng)
        self.bn2 = BatchNorm(spec.conv2)
        self.head = Linear(spec.conv2, spec.vocab, rng)

    def stage_lengths(self, T: int) -> tuple[int, int, int]:
        s = self.spec
        t1 = F.conv_output_length(T, s.kernel, s.stride, s.padding)
        t2 = t1 // 2
        t3 = F.conv_output_length(t2, s.kernel, s.stride, s.padding)
        if min(t1, t2, t3) < 1:
            raise ShapeError(f"sequence of length {T} too short for the temporal ConvNet")
        return t1, t2, t3

    def columns(self, feats: Tensor) -> Tensor:
        """Post-conv activations [B, C, T'] before temporal averaging."""
        if feats.ndim == 2:
            feats = reshape(feats, (1,) + feats.shape)
        B, T, D = feats.shape
        self.stage_lengths(T)
        x = reshape(transpose(feats, (0, 2, 1)), (B, D, T, 1, 1))
        y = relu(self.bn1(self.conv1(x)))
        y = self.pool(y)
        y = relu(self.bn2(self.conv2(y)))
        return reshape(y, y.shape[:3])

    def forward(self, feats: Tensor) -> Tensor:
        y = self.columns(feats)
        return self.head(F.temporal_mean(transpose(y, (0, 2, 1))))


def tc1d_forward(net: TC1D, feats: Tensor) -> Tensor:
    return net(feats)


class TemporalMeanHead(Module):
    """Average features over time, then a linear classifier (pre-training heads)."""

    def __init__(self, input_size: int, vocab: int, rng: Rng) -> None:
        super().__init__()
        self.head = Linear(input_size, vocab, rng)

    def forward(self, feats: Tensor) -> Tensor:
        if feats.ndim == 2:
            feats = reshape(feats, (1,) + feats.shape)
        return self.head(F.temporal_mean(feats))


BACKENDS = ("TC1D", "BiLSTM")


def build_backend(kind: str, input_size: int, vocab: int, m=1, rng: Optional[Rng] = None) -> Module:
    rng = rng or Rng(0)
    if kind == "BiLSTM":
        return BiLSTM(BiLstmSpec(input_size, scaled(256, m), vocab), rng)
    if kind == "TC1D":
        return TC1D(Tc1dSpec(input_size, scaled(512, m), scaled(1024, m), vocab=vocab), rng)
    if kind == "Mean":
        return TemporalMeanHead(input_size, vocab, rng)
    raise ConfigError(f"unknown back-end {kind!r}")
