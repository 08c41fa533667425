"""Parameter containers: a small module system over the functional ops."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .errors import ShapeError
from .tensor import Rng, Tensor, relu, tensor_create


class Module:
    """Base class tracking parameters, buffers and child modules by attribute."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._children.items())

    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for mod_name, mod in self.modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.modules(prefix):
            for name, b in mod._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), b

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((n, p.data) for n, p in self.named_parameters())
        out.update((n, b) for n, b in self.named_buffers())
        return out

    def load_state_dict(self, state, strict: bool = True) -> None:
        own = self.state_dict()
        if strict:
            missing = [k for k in own if k not in state]
            if missing:
                raise ShapeError(f"missing entries: {missing[:5]}")
        for name, value in state.items():
            if name not in own:
                if strict:
                    raise ShapeError(f"unexpected entry {name!r}")
                continue
            target = own[name]
            if target.shape != tuple(value.shape):
                raise ShapeError(f"entry {name!r}: shape {list(value.shape)} != expected {list(target.shape)}")
            target[...] = value

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (used for 64-bit gradient checks)."""
        for _, mod in self.modules():
            for p in mod._params.values():
                p.data = p.data.astype(dtype)
            for name, b in list(mod._buffers.items()):
                mod.register_buffer(name, b.astype(dtype))
        return self


class ModuleList(Module):
    def __init__(self, modules=()) -> None:
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Sequential(ModuleList):
    def forward(self, x):
        for m in self._items:
            x = m(x)
        return x


class Conv(Module):
    """3D convolution layer; 2D layers are the t=1 special case."""

    def __init__(self, spec: F.ConvSpec, rng: Rng, temporal_padding: str = "zeros") -> None:
        super().__init__()
        self.spec = spec
        self.temporal_padding = temporal_padding
        fan_in = spec.in_channels * int(np.prod(spec.kernel))
        self.weight = tensor_create(spec.weight_shape, "kaiming", rng=rng, fan_in=fan_in, requires_grad=True)
        self.bias = tensor_create([spec.out_channels], "zeros", requires_grad=True) if spec.bias else None

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        return F.conv3d(x, self.weight, self.bias, s.stride, s.padding, self.temporal_padding)


class BatchNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> None:
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = tensor_create([channels], "constant", value=1.0, requires_grad=True)
        self.beta = tensor_create([channels], "zeros", requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class Linear(Module):
    """y = x @ W + b with W stored as [in, out]."""

    def __init__(self, in_features: int, out_features: int, rng: Rng, bias: bool = True) -> None:
        super().__init__()
        self.weight = tensor_create([in_features, out_features], "kaiming", rng=rng, fan_in=in_features,
                                    requires_grad=True)
        self.bias = tensor_create([out_features], "zeros", requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Pool(Module):
    def __init__(self, spec: F.PoolSpec) -> None:
        super().__init__()
        self.spec = spec

    def forward(self, x: Tensor) -> Tensor:
        return F.pool3d(x, self.spec)


class ConvBNReLU(Module):
    """Convolution followed by batch normalisation and ReLU."""

    def __init__(self, spec: F.ConvSpec, rng: Rng, act: bool = True) -> None:
        super().__init__()
        self.conv = Conv(spec, rng)
        self.bn = BatchNorm(spec.out_channels)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return relu(y) if self.act else y


def set_temporal_padding(net: Module, mode: str) -> None:
    for _, m in net.modules():
        if isinstance(m, Conv):
            m.temporal_padding = mode


def conv_layers(net: Module) -> list[tuple[str, Conv]]:
    return [(n, m) for n, m in net.modules() if isinstance(m, Conv)]


def find(net: Module, name: str) -> Optional[Module]:
    for n, m in net.modules():
        if n == name:
            return m
    return None
