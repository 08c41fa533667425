"""Tensor storage and tape-based reverse-mode automatic differentiation.

A :class:`Tensor` wraps a NumPy array (``float32`` by default, ``float64`` for
gradient checking).  Differentiable operations executed while a :class:`Tape`
is active append a record holding a backward closure; :func:`backward` walks
those records in reverse to produce gradients for every ``requires_grad`` leaf.

There is no implicit broadcasting: binary operations require identical shapes
and :func:`expand` must be used explicitly.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    """N-dimensional real array with an optional autodiff node."""

    __slots__ = ("data", "_requires_grad", "node", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.node: Optional[int] = None
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t._requires_grad = False
        t.node = None
        t.grad = None
        t.name = None
        return t

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        # a tensor that starts requiring grad becomes a leaf with its own node id
        self._requires_grad = bool(flag)
        if flag and self.node is None:
            self.node = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype}{flag})"

    # operator sugar; every operator maps onto an explicit op below
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class Record:
    """One differentiable operation on the tape."""

    op: str
    inputs: tuple[Tensor, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations on ``requires_grad`` tensors executed
    inside the block are recorded.  Records are appended in execution order, so
    the list is always a valid topological order.
    """

    def __init__(self) -> None:
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def current_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording inside the block (used for evaluation)."""

    def __enter__(self) -> None:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        self._saved = list(stack)
        stack.clear()

    def __exit__(self, *exc) -> None:
        _local.stack[:] = self._saved


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording it when any input needs grad."""
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(Record(op, tuple(inputs), out.node, backward_fn))
    return out


# ---------------------------------------------------------------------------
# random numbers and creation
# ---------------------------------------------------------------------------


class Rng:
    """Seeded generator backed by the Philox-4x64 counter-based bit generator.

    Philox is a fixed, published algorithm; NumPy implements it identically on
    every platform, so a seed fully determines the stream.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.gen.uniform(low, high, size=shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, std, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def random(self, size=None):
        """Uniform [0, 1): a float, or an array when ``size`` is given."""
        if size is None:
            return float(self.gen.random())
        return self.gen.random(size)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; deterministic in (seed, key)."""
        return Rng((self.seed * 1_000_003 + int(key)) % (2**63))


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"extents must be a non-empty list of positive integers, got {list(shape)}")
    return shape


def tensor_create(shape, init="zeros", *, value: float = 0.0, low: float = -1.0, high: float = 1.0,
                  rng: Optional[Rng] = None, fan_in: Optional[int] = None,
                  requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    """Create a tensor with one of the ``zeros | constant | uniform | kaiming`` initialisers.

    Kaiming draws from N(0, 2 / fan_in); ``fan_in`` defaults to the product of
    every extent but the first.
    """
    shape = _check_shape(shape)
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif init == "uniform":
        if rng is None:
            raise ContractError("uniform init needs an Rng")
        data = rng.uniform(low, high, shape).astype(dtype)
    elif init == "kaiming":
        if rng is None:
            raise ContractError("kaiming init needs an Rng")
        if fan_in is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        data = rng.normal(shape, std=np.sqrt(2.0 / fan_in)).astype(dtype)
    else:
        raise ContractError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} differ (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return make_result(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_result(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None, c: float = 1.0) -> Tensor:
    """Dispatch by name: ``add | sub | mul | relu | scale | sigmoid | tanh``."""
    binary = {"add": add, "sub": sub, "mul": mul}
    if op in binary:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return binary[op](a, b)
    if op == "scale":
        return scale(a, c)
    unary = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
    if op not in unary:
        raise ContractError(f"unknown elementwise op {op!r}")
    return unary[op](a)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------


def _mm64(a: np.ndarray, b: np.ndarray, dtype) -> np.ndarray:
    return np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False)).astype(dtype, copy=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[M,K] x [K,N] -> [M,N] with 64-bit accumulation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape[1]} vs {b.shape[0]}")
    ad, bd = a.data, b.data
    dtype = np.result_type(ad, bd)

    def backward(g):
        return _mm64(g, bd.T, ad.dtype), _mm64(ad.T, g, bd.dtype)

    return make_result(_mm64(ad, bd, dtype), (a, b), backward, "matmul")


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element as a 0-d tensor (64-bit accumulation)."""
    shape, dtype = a.shape, a.dtype
    out = np.asarray(np.sum(a.data, dtype=np.float64), dtype=dtype)
    return make_result(out, (a,), lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def mean(a: Tensor, axes) -> Tensor:
    """Arithmetic mean over ``axes`` (removed from the shape)."""
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    axes = tuple(ax % a.ndim for ax in axes)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    shape, dtype = a.shape, a.dtype
    out = np.mean(a.data, axis=axes, dtype=np.float64).astype(dtype)
    keep = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(keep) / dtype.type(count), shape).astype(dtype),)

    return make_result(out, (a,), backward, "mean")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                       lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of size-1 axes to ``shape`` (ranks must agree)."""
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"cannot expand {list(a.shape)} to {list(shape)}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    src = a.shape
    return make_result(np.broadcast_to(a.data, shape).copy(), (a,),
                       lambda g: (g.sum(axis=axes).reshape(src),), "expand")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries of ``axis`` starting at ``start``."""
    axis %= a.ndim
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}, {start + length}) out of range for extent {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return make_result(a.data[idx].copy(), (a,), backward, "narrow")


def flip(a: Tensor, axis: int) -> Tensor:
    return make_result(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),), "flip")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Join along ``axis``; all other extents must agree."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0]
    axis %= ref.ndim
    for t in tensors:
        if t.ndim != ref.ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis):
            raise ShapeError(f"concat: {list(t.shape)} incompatible with {list(ref.shape)} on axis {axis}")
        if t.shape[axis] < 1:
            raise ShapeError("concat: zero-extent operand")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward, "stack")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep; returns ``{leaf node id: gradient}``.

    Each leaf's ``.grad`` is overwritten with its gradient.  Gradients from
    fan-out are summed.  Intermediate gradients are released as soon as their
    record has been processed.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {list(loss.shape)}")
    if loss.node is None:
        raise ContractError("loss is not on the tape (no input requires grad)")
    produced = {r.output for r in tape.records}
    if loss.node not in produced:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node not in produced:
                leaves[t.node] = t
            prev = grads.get(t.node)
            grads[t.node] = gi if prev is None else prev + gi
    out = {}
    for node, t in leaves.items():
        g = grads[node]
        if g.shape != t.shape:
            g = g.reshape(t.shape)
        t.grad = g
        out[node] = g
    return out


def leaves_of(params: Iterable[Tensor]) -> list[Tensor]:
    return [p for p in params if p.requires_grad]
