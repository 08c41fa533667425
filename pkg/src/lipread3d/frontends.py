"""Front-end feature extractors: clip [B,C,T,H,W] -> feature sequence [B,T,D].

Four families are provided:

* ``Res2D``            ResNet-34 applied to every frame independently.
* ``Shallow3D_Res2D``  three 3D conv layers (64/64/96) then a per-step ResNet-34.
* ``I3D``              Inception-v1 with every operation in 3D.
* ``TwoStream``        two front-ends of one inner kind (grayscale + flow),
                       features concatenated along D.

Every network can also be built with ``dims=2`` (unit temporal kernels), which
is the per-frame source network used for weight inflation.  All temporal
strides are 1, so T is preserved end to end.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from . import layers as L
from .errors import ConfigError, ShapeError
from .functional import ConvSpec, PoolSpec
from .layers import BatchNorm, Conv, ConvBNReLU, Module, ModuleList, Pool
from .tensor import Rng, Tape, Tensor, add, concat, no_grad, relu, reshape, transpose

VALID_MULTIPLIERS = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8))
KINDS = ("Res2D", "Shallow3D_Res2D", "I3D")

# Inception-v1 branch table: (1x1, 3x3 reduce, 3x3, 3x3 reduce, 3x3, pool proj)
INCEPTION_TABLE: dict[str, tuple[int, int, int, int, int, int]] = {
    "mixed_3b": (64, 96, 128, 16, 32, 32),
    "mixed_3c": (128, 128, 192, 32, 96, 64),
    "mixed_4b": (192, 96, 208, 16, 48, 64),
    "mixed_4c": (160, 112, 224, 24, 64, 64),
    "mixed_4d": (128, 128, 256, 24, 64, 64),
    "mixed_4e": (112, 144, 288, 32, 64, 64),
    "mixed_4f": (256, 160, 320, 32, 128, 128),
    "mixed_5b": (256, 160, 320, 32, 128, 128),
    "mixed_5c": (384, 192, 384, 48, 128, 128),
}
INCEPTION_STAGES = (("mixed_3b", "mixed_3c"),
                    ("mixed_4b", "mixed_4c", "mixed_4d", "mixed_4e", "mixed_4f"),
                    ("mixed_5b", "mixed_5c"))
RESNET34_BLOCKS = (3, 4, 6, 3)
RESNET_WIDTHS = (64, 128, 256, 512)


def parse_multiplier(m) -> Fraction:
    frac = Fraction(m).limit_denominator(64) if not isinstance(m, Fraction) else m
    if frac not in VALID_MULTIPLIERS:
        raise ConfigError(f"width_multiplier must be one of 1, 1/2, 1/4, 1/8; got {m}")
    return frac


def scaled(channels: int, m) -> int:
    """Channel count under width multiplier ``m`` (never below 4)."""
    return max(4, int(round(channels * float(parse_multiplier(m)))))


@dataclass(frozen=True)
class FrontEndKind:
    name: str
    width_multiplier: Fraction = Fraction(1)
    inner: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "width_multiplier", parse_multiplier(self.width_multiplier))
        if self.name == "TwoStream":
            if self.inner not in KINDS:
                raise ConfigError(f"TwoStream needs an inner kind from {KINDS}, got {self.inner!r}")
        elif self.name not in KINDS:
            raise ConfigError(f"unknown front-end kind {self.name!r}")

    @property
    def two_stream(self) -> bool:
        return self.name == "TwoStream"

    @property
    def base(self) -> str:
        return self.inner if self.two_stream else self.name

    def feature_width(self) -> int:
        m = self.width_multiplier
        single = scaled(1024, m) if self.base == "I3D" else scaled(RESNET_WIDTHS[-1], m)
        return 2 * single if self.two_stream else single

    @classmethod
    def parse(cls, text: str, m=1) -> "FrontEndKind":
        """Parse ``Res2D``, ``I3D``, ``TwoStream(I3D)`` and friends."""
        text = text.strip()
        if text.startswith("TwoStream"):
            inner = text[len("TwoStream"):].strip("() ")
            return cls("TwoStream", m, inner)
        return cls(text, m)

    def __str__(self) -> str:
        return f"TwoStream({self.inner})" if self.two_stream else self.name


def _k(dims: int, t: int, s: int) -> tuple[int, int, int]:
    return (t if dims == 3 else 1, s, s)


# ---------------------------------------------------------------------------
# ResNet-34 (2D, applied per frame; tensors carry a unit T axis)
# ---------------------------------------------------------------------------


class BasicBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng: Rng) -> None:
        super().__init__()
        self.conv1 = ConvBNReLU(ConvSpec(cin, cout, (1, 3, 3), (1, stride, stride), (0, 1, 1), bias=False), rng)
        self.conv2 = ConvBNReLU(ConvSpec(cout, cout, (1, 3, 3), 1, (0, 1, 1), bias=False), rng, act=False)
        if stride != 1 or cin != cout:
            self.shortcut = ConvBNReLU(ConvSpec(cin, cout, 1, (1, stride, stride), 0, bias=False), rng, act=False)
        else:
            self.shortcut = None

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(self.conv1(x))
        s = self.shortcut(x) if self.shortcut is not None else x
        return relu(add(y, s))


class ResNet34(Module):
    """ResNet-34 trunk on [N,C,1,H,W] returning pooled features [N, 512*m]."""

    def __init__(self, in_channels: int, m, rng: Rng) -> None:
        super().__init__()
        widths = [scaled(w, m) for w in RESNET_WIDTHS]
        self.stem = ConvBNReLU(ConvSpec(in_channels, widths[0], (1, 7, 7), (1, 2, 2), (0, 3, 3), bias=False), rng)
        self.stem_pool = Pool(PoolSpec("max", (1, 3, 3), (1, 2, 2), (0, 1, 1)))
        self.layers = ModuleList()
        cin = widths[0]
        for stage, (n, w) in enumerate(zip(RESNET34_BLOCKS, widths)):
            blocks = ModuleList()
            for i in range(n):
                stride = 2 if (i == 0 and stage > 0) else 1
                blocks.append(BasicBlock(cin, w, stride, rng))
                cin = w
            self.layers.append(blocks)
        self.out_features = cin

    def forward(self, x: Tensor) -> Tensor:
        y = self.stem_pool(self.stem(x))
        for blocks in self.layers:
            for block in blocks:
                y = block(y)
        y = F.global_spatial_mean(y)  # [N, C, 1]
        return reshape(y, (y.shape[0], y.shape[1]))


def _per_step(net: Module, x: Tensor) -> Tensor:
    """Apply a per-frame trunk to every time step of x[B,C,T,H,W] -> [B,T,D]."""
    B, C, T, H, W = x.shape
    frames = reshape(transpose(x, (0, 2, 1, 3, 4)), (B * T, C, 1, H, W))
    feats = net(frames)
    return reshape(feats, (B, T, feats.shape[1]))


class FrontEnd(Module):
    in_channels: int
    out_features: int

    def _check_input(self, clip: Tensor) -> None:
        if clip.ndim != 5:
            raise ShapeError(f"front-end expects [B,C,T,H,W], got {list(clip.shape)}")
        if clip.shape[1] != self.in_channels:
            raise ShapeError(f"front-end expects {self.in_channels} input channel(s), got {clip.shape[1]}")


class Res2DFrontEnd(FrontEnd):
    """Deep 2D CNN: ResNet-34 on each frame, features stacked over time."""

    def __init__(self, in_channels: int = 1, m=1, rng: Optional[Rng] = None, dims: int = 3) -> None:
        super().__init__()
        rng = rng or Rng(0)
        self.in_channels = in_channels
        self.resnet = ResNet34(in_channels, m, rng)
        self.out_features = self.resnet.out_features

    def forward(self, clip: Tensor) -> Tensor:
        self._check_input(clip)
        return _per_step(self.resnet, clip)


class Shallow3DRes2DFrontEnd(FrontEnd):
    """Three 3D conv layers (3x5x5, 3x5x5, 3x3x3), each with BN, ReLU and a 1x2x2 max-pool,
    then ResNet-34 per time step over the 96*m channel activation map."""

    def __init__(self, in_channels: int = 1, m=1, rng: Optional[Rng] = None, dims: int = 3) -> None:
        super().__init__()
        rng = rng or Rng(0)
        self.in_channels = in_channels
        c1, c2, c3 = scaled(64, m), scaled(64, m), scaled(96, m)
        pt = 1 if dims == 3 else 0
        self.conv3d_1 = ConvBNReLU(ConvSpec(in_channels, c1, _k(dims, 3, 5), 1, (pt, 2, 2)), rng)
        self.pool_1 = Pool(PoolSpec("max", (1, 2, 2), (1, 2, 2), ceil_mode=True))
        self.conv3d_2 = ConvBNReLU(ConvSpec(c1, c2, _k(dims, 3, 5), 1, (pt, 2, 2)), rng)
        self.pool_2 = Pool(PoolSpec("max", (1, 2, 2), (1, 2, 2), ceil_mode=True))
        self.conv3d_3 = ConvBNReLU(ConvSpec(c2, c3, _k(dims, 3, 3), 1, (pt, 1, 1)), rng)
        self.pool_3 = Pool(PoolSpec("max", (1, 2, 2), (1, 2, 2), ceil_mode=True))
        self.resnet = ResNet34(c3, m, rng)
        self.out_features = self.resnet.out_features

    def forward(self, clip: Tensor) -> Tensor:
        self._check_input(clip)
        y = self.pool_1(self.conv3d_1(clip))
        y = self.pool_2(self.conv3d_2(y))
        y = self.pool_3(self.conv3d_3(y))
        return _per_step(self.resnet, y)


@dataclass(frozen=True)
class InceptionSpec:
    b1: int
    b2_reduce: int
    b2: int
    b3_reduce: int
    b3: int
    b4: int

    @property
    def out_channels(self) -> int:
        return self.b1 + self.b2 + self.b3 + self.b4

    @classmethod
    def scaled(cls, row: Sequence[int], m) -> "InceptionSpec":
        return cls(*(scaled(c, m) for c in row))


class Inception(Module):
    """Four parallel branches concatenated on channels; (T,H,W) preserved."""

    def __init__(self, cin: int, spec: InceptionSpec, rng: Rng, dims: int = 3) -> None:
        super().__init__()
        self.spec = spec
        p = (1 if dims == 3 else 0, 1, 1)
        k3 = _k(dims, 3, 3)
        self.b1 = ConvBNReLU(ConvSpec(cin, spec.b1, 1), rng)
        self.b2a = ConvBNReLU(ConvSpec(cin, spec.b2_reduce, 1), rng)
        self.b2b = ConvBNReLU(ConvSpec(spec.b2_reduce, spec.b2, k3, 1, p), rng)
        self.b3a = ConvBNReLU(ConvSpec(cin, spec.b3_reduce, 1), rng)
        self.b3b = ConvBNReLU(ConvSpec(spec.b3_reduce, spec.b3, k3, 1, p), rng)
        self.b4_pool = Pool(PoolSpec("max", k3, 1, p))
        self.b4 = ConvBNReLU(ConvSpec(cin, spec.b4, 1), rng)

    def forward(self, x: Tensor) -> Tensor:
        return concat([self.b1(x), self.b2b(self.b2a(x)), self.b3b(self.b3a(x)), self.b4(self.b4_pool(x))], axis=1)


class I3DFrontEnd(FrontEnd):
    """Inflated Inception-v1 with a 64/96/192 stem.

    Stem: 7x7x7 conv (spatial stride 2), 1x2x2 max-pool, two 3x3x3 convs,
    1x2x2 max-pool.  Nine inception modules in stages of (2, 5, 2) with 1x2x2
    max-pools between stages, global spatial average, then a 1x1x1 conv
    projecting the pooled features per time step.
    """

    def __init__(self, in_channels: int = 1, m=1, rng: Optional[Rng] = None, dims: int = 3) -> None:
        super().__init__()
        rng = rng or Rng(0)
        self.in_channels = in_channels
        self.dims = dims
        c1, c2, c3 = scaled(64, m), scaled(96, m), scaled(192, m)
        pt = 3 if dims == 3 else 0
        self.conv3d_1a = ConvBNReLU(ConvSpec(in_channels, c1, _k(dims, 7, 7), (1, 2, 2), (pt, 3, 3)), rng)
        self.pool_2a = Pool(PoolSpec("max", (1, 2, 2), (1, 2, 2), ceil_mode=True))
        p1 = 1 if dims == 3 else 0
        self.conv3d_2b = ConvBNReLU(ConvSpec(c1, c2, _k(dims, 3, 3), 1, (p1, 1, 1)), rng)
        self.conv3d_2c = ConvBNReLU(ConvSpec(c2, c3, _k(dims, 3, 3), 1, (p1, 1, 1)), rng)
        self.pool_3a = Pool(PoolSpec("max", (1, 2, 2), (1, 2, 2), ceil_mode=True))
        self.stages = ModuleList()
        self.stage_pools = ModuleList()
        cin = c3
        for s, names in enumerate(INCEPTION_STAGES):
            stage = ModuleList()
            for name in names:
                spec = InceptionSpec.scaled(INCEPTION_TABLE[name], m)
                stage.append(Inception(cin, spec, rng, dims))
                cin = spec.out_channels
            self.stages.append(stage)
            if s < len(INCEPTION_STAGES) - 1:
                self.stage_pools.append(Pool(PoolSpec("max", (1, 2, 2), (1, 2, 2), ceil_mode=True)))
        self.conv3d_6a = ConvBNReLU(ConvSpec(cin, cin, 1), rng)
        self.out_features = cin

    def trunk(self, clip: Tensor) -> Tensor:
        """Spatio-temporal activations [B, C, T, h, w] before spatial pooling."""
        y = self.pool_2a(self.conv3d_1a(clip))
        y = self.pool_3a(self.conv3d_2c(self.conv3d_2b(y)))
        for s, stage in enumerate(self.stages):
            for module in stage:
                y = module(y)
            if s < len(self.stage_pools):
                y = self.stage_pools[s](y)
        return y

    def forward(self, clip: Tensor) -> Tensor:
        self._check_input(clip)
        y = F.global_spatial_mean(self.trunk(clip))  # [B, C, T]
        B, C, T = y.shape
        y = self.conv3d_6a(reshape(y, (B, C, T, 1, 1)))
        return transpose(reshape(y, (B, C, T)), (0, 2, 1))


class TwoStreamFrontEnd(Module):
    """Independent grayscale and flow front-ends; features concatenated along D."""

    def __init__(self, gray: FrontEnd, flow: FrontEnd) -> None:
        super().__init__()
        self.gray = gray
        self.flow = flow
        self.out_features = gray.out_features + flow.out_features

    def forward(self, gray: Tensor, flow: Tensor) -> Tensor:
        return forward_two_stream(self.gray, self.flow, gray, flow)


def forward_two_stream(gray_net: FrontEnd, flow_net: FrontEnd, gray: Tensor, flow: Tensor) -> Tensor:
    g_shape = (gray.shape[0],) + tuple(gray.shape[2:])
    f_shape = (flow.shape[0],) + tuple(flow.shape[2:])
    if g_shape != f_shape:
        raise ShapeError(f"grayscale {list(gray.shape)} and flow {list(flow.shape)} streams are misaligned")
    return F.concat_channels(gray_net(gray), flow_net(flow), axis=-1)


_BUILDERS = {"Res2D": Res2DFrontEnd, "Shallow3D_Res2D": Shallow3DRes2DFrontEnd, "I3D": I3DFrontEnd}


def build_frontend(kind: str, in_channels: int = 1, m=1, rng: Optional[Rng] = None, dims: int = 3) -> FrontEnd:
    """Single-stream front-end of ``kind`` (one of Res2D, Shallow3D_Res2D, I3D)."""
    m = parse_multiplier(m)
    if kind not in _BUILDERS:
        raise ConfigError(f"unknown front-end kind {kind!r}")
    return _BUILDERS[kind](in_channels, m, rng or Rng(0), dims)


def build_res2d(m=1, in_channels: int = 1, rng: Optional[Rng] = None) -> Res2DFrontEnd:
    return build_frontend("Res2D", in_channels, m, rng)  # type: ignore[return-value]


def build_shallow3d_res2d(m=1, in_channels: int = 1, rng: Optional[Rng] = None) -> Shallow3DRes2DFrontEnd:
    return build_frontend("Shallow3D_Res2D", in_channels, m, rng)  # type: ignore[return-value]


def build_i3d(m=1, in_channels: int = 1, rng: Optional[Rng] = None, dims: int = 3) -> I3DFrontEnd:
    return build_frontend("I3D", in_channels, m, rng, dims)  # type: ignore[return-value]


def build_two_stream(inner: str = "I3D", m=1, rng: Optional[Rng] = None, dims: int = 3) -> TwoStreamFrontEnd:
    rng = rng or Rng(0)
    return TwoStreamFrontEnd(build_frontend(inner, 1, m, rng.spawn(1), dims),
                             build_frontend(inner, 2, m, rng.spawn(2), dims))


# ---------------------------------------------------------------------------
# architecture table
# ---------------------------------------------------------------------------

@dataclass
class LayerRow:
    name: str
    type: str
    kernel: str
    stride: str
    output_shape: tuple[int, ...]
    params: int


class _Tracer:
    """Patches Module.__call__ to capture leaf-layer outputs during one forward."""

    LEAVES = (Conv, BatchNorm, Pool, L.Linear)

    def __init__(self, net: Module) -> None:
        self.names = {id(m): n for n, m in net.modules()}
        self.rows: list[LayerRow] = []

    def __enter__(self):
        self._orig = Module.__call__
        tracer = self

        def traced(mod, *args, **kwargs):
            out = tracer._orig(mod, *args, **kwargs)
            if isinstance(mod, tracer.LEAVES):
                tracer.rows.append(_row(tracer.names.get(id(mod), "?"), mod, out.shape))
            return out

        Module.__call__ = traced
        return self

    def __exit__(self, *exc):
        Module.__call__ = self._orig


def _row(name: str, mod: Module, shape) -> LayerRow:
    params = sum(p.size for p in mod._params.values())
    if isinstance(mod, Conv):
        s = mod.spec
        kind = "conv3d" if s.kernel[0] > 1 else ("conv1x1x1" if s.kernel == (1, 1, 1) else "conv2d")
        return LayerRow(name, kind, "x".join(map(str, s.kernel)), "x".join(map(str, s.stride)), tuple(shape), params)
    if isinstance(mod, Pool):
        s = mod.spec
        return LayerRow(name, f"{s.kind}pool", "x".join(map(str, s.kernel)), "x".join(map(str, s.stride)),
                        tuple(shape), 0)
    if isinstance(mod, BatchNorm):
        return LayerRow(name, "batchnorm", "", "", tuple(shape), params)
    return LayerRow(name, "linear", "", "", tuple(shape), params)


def architecture_table(net: Module, inputs: Sequence[Tensor]) -> list[LayerRow]:
    """Forward-shape trace: one row per convolution, norm, pool and linear layer."""
    was_training = net.training
    net.eval()
    try:
        with no_grad(), _Tracer(net) as tracer:
            net(*inputs)
    finally:
        net.train(was_training)
    return tracer.rows


def table_csv(rows: Sequence[LayerRow], summary: Optional[dict] = None) -> str:
    """CSV of ``rows``; ``summary`` items follow as ``# key,value`` lines."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "type", "kernel", "stride", "output_shape", "params"])
    for r in rows:
        w.writerow([r.name, r.type, r.kernel, r.stride, "x".join(map(str, r.output_shape)), r.params])
    for key, value in (summary or {}).items():
        buf.write(f"# {key},{value}\n")
    return buf.getvalue()


def parse_table(text: str) -> tuple[list[dict], dict]:
    """Inverse of ``table_csv``: (row dicts, summary dict of ints)."""
    lines = text.splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    summary = {}
    for ln in lines:
        if ln.startswith("# "):
            key, value = ln[2:].split(",", 1)
            summary[key] = int(value)
    rows = list(csv.DictReader(io.StringIO("\n".join(body))))
    for r in rows:
        r["params"] = int(r["params"])
    return rows, summary


def architecture_summary(net: Module, inputs: Sequence[Tensor], rows: Sequence[LayerRow]) -> dict:
    """Feature width, conv depth along the deepest path, conv count and parameter count."""
    depth, total = conv_depth(net, inputs)
    return {
        "feature_width": int(getattr(net, "out_features", 0)),
        "conv_depth": depth,
        "conv_layers": total,
        "temporal_conv_layers": sum(1 for r in rows if r.type == "conv3d"),
        "params": net.param_count(),
    }


def conv_depth(net: Module, inputs: Sequence[Tensor]) -> tuple[int, int]:
    """(longest chain of convolutions from input to output, total convolutions executed).

    Computed from the recorded tape, so it reflects the wiring actually run.
    """
    depth: dict[int, int] = {}
    total = 0
    with Tape() as tape:
        out = net(*inputs)
    for rec in tape.records:
        d = max((depth.get(t.node, 0) for t in rec.inputs if t.node is not None), default=0)
        if rec.op == "conv3d":
            d += 1
            total += 1
        depth[rec.output] = d
    return depth.get(out.node, 0), total


def probe_inputs(kind: FrontEndKind, T: int, H: int, W: int, batch: int = 1,
                 requires_grad: bool = False) -> list[Tensor]:
    """Zero clips matching the front-end's input contract."""
    gray = Tensor(np.zeros((batch, 1, T, H, W), dtype=np.float32), requires_grad=requires_grad)
    if kind.two_stream:
        flow = Tensor(np.zeros((batch, 2, T, H, W), dtype=np.float32), requires_grad=requires_grad)
        return [gray, flow]
    return [gray]
