"""Differentiable layer primitives on [B, C, T, H, W] tensors.

Convolutions are cross-correlations lowered to a single GEMM (im2col).  2D and
1D variants reuse the 3D kernel with unit extents on the missing axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError
from .tensor import Tensor, _sigmoid, concat, make_result, mean

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 extents, got {v}")
    return v  # type: ignore[return-value]


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Triple = (1, 1, 1)
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError(f"invalid conv geometry {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")

    @property
    def weight_shape(self) -> tuple[int, int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)

    @property
    def param_count(self) -> int:
        return int(np.prod(self.weight_shape)) + (self.out_channels if self.bias else 0)

    def output_extents(self, extents: Sequence[int]) -> Triple:
        out = tuple((e + 2 * p - k) // s + 1 for e, p, k, s in zip(extents, self.padding, self.kernel, self.stride))
        if min(out) < 1:
            raise ShapeError(f"conv output extents {out} non-positive for input {tuple(extents)}")
        return out  # type: ignore[return-value]


@dataclass(frozen=True)
class PoolSpec:
    kind: str = "max"
    kernel: Triple = (1, 2, 2)
    stride: Triple = (1, 2, 2)
    padding: Triple = (0, 0, 0)
    ceil_mode: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.kind not in ("max", "avg"):
            raise ContractError(f"unknown pool kind {self.kind!r}")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ShapeError("pool kernel and stride extents must be >= 1")

    def output_extents(self, extents: Sequence[int]) -> tuple[Triple, Triple]:
        """Output extents and the extra trailing padding ceil mode needs."""
        outs, extra = [], []
        for e, p, k, s in zip(extents, self.padding, self.kernel, self.stride):
            span = e + 2 * p - k
            if span < 0 and not self.ceil_mode:
                raise ShapeError(f"pool kernel {k} larger than padded extent {e + 2 * p}")
            if self.ceil_mode:
                o = -(-span // s) + 1
                # the last window must start inside the input or left padding
                if (o - 1) * s >= e + p:
                    o -= 1
            else:
                o = span // s + 1
            if o < 1:
                raise ShapeError(f"pool output extent {o} for input extent {e}")
            outs.append(o)
            extra.append(max(0, (o - 1) * s + k - (e + 2 * p)))
        return tuple(outs), tuple(extra)  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pad5(x: np.ndarray, padding: Triple, temporal_mode: str, extra: Triple = (0, 0, 0), value=0.0) -> np.ndarray:
    pt, ph, pw = padding
    et, eh, ew = extra
    if not any(padding) and not any(extra):
        return x
    if temporal_mode == "replicate" and (pt or et):
        x = np.pad(x, ((0, 0), (0, 0), (pt, pt + et), (0, 0), (0, 0)), mode="edge")
        return np.pad(x, ((0, 0), (0, 0), (0, 0), (ph, ph + eh), (pw, pw + ew)), constant_values=value)
    return np.pad(x, ((0, 0), (0, 0), (pt, pt + et), (ph, ph + eh), (pw, pw + ew)), constant_values=value)


def _unpad5(g: np.ndarray, shape, padding: Triple, temporal_mode: str) -> np.ndarray:
    pt, ph, pw = padding
    _, _, T, H, W = shape
    core = g[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
    if temporal_mode == "replicate" and pt:
        core = core.copy()
        core[:, :, 0] += g[:, :, :pt, ph:ph + H, pw:pw + W].sum(axis=2)
        core[:, :, T - 1] += g[:, :, pt + T:, ph:ph + H, pw:pw + W].sum(axis=2)
        return core
    return np.ascontiguousarray(core)


# im2col buffers above this many elements are built and consumed in temporal chunks
COL_BUDGET = 1 << 24


def _gemm_dtype(*arrays):
    # float32 tensors use single-precision BLAS; float64 tensors stay in float64
    return np.result_type(*arrays)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0,
           temporal_padding: str = "zeros") -> Tensor:
    """Cross-correlation of x[B,C,T,H,W] with weight[O,C,kt,kh,kw].

    ``temporal_padding`` selects zero or edge-replicate padding along T; the
    spatial axes are always zero-padded.
    """
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects [B,C,T,H,W], got {list(x.shape)}")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d weight must be [O,C,kt,kh,kw], got {list(weight.shape)}")
    stride, padding = _triple(stride), _triple(padding)
    B, C, T, H, W = x.shape
    O, Cw, kt, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv3d: input has {C} channels, weight expects {Cw}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv3d bias must be [{O}], got {list(bias.shape)}")
    if temporal_padding not in ("zeros", "replicate"):
        raise ContractError(f"unknown temporal padding {temporal_padding!r}")
    spec = ConvSpec(C, O, (kt, kh, kw), stride, padding, bias is not None)
    To, Ho, Wo = spec.output_extents((T, H, W))
    st, sh, sw = stride
    K = C * kt * kh * kw
    N = B * To * Ho * Wo
    dtype = _gemm_dtype(x.data, weight.data)
    wm = weight.data.reshape(O, K).astype(dtype, copy=False)

    pointwise = (kt, kh, kw) == (1, 1, 1) and stride == (1, 1, 1) and padding == (0, 0, 0)
    if pointwise:
        xp = None
        whole = x.data.transpose(0, 2, 3, 4, 1).reshape(N, C).astype(dtype, copy=False)
        chunks = [(0, To)]
    else:
        xp = _pad5(x.data, padding, temporal_padding)
        win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
        per_t = B * Ho * Wo * K
        step = max(1, min(To, COL_BUDGET // max(per_t, 1)))
        chunks = [(t0, min(To, t0 + step)) for t0 in range(0, To, step)]
        whole = None

    def columns(t0, t1):
        if pointwise:
            return whole
        if len(chunks) == 1 and whole_cols:
            return whole_cols[0]
        return win[:, :, t0:t1].transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(-1, K).astype(dtype, copy=False)

    whole_cols: list = []
    out = np.empty((B, To, Ho, Wo, O), dtype=dtype)
    for t0, t1 in chunks:
        cols = columns(t0, t1)
        if len(chunks) == 1 and not pointwise:
            whole_cols.append(cols)
        out[:, t0:t1] = (cols @ wm.T).reshape(B, t1 - t0, Ho, Wo, O)
    if bias is not None:
        out += bias.data.astype(dtype, copy=False)
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    xshape, xdtype, wshape, wdtype = x.shape, x.dtype, weight.shape, weight.dtype
    has_bias = bias is not None
    need_dx = x.requires_grad

    def backward(g):
        gt = g.transpose(0, 2, 3, 4, 1).astype(dtype, copy=False)
        dw = np.zeros((O, K), dtype=dtype)
        db = g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(wdtype) if has_bias else None
        if pointwise:
            gm = gt.reshape(N, O)
            dw = (gm.T @ whole).reshape(wshape).astype(wdtype, copy=False)
            if not need_dx:
                return None, dw, db
            dx = (gm @ wm).reshape(B, T, H, W, C).transpose(0, 4, 1, 2, 3)
            return np.ascontiguousarray(dx, dtype=xdtype), dw, db
        dxp = np.zeros(xp.shape, dtype=dtype) if need_dx else None
        for t0, t1 in chunks:
            gm = np.ascontiguousarray(gt[:, t0:t1]).reshape(-1, O)
            dw += gm.T @ columns(t0, t1)
            if not need_dx:
                continue
            dc = np.ascontiguousarray((gm @ wm).reshape(B, t1 - t0, Ho, Wo, C, kt, kh, kw)
                                      .transpose(5, 6, 7, 0, 4, 1, 2, 3))
            tb = t0 * st
            for a in range(kt):
                ta = slice(tb + a, tb + a + st * (t1 - t0 - 1) + 1, st)
                for b in range(kh):
                    hb = slice(b, b + sh * (Ho - 1) + 1, sh)
                    for c in range(kw):
                        dxp[:, :, ta, hb, c:c + sw * (Wo - 1) + 1:sw] += dc[a, b, c]
        if not need_dx:
            return None, dw.reshape(wshape).astype(wdtype, copy=False), db
        dx = _unpad5(dxp, xshape, padding, temporal_padding)
        return dx.astype(xdtype, copy=False), dw.reshape(wshape).astype(wdtype, copy=False), db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out.astype(dtype, copy=False), inputs, backward, "conv3d")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """x[B,C,H,W] * weight[O,C,kh,kw]; shares the 3D path with a unit temporal axis."""
    from .tensor import reshape

    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W] and [O,C,kh,kw], got {list(x.shape)}, {list(weight.shape)}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    B, C, H, W = x.shape
    O = weight.shape[0]
    x5 = reshape(x, (B, C, 1, H, W))
    w5 = reshape(weight, (O, weight.shape[1], 1, weight.shape[2], weight.shape[3]))
    y = conv3d(x5, w5, bias, (1, sh, sw), (0, ph, pw))
    return reshape(y, (B, O, y.shape[3], y.shape[4]))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def pool3d(x: Tensor, spec: PoolSpec) -> Tensor:
    """Max or average pooling over (T,H,W).

    Max pooling breaks ties toward the lowest flat index inside the window;
    average pooling divides by the full window size (padding counts as zero).
    """
    if x.ndim != 5:
        raise ShapeError(f"pool3d expects [B,C,T,H,W], got {list(x.shape)}")
    B, C, T, H, W = x.shape
    (To, Ho, Wo), extra = spec.output_extents((T, H, W))
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    K = kt * kh * kw
    fill = -np.inf if spec.kind == "max" else 0.0
    xp = _pad5(x.data, spec.padding, "zeros", extra, value=fill)
    win = sliding_window_view(xp, spec.kernel, axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw][:, :, :To, :Ho, :Wo]
    win = win.reshape(B, C, To, Ho, Wo, K)
    padded_shape = xp.shape
    dtype = x.dtype

    if spec.kind == "max":
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    else:
        out = win.mean(axis=-1, dtype=np.float64).astype(dtype)
        arg = None

    def backward(g):
        pt, ph, pw = spec.padding
        if arg is not None:
            # scatter each output grad to the flat index of its argmax in the padded input
            _, _, Tp, Hp, Wp = padded_shape
            a, r = np.divmod(arg, kh * kw)
            b, c = np.divmod(r, kw)
            t_idx = np.arange(To)[:, None, None] * st + a
            h_idx = np.arange(Ho)[None, :, None] * sh + b
            w_idx = np.arange(Wo)[None, None, :] * sw + c
            plane = (t_idx * Hp + h_idx) * Wp + w_idx
            base = np.arange(B * C).reshape(B, C, 1, 1, 1) * (Tp * Hp * Wp)
            flat = np.bincount((plane + base).ravel(), weights=g.ravel(), minlength=B * C * Tp * Hp * Wp)
            dxp = flat.reshape(padded_shape).astype(dtype, copy=False)
        else:
            dxp = np.zeros(padded_shape, dtype=dtype)
            gk = g / K
            for a in range(kt):
                ta = slice(a, a + st * (To - 1) + 1, st)
                for b in range(kh):
                    hb = slice(b, b + sh * (Ho - 1) + 1, sh)
                    for c in range(kw):
                        dxp[:, :, ta, hb, c:c + sw * (Wo - 1) + 1:sw] += gk
        return (np.ascontiguousarray(dxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]),)

    return make_result(np.ascontiguousarray(out), (x,), backward, f"{spec.kind}pool3d")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over every axis except 1.

    In training mode the biased batch variance is used and the running
    statistics (updated in place) move by ``momentum``.  In eval mode only the
    running statistics are used.
    """
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm: channel axis of {list(x.shape)} does not match {gamma.shape[0]} channels")
    C = x.shape[1]
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    dtype = x.dtype
    xd = x.data
    count = x.size // C
    g_ = gamma.data.reshape(bshape)

    if training:
        if count < 2:
            raise ContractError("batchnorm in train mode needs at least 2 values per channel")
        mu = xd.mean(axis=axes, dtype=np.float64)
        var = np.mean(np.square(xd - mu.reshape(bshape).astype(dtype), dtype=np.float64), axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    invstd = (1.0 / np.sqrt(var + eps)).astype(dtype)
    xhat = (xd - mu.reshape(bshape).astype(dtype)) * invstd.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def backward(g):
        dbeta = g.sum(axis=axes, dtype=np.float64).astype(dtype)
        dgamma = (g * xhat).sum(axis=axes, dtype=np.float64).astype(dtype)
        dxhat = g * g_
        if training:
            s1 = dxhat.sum(axis=axes, dtype=np.float64).astype(dtype).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes, dtype=np.float64).astype(dtype).reshape(bshape)
            dx = (invstd.reshape(bshape) / count) * (count * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * invstd.reshape(bshape)
        return dx.astype(dtype, copy=False), dgamma, dbeta

    return make_result(out.astype(dtype, copy=False), (x, gamma, beta), backward, "batchnorm")


# ---------------------------------------------------------------------------
# dense layers and losses
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[B,in] @ weight[in,out] + bias[out], accumulated in 64 bits."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: {list(x.shape)} incompatible with weight {list(weight.shape)}")
    xd, wd = x.data, weight.data
    dtype = np.result_type(xd, wd)
    out = xd.astype(np.float64) @ wd.astype(np.float64)
    if bias is not None:
        out += bias.data
    out = out.astype(dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        dx = (g64 @ wd.T.astype(np.float64)).astype(xd.dtype)
        dw = (xd.T.astype(np.float64) @ g64).astype(wd.dtype)
        db = g64.sum(axis=0).astype(bias.dtype) if bias is not None else None
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, backward, "linear")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` under softmax(logits).

    Returns the scalar loss tensor and the row-stochastic probability array.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B,V], got {list(logits.shape)}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, V = logits.shape
    if labels.shape[0] != B:
        raise ShapeError(f"{labels.shape[0]} labels for batch of {B}")
    if labels.min() < 0 or labels.max() >= V:
        raise ContractError(f"labels must lie in [0, {V})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    probs = np.exp(logp)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    dtype = logits.dtype

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return ((d * (float(g) / B)).astype(dtype),)

    return make_result(np.asarray(loss, dtype=dtype), (logits,), backward, "softmax_xent"), probs


def concat_channels(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Concatenate two feature tensors along their channel axis."""
    return concat([a, b], axis)


def temporal_mean(x: Tensor) -> Tensor:
    """Average a [T,D] or [B,T,D] sequence over time."""
    if x.ndim not in (2, 3) or x.shape[-2] < 1:
        raise ShapeError(f"temporal_mean expects [T,D] or [B,T,D], got {list(x.shape)}")
    return mean(x, x.ndim - 2)


def global_spatial_mean(x: Tensor) -> Tensor:
    """[B,C,T,H,W] -> [B,C,T]."""
    return mean(x, (3, 4))


# ---------------------------------------------------------------------------
# recurrent
# ---------------------------------------------------------------------------


def lstm_sequence(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor, reverse: bool = False) -> Tensor:
    """Run one LSTM direction over x[B,T,D] from zero state; returns h[B,T,H].

    Gate order is (input, forget, candidate, output).  Back-propagation
    through time is done in one fused record; arithmetic is float64.
    """
    if x.ndim != 3:
        raise ShapeError(f"lstm_sequence expects [B,T,D], got {list(x.shape)}")
    B, T, D = x.shape
    H4, Dw = w_ih.shape
    H = H4 // 4
    if Dw != D or w_hh.shape != (H4, H) or b_ih.shape != (H4,) or b_hh.shape != (H4,):
        raise ShapeError("lstm_sequence: parameter shapes do not match input")
    f64 = np.float64
    xd = x.data.astype(f64)
    wih = w_ih.data.astype(f64)
    whh = w_hh.data.astype(f64)
    xp = xd.reshape(B * T, D) @ wih.T
    xp = xp.reshape(B, T, H4) + (b_ih.data.astype(f64) + b_hh.data.astype(f64))
    order = range(T - 1, -1, -1) if reverse else range(T)

    gates = np.empty((T, B, H4))
    cells = np.empty((T, B, H))
    tanhc = np.empty((T, B, H))
    hs = np.empty((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    prev_h = np.empty((T, B, H))
    prev_c = np.empty((T, B, H))
    for t in order:
        prev_h[t], prev_c[t] = h, c
        z = xp[:, t] + h @ whh.T
        act = np.empty_like(z)
        act[:, :2 * H] = _sigmoid(z[:, :2 * H])
        act[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        act[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[t], cells[t], tanhc[t] = act, c, tc
        hs[:, t] = h
    dtype = x.dtype

    def backward(gout):
        gout = gout.astype(f64)
        dxp = np.empty((B, T, H4))
        dwhh = np.zeros((H4, H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(list(order)):
            act = gates[t]
            i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
            tc = tanhc[t]
            dh = gout[:, t] + dh_next
            dc = dh * o * (1 - tc * tc) + dc_next
            dz = np.empty((B, H4))
            dz[:, :H] = dc * g * i * (1 - i)
            dz[:, H:2 * H] = dc * prev_c[t] * f * (1 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1 - g * g)
            dz[:, 3 * H:] = dh * tc * o * (1 - o)
            dc_next = dc * f
            dwhh += dz.T @ prev_h[t]
            dh_next = dz @ whh
            dxp[:, t] = dz
        flat = dxp.reshape(B * T, H4)
        dwih = flat.T @ xd.reshape(B * T, D)
        db = flat.sum(axis=0)
        dx = (flat @ wih).reshape(B, T, D)
        return (dx.astype(dtype), dwih.astype(w_ih.dtype), dwhh.astype(w_hh.dtype),
                db.astype(b_ih.dtype), db.astype(b_hh.dtype))

    return make_result(hs.astype(dtype), (x, w_ih, w_hh, b_ih, b_hh), backward, "lstm_sequence")


def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


__all__ = [
    "ConvSpec", "PoolSpec", "conv3d", "conv2d", "pool3d", "batchnorm", "linear", "softmax",
    "softmax_cross_entropy", "concat_channels", "temporal_mean", "global_spatial_mean", "lstm_sequence",
    "conv_output_length",
]
