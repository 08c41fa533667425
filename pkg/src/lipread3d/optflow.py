"""Dense optical flow (pyramidal Lucas-Kanade) and Middlebury .flo file I/O."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Union

import numpy as np
from scipy import ndimage

from .errors import ContractError, FormatError, ShapeError

FLO_TAG = b"PIEH"  # 202021.25 as a little-endian float32
FLO_MAGIC = 202021.25


@dataclass
class FlowField:
    """Per-pixel displacement; ``data`` is [H, W, 2] float32 holding (u, v).

    u is positive to the right, v positive downward, both in pixels per frame.
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ShapeError(f"flow field must be [H,W,2], got {list(self.data.shape)}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def u(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.data[..., 1]

    @classmethod
    def from_uv(cls, u, v) -> "FlowField":
        return cls(np.stack([u, v], axis=-1))


@dataclass(frozen=True)
class FlowParams:
    window: int = 9
    pyramid_levels: int = 3
    iterations_per_level: int = 5
    eigen_floor: float = 1e-4
    blur_sigma: float = 1.0
    median_size: int = 5

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ContractError(f"window must be odd and >= 3, got {self.window}")
        if self.pyramid_levels < 1:
            raise ContractError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if self.iterations_per_level < 1:
            raise ContractError("iterations_per_level must be >= 1")


def _pyramid(img: np.ndarray, levels: int, sigma: float, min_side: int) -> list[np.ndarray]:
    # levels whose image would be smaller than min_side are dropped: a window
    # covering most of a tiny image gives unreliable coarse estimates
    out = [img]
    for _ in range(levels - 1):
        prev = out[-1]
        if min(prev.shape) // 2 < min_side:
            break
        out.append(ndimage.gaussian_filter(prev, sigma, mode="nearest")[::2, ::2])
    return out


def _resize_flow(flow: np.ndarray, shape) -> np.ndarray:
    """Upsample a coarse flow to ``shape``, scaling displacements with the grid."""
    fy, fx = shape[0] / flow.shape[0], shape[1] / flow.shape[1]
    u = ndimage.zoom(flow[..., 0], (fy, fx), order=1, mode="nearest", grid_mode=True) * fx
    v = ndimage.zoom(flow[..., 1], (fy, fx), order=1, mode="nearest", grid_mode=True) * fy
    return np.stack([u, v], axis=-1)


def _warp(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample img at (y + v, x + u)."""
    H, W = img.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    return ndimage.map_coordinates(img, [yy + flow[..., 1], xx + flow[..., 0]], order=1, mode="nearest")


def _refine(prev: np.ndarray, nxt: np.ndarray, flow: np.ndarray, params: FlowParams) -> np.ndarray:
    box = lambda a: ndimage.uniform_filter(a, params.window, mode="nearest")  # noqa: E731
    gpx = ndimage.sobel(prev, axis=1, mode="nearest") / 8.0
    gpy = ndimage.sobel(prev, axis=0, mode="nearest") / 8.0
    for _ in range(params.iterations_per_level):
        warped = _warp(nxt, flow)
        # symmetric gradient: average of the reference and the warped target
        ix = 0.5 * (gpx + ndimage.sobel(warped, axis=1, mode="nearest") / 8.0)
        iy = 0.5 * (gpy + ndimage.sobel(warped, axis=0, mode="nearest") / 8.0)
        it = warped - prev
        sxx, syy, sxy = box(ix * ix), box(iy * iy), box(ix * iy)
        sxt, syt = box(ix * it), box(iy * it)
        det = sxx * syy - sxy * sxy
        half_tr = 0.5 * (sxx + syy)
        min_eig = half_tr - np.sqrt(np.maximum(half_tr ** 2 - det, 0.0))
        ok = min_eig > params.eigen_floor
        safe_det = np.where(ok, det, 1.0)
        du = np.where(ok, (-syy * sxt + sxy * syt) / safe_det, 0.0)
        dv = np.where(ok, (sxy * sxt - sxx * syt) / safe_det, 0.0)
        flow = flow + np.stack([du, dv], axis=-1)
        # median filtering suppresses isolated outliers before the next warp
        flow = ndimage.median_filter(flow, size=(params.median_size, params.median_size, 1), mode="nearest")
    return flow


def estimate_flow(prev, nxt, params: FlowParams = FlowParams()) -> FlowField:
    """Flow carrying ``prev`` onto ``nxt``: nxt(x + u, y + v) ~ prev(x, y)."""
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.ndim != 2 or prev.shape != nxt.shape:
        raise ShapeError(f"flow inputs must be equal-size 2D images, got {prev.shape} and {nxt.shape}")
    min_side = 2 * params.window
    p_pyr = _pyramid(prev, params.pyramid_levels, params.blur_sigma, min_side)
    n_pyr = _pyramid(nxt, params.pyramid_levels, params.blur_sigma, min_side)
    flow = np.zeros(p_pyr[-1].shape + (2,))
    for level in range(len(p_pyr) - 1, -1, -1):
        if flow.shape[:2] != p_pyr[level].shape:
            flow = _resize_flow(flow, p_pyr[level].shape)
        flow = _refine(p_pyr[level], n_pyr[level], flow, params)
    H, W = prev.shape
    flow[..., 0] = np.clip(flow[..., 0], -W, W)
    flow[..., 1] = np.clip(flow[..., 1], -H, H)
    return FlowField(flow)


def flow_sequence(clip, params: FlowParams = FlowParams()) -> np.ndarray:
    """[T,H,W] (or [1,T,H,W]) grayscale clip -> [2,T,H,W] flow stream.

    T-1 fields are estimated between consecutive frames; the last is repeated
    so the flow stream stays aligned with the T grayscale frames.
    """
    clip = np.asarray(clip)
    if clip.ndim == 4:
        if clip.shape[0] != 1:
            raise ShapeError(f"expected a single-channel clip, got {list(clip.shape)}")
        clip = clip[0]
    if clip.ndim != 3:
        raise ShapeError(f"expected [T,H,W], got {list(clip.shape)}")
    T = clip.shape[0]
    if T < 2:
        raise ContractError(f"flow needs at least 2 frames, got {T}")
    fields = [estimate_flow(clip[t], clip[t + 1], params).data for t in range(T - 1)]
    fields.append(fields[-1])
    return np.ascontiguousarray(np.stack(fields).transpose(3, 0, 1, 2), dtype=np.float32)


def flow_to_input(stream, clip_max: float = 8.0) -> np.ndarray:
    """Clamp to [-clip_max, clip_max] and scale into [-1, 1]."""
    if clip_max <= 0:
        raise ContractError(f"clip_max must be positive, got {clip_max}")
    stream = np.asarray(stream, dtype=np.float32)
    return (np.clip(stream, -clip_max, clip_max) / np.float32(clip_max)).astype(np.float32)


# ---------------------------------------------------------------------------
# .flo files
# ---------------------------------------------------------------------------

PathOrFile = Union[str, os.PathLike, BinaryIO]


def encode_flo(field: FlowField) -> bytes:
    if not np.all(np.isfinite(field.data)):
        raise ContractError("cannot write a non-finite flow field")
    header = FLO_TAG + struct.pack("<ii", field.width, field.height)
    return header + field.data.astype("<f4").tobytes(order="C")


def decode_flo(buf: bytes) -> FlowField:
    if len(buf) < 12:
        raise FormatError(f".flo payload truncated: {len(buf)} bytes")
    if buf[:4] != FLO_TAG:
        raise FormatError(f"bad .flo tag {buf[:4]!r}")
    width, height = struct.unpack("<ii", buf[4:12])
    if width < 0 or height < 0:
        raise FormatError(f"bad .flo extents {width}x{height}")
    need = 12 + 8 * width * height
    if len(buf) != need:
        raise FormatError(f".flo payload has {len(buf)} bytes, expected {need}")
    data = np.frombuffer(buf, dtype="<f4", offset=12).reshape(height, width, 2)
    return FlowField(data.astype(np.float32))


def write_flo(field: FlowField, sink: PathOrFile) -> None:
    payload = encode_flo(field)
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(payload)
    else:
        sink.write(payload)


def read_flo(source: PathOrFile) -> FlowField:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return decode_flo(fh.read())
    return decode_flo(source.read())
