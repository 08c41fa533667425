"""Clip ingestion, cropping/normalisation, augmentation and synthetic word datasets.

Frames live on disk as binary PGM files listed in a JSON manifest::

    {"clip_length": 29, "frame_size": [40, 40], "vocab": [...],
     "entries": [{"word": ..., "label": ..., "frames": [...],
                  "mouth_center": [x, y], "split": "train"}, ...]}

Frame paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, IngestionError, ShapeError
from .tensor import Rng

LUMA = (0.299, 0.587, 0.114)
SPLITS = ("train", "val", "test")


@dataclass
class VideoSample:
    frames: np.ndarray  # [T, H, W] float32
    label: int
    word: str = ""
    mouth_center: Optional[tuple[float, float]] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise ShapeError(f"clip frames must be [T,H,W], got {list(self.frames.shape)}")

    @property
    def T(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def decode_pnm(buf: bytes) -> np.ndarray:
    """Binary PGM (P5) -> [H,W] in [0,1]; binary PPM (P6) is reduced to luma."""
    m = _HEADER.match(buf)
    if not m:
        raise IngestionError(f"bad PGM header {buf[:16]!r}")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if not (0 < maxval < 65536) or w <= 0 or h <= 0:
        raise IngestionError(f"bad PGM header values {w}x{h} max {maxval}")
    depth = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * depth * dtype.itemsize
    body = buf[m.end():m.end() + need]
    if len(body) != need:
        raise IngestionError(f"PGM payload truncated: {len(body)} of {need} bytes")
    img = np.frombuffer(body, dtype=dtype).astype(np.float32) / maxval
    if depth == 3:
        img = img.reshape(h, w, 3) @ np.asarray(LUMA, dtype=np.float32)
    return img.reshape(h, w).astype(np.float32)


def read_pgm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            return decode_pnm(fh.read())
    except FileNotFoundError as exc:
        raise IngestionError(f"missing frame {path}") from exc


def write_pgm(path, img) -> None:
    """Write [H,W] values in [0,1] as 8-bit P5."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeError(f"PGM frames are 2D, got {list(img.shape)}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
            fh.write(q.tobytes())
    except OSError as exc:
        raise IngestionError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class Manifest:
    entries: list[dict]
    root: Path
    clip_length: Optional[int] = None
    frame_size: Optional[tuple[int, int]] = None
    vocab: list[str] = field(default_factory=list)
    crop_size: Optional[tuple[int, int]] = None  # (height, width) of the mouth box

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise IngestionError(f"missing manifest {path}") from exc
        except json.JSONDecodeError as exc:
            raise IngestionError(f"manifest {path} is not valid JSON: {exc}") from exc
        if isinstance(doc, list):
            doc = {"entries": doc}
        entries = doc.get("entries")
        if not isinstance(entries, list):
            raise IngestionError(f"manifest {path} has no entry list")
        for i, e in enumerate(entries):
            missing = {"label", "frames"} - set(e)
            if missing:
                raise IngestionError(f"manifest entry {i} lacks {sorted(missing)}")
        fs, cs = doc.get("frame_size"), doc.get("crop_size")
        return cls(entries, path.parent, doc.get("clip_length"), tuple(fs) if fs else None, doc.get("vocab", []),
                   tuple(cs) if cs else None)

    def save(self, path) -> None:
        doc = {"clip_length": self.clip_length, "frame_size": list(self.frame_size) if self.frame_size else None,
               "crop_size": list(self.crop_size) if self.crop_size else None,
               "vocab": self.vocab, "entries": self.entries}
        Path(path).write_text(json.dumps(doc, indent=1))

    @property
    def classes(self) -> int:
        if self.vocab:
            return len(self.vocab)
        return 1 + max(int(e["label"]) for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def load_clip(entry: dict, root=".", clip_length: Optional[int] = None) -> VideoSample:
    """Decode the frames of one manifest entry."""
    paths = entry["frames"]
    if clip_length is not None and len(paths) != clip_length:
        raise IngestionError(f"entry {entry.get('word', '?')!r} lists {len(paths)} frames, expected {clip_length}")
    if not paths:
        raise IngestionError("entry lists no frames")
    frames = [read_pgm(Path(root) / p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise IngestionError(f"inconsistent frame sizes {sorted(shapes)}")
    center = entry.get("mouth_center")
    return VideoSample(np.stack(frames), int(entry["label"]), entry.get("word", ""),
                       tuple(center) if center is not None else None)


# ---------------------------------------------------------------------------
# cropping and normalisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CropSpec:
    width: int = 112
    height: int = 112
    center: Optional[tuple[float, float]] = None  # (x, y); None uses the sample's mouth_center

    def box(self, frame_shape, center=None) -> tuple[int, int, int, int]:
        """(top, left, bottom, right) of the box, raising if it leaves the frame."""
        H, W = frame_shape
        cx, cy = center if center is not None else (self.center if self.center is not None else (W / 2, H / 2))
        left = int(math.floor(cx - self.width / 2 + 0.5))
        top = int(math.floor(cy - self.height / 2 + 0.5))
        if left < 0 or top < 0 or left + self.width > W or top + self.height > H:
            raise ContractError(f"crop box {self.width}x{self.height} at ({left},{top}) leaves the {W}x{H} frame")
        return top, left, top + self.height, left + self.width


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    pixel_count: int = 0

    def __post_init__(self):
        if not self.std > 0:
            raise ContractError(f"normalisation std must be positive, got {self.std}")

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(0.0, 1.0, 0)

    @classmethod
    def compute(cls, clips: Sequence[np.ndarray]) -> "NormStats":
        """Scalar mean/std over every pixel of every clip (64-bit accumulation)."""
        n = sum(c.size for c in clips)
        if n == 0:
            raise ContractError("cannot compute statistics of an empty set")
        mean = sum(float(c.sum(dtype=np.float64)) for c in clips) / n
        var = sum(float(((c.astype(np.float64) - mean) ** 2).sum()) for c in clips) / n
        return cls(mean, math.sqrt(var), n)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self)))

    @classmethod
    def load(cls, path) -> "NormStats":
        try:
            doc = json.loads(Path(path).read_text())
            return cls(float(doc["mean"]), float(doc["std"]), int(doc.get("pixel_count", 0)))
        except (OSError, KeyError, ValueError) as exc:
            raise IngestionError(f"bad statistics file {path}: {exc}") from exc


def crop(sample: VideoSample, spec: CropSpec) -> VideoSample:
    top, left, bottom, right = spec.box(sample.frames.shape[1:], sample.mouth_center if spec.center is None else None)
    return VideoSample(sample.frames[:, top:bottom, left:right], sample.label, sample.word, sample.mouth_center)


def crop_and_normalize(sample: VideoSample, spec: CropSpec, stats: NormStats) -> VideoSample:
    out = crop(sample, spec)
    out.frames = ((out.frames - np.float32(stats.mean)) / np.float32(stats.std)).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    flip_prob: float = 0.5
    max_shift: int = 5
    seed: int = 0


@dataclass(frozen=True)
class AugmentDraw:
    flip: bool
    dx: int
    dy: int


def draw_augment(spec: AugmentSpec, rng: Rng) -> AugmentDraw:
    flip = bool(rng.random() < spec.flip_prob)
    dx, dy = (int(v) for v in rng.integers(-spec.max_shift, spec.max_shift + 1, 2))
    return AugmentDraw(flip, dx, dy)


def _shift(x: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate the last two axes; content moves by (dx, dy), borders replicate."""
    if dx == 0 and dy == 0:
        return x
    H, W = x.shape[-2:]
    p = max(abs(dx), abs(dy))
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    xp = np.pad(x, pad, mode="edge")
    return xp[..., p - dy:p - dy + H, p - dx:p - dx + W]


def apply_augment(gray: np.ndarray, flow: Optional[np.ndarray], draw: AugmentDraw):
    """Apply one flip/shift decision to a gray clip [...,H,W] and optional flow [2,...,H,W]."""
    g = gray[..., ::-1] if draw.flip else gray
    g = np.ascontiguousarray(_shift(g, draw.dx, draw.dy))
    f = None
    if flow is not None:
        f = flow[..., ::-1].copy() if draw.flip else flow
        if draw.flip:
            f[0] = -f[0]  # mirrored motion: u changes sign
        f = np.ascontiguousarray(_shift(f, draw.dx, draw.dy))
    return g, f


def augment(gray: np.ndarray, flow: Optional[np.ndarray], spec: AugmentSpec, rng: Optional[Rng] = None):
    """Random flip and shift shared by both streams of one sample."""
    draw = draw_augment(spec, rng or Rng(spec.seed))
    return apply_augment(gray, flow, draw)


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Words are mouth-shape scripts: an ellipse whose width, height and vertical
    offset follow per-class keyframes during a window of the clip, with small
    random jitter elsewhere.  The mouth stays horizontally centred, so a
    horizontal flip keeps the label."""

    classes: int = 20
    samples_per_class: int = 16
    frame_size: tuple[int, int] = (32, 32)
    clip_length: int = 29
    window: int = 15
    keyframes: int = 4
    distractor: float = 0.35
    noise: float = 0.04
    center_jitter: int = 2
    margin: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.classes < 1 or self.samples_per_class < 1:
            raise ContractError("classes and samples_per_class must be positive")
        if not 1 <= self.window <= self.clip_length:
            raise ContractError(f"window {self.window} must fit in clip_length {self.clip_length}")
        if self.keyframes < 2:
            raise ContractError("need at least two keyframes")

    @property
    def canvas(self) -> tuple[int, int]:
        """Stored frame size: the crop size plus a margin for mouth-centre jitter."""
        h, w = self.frame_size
        return h + 2 * self.margin, w + 2 * self.margin

    def words(self) -> list[str]:
        return [f"word{c:03d}" for c in range(self.classes)]


REST = np.array([0.32, 0.12, 0.0])  # width/W, height/H, vertical offset/H
LOW = np.array([0.18, 0.04, -0.12])
HIGH = np.array([0.46, 0.36, 0.12])
_SPLIT_KEYS = {"train": 11, "val": 23, "test": 37, "round1": 41, "round2": 53}


def class_scripts(spec: SyntheticTaskSpec) -> np.ndarray:
    """[classes, keyframes, 3] shape keyframes, pairwise separated."""
    rng = Rng(spec.seed).spawn(7)
    scripts: list[np.ndarray] = []
    min_gap = 0.12
    attempts = 0
    while len(scripts) < spec.classes:
        s = LOW + (HIGH - LOW) * rng.random((spec.keyframes, 3))
        attempts += 1
        if all(np.abs(s - o).max() > min_gap for o in scripts):
            scripts.append(s)
        elif attempts > 200 * spec.classes:
            min_gap *= 0.8
            attempts = 0
    return np.stack(scripts)


def _interp(keys: np.ndarray, n: int) -> np.ndarray:
    """Smooth (cosine-eased) interpolation of [K,3] keyframes onto n steps."""
    K = keys.shape[0]
    pos = np.linspace(0, K - 1, n)
    i0 = np.minimum(np.floor(pos).astype(int), K - 2)
    frac = pos - i0
    w = 0.5 - 0.5 * np.cos(np.pi * frac)
    return keys[i0] * (1 - w)[:, None] + keys[i0 + 1] * w[:, None]


def render_mouth(params: np.ndarray, size: tuple[int, int], center: tuple[float, float],
                 softness: float = 0.8) -> np.ndarray:
    """Frames [T,H,W]: a bright soft-edged ellipse per row of params (w, h, dy)."""
    H, W = size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    out = np.empty((params.shape[0], H, W))
    for t, (pw, ph, py) in enumerate(params):
        a, b = max(pw * W / 2, 0.5), max(ph * H / 2, 0.5)
        cy = center[1] + py * H
        r = np.sqrt(((xx + 0.5 - center[0]) / a) ** 2 + ((yy + 0.5 - cy) / b) ** 2)
        edge = (1.0 - r) * min(a, b) / softness
        out[t] = 0.2 + 0.65 / (1.0 + np.exp(-np.clip(edge, -30, 30)))
    return out


def _sample_clip(spec: SyntheticTaskSpec, script: np.ndarray, rng: Rng) -> tuple[np.ndarray, tuple[float, float]]:
    T, n = spec.clip_length, spec.window
    H, W = spec.canvas
    offset = int(rng.integers(0, T - n + 1))
    # per-sample variation: amplitude and a random walk of distractor jitter
    amp = 1.0 + 0.15 * (rng.random() - 0.5)
    params = np.tile(REST, (T, 1)) + np.cumsum(rng.normal((T, 3), 1.0), axis=0) * 0.02 * spec.distractor
    params = REST + np.clip(params - REST, -spec.distractor * 0.3, spec.distractor * 0.3)
    scripted = REST + amp * (_interp(script, n) - REST)
    params[offset:offset + n] = scripted
    params = np.clip(params, LOW * [1, 1, 1.5], HIGH * [1, 1, 1.5])
    j = spec.center_jitter
    cx = W / 2 + int(rng.integers(-j, j + 1))
    cy = H / 2 + int(rng.integers(-j, j + 1))
    frames = render_mouth(params, (H, W), (cx, cy))
    frames += rng.normal(frames.shape, spec.noise)
    return np.clip(frames, 0.0, 1.0).astype(np.float32), (cx, cy)


def synth_split(spec: SyntheticTaskSpec, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """In-memory split: (clips [N,T,H,W] on the canvas, labels [N], mouth centres [N,2]).

    Samples are ordered class-major; the class scripts depend only on
    ``spec.seed`` while the per-sample draws depend on the split as well.
    """
    if split not in _SPLIT_KEYS:
        raise ContractError(f"unknown split {split!r}")
    scripts = class_scripts(spec)
    rng = Rng(spec.seed).spawn(_SPLIT_KEYS[split])
    clips, labels, centers = [], [], []
    for c in range(spec.classes):
        for _ in range(spec.samples_per_class):
            clip, center = _sample_clip(spec, scripts[c], rng)
            clips.append(clip)
            labels.append(c)
            centers.append(center)
    return np.stack(clips), np.asarray(labels, dtype=np.int64), np.asarray(centers, dtype=np.float64)


def gen_synthetic(spec: SyntheticTaskSpec, split: str, out_dir) -> Path:
    """Render a split to PGM frames plus ``<split>.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    try:
        (out_dir / split).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestionError(f"cannot create {out_dir / split}: {exc}") from exc
    clips, labels, centers = synth_split(spec, split)
    words = spec.words()
    entries = []
    for i, (clip, label, center) in enumerate(zip(clips, labels, centers)):
        names = []
        for t, frame in enumerate(clip):
            rel = f"{split}/{i:05d}_{t:02d}.pgm"
            write_pgm(out_dir / rel, frame)
            names.append(rel)
        entries.append({"word": words[label], "label": int(label), "frames": names,
                        "mouth_center": [float(center[0]), float(center[1])], "split": split})
    manifest = Manifest(entries, out_dir, spec.clip_length, spec.canvas, words, spec.frame_size)
    path = out_dir / f"{split}.json"
    manifest.save(path)
    return path


def static_shape_task(classes: int = 10, samples_per_class: int = 24, frame_size=(32, 32), noise: float = 0.04,
                      seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Single-frame classification of mouth shapes; clips are [N, 1, H, W].

    Each class is one static (width, height, offset) triple; samples vary the
    centre, size and noise.
    """
    rng = Rng(seed).spawn(_SPLIT_KEYS["round1"])
    shapes = class_scripts(SyntheticTaskSpec(classes=classes, keyframes=2, seed=seed + 1000))[:, 0]
    H, W = frame_size
    clips, labels = [], []
    for c in range(classes):
        for _ in range(samples_per_class):
            p = shapes[c] * (1.0 + 0.1 * (rng.random(3) - 0.5))
            center = (W / 2 + int(rng.integers(-2, 3)), H / 2 + int(rng.integers(-2, 3)))
            img = render_mouth(p[None], (H, W), center) + rng.normal((1, H, W), noise)
            clips.append(np.clip(img, 0, 1).astype(np.float32))
            labels.append(c)
    return np.stack(clips), np.asarray(labels, dtype=np.int64)


def motion_task(classes: int = 10, samples_per_class: int = 16, frame_size=(32, 32), clip_length: int = 16,
                seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Short-clip motion-pattern classification (clips [N, T, H, W]), with its own class scripts."""
    spec = SyntheticTaskSpec(classes=classes, samples_per_class=samples_per_class, frame_size=frame_size,
                             clip_length=clip_length, window=min(15, clip_length), margin=0, seed=seed + 2000)
    clips, labels, _ = synth_split(spec, "round2")
    return clips, labels


# ---------------------------------------------------------------------------
# in-memory datasets
# ---------------------------------------------------------------------------


@dataclass
class ClipSet:
    """Pre-processed split held in memory: gray [N,T,H,W], optional flow [N,2,T,H,W]."""

    gray: np.ndarray
    labels: np.ndarray
    flow: Optional[np.ndarray] = None
    vocab: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.gray) != len(self.labels):
            raise ShapeError("clip and label counts differ")
        if self.flow is not None and (self.flow.shape[0] != self.gray.shape[0]
                                      or self.flow.shape[2:] != self.gray.shape[1:]):
            raise ShapeError(f"flow {list(self.flow.shape)} misaligned with gray {list(self.gray.shape)}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> int:
        return len(self.vocab) if self.vocab else int(self.labels.max()) + 1

    def subset(self, idx) -> "ClipSet":
        return ClipSet(self.gray[idx], self.labels[idx], None if self.flow is None else self.flow[idx], self.vocab)


def load_split(manifest_path, crop_spec: CropSpec, stats: Optional[NormStats] = None) -> tuple[ClipSet, Manifest]:
    """Load every clip of a manifest, cropped (not yet normalised)."""
    manifest = Manifest.load(manifest_path)
    clips, labels = [], []
    for entry in manifest.entries:
        sample = crop(load_clip(entry, manifest.root, manifest.clip_length), crop_spec)
        if stats is not None:
            sample.frames = ((sample.frames - np.float32(stats.mean)) / np.float32(stats.std)).astype(np.float32)
        clips.append(sample.frames)
        labels.append(sample.label)
    if not clips:
        raise IngestionError(f"manifest {manifest_path} is empty")
    return ClipSet(np.stack(clips), np.asarray(labels, dtype=np.int64), None, list(manifest.vocab)), manifest


def default_crop(manifest: Manifest) -> CropSpec:
    """Mouth box declared by the manifest, else the whole frame."""
    size = manifest.crop_size or manifest.frame_size
    if size is None:
        raise IngestionError("manifest declares neither crop_size nor frame_size")
    return CropSpec(width=int(size[1]), height=int(size[0]))
