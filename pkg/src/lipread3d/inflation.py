"""2D -> 3D weight inflation and the two-round pre-training pipeline.

A 2D network here is a front-end built with ``dims=2``: identical layer
names, unit temporal kernels.  Inflation repeats each 2D kernel N times along
time and divides by N, so a clip of identical frames produces the same
activations as the 2D network applied to any one frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .backends import build_backend
from .checkpoint import save_checkpoint
from .dataio import AugmentSpec, ClipSet, NormStats, motion_task, static_shape_task
from .errors import ContractError, MappingError
from .frontends import FrontEnd, build_frontend
from .layers import BatchNorm, Conv, Module
from .optflow import FlowParams, flow_sequence, flow_to_input
from .tensor import Rng, Tensor
from .training import FitOptions, FitResult, LipreadModel, fit

log = logging.getLogger(__name__)

CHANNEL_ADAPT = (None, "average")


@dataclass(frozen=True)
class InflationSpec:
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ContractError(f"temporal extent must be >= 1, got {self.N}")

    @property
    def scale(self) -> float:
        return 1.0 / self.N


def inflate_conv(w2d, N: int) -> Tensor:
    """[O,C,h,w] (or [O,C,1,h,w]) kernel -> [O,C,N,h,w] with every slice equal to w2d / N."""
    spec = InflationSpec(N)
    w = np.asarray(w2d.data if isinstance(w2d, Tensor) else w2d)
    if w.ndim == 5:
        if w.shape[2] != 1:
            raise ContractError(f"source kernel already has temporal extent {w.shape[2]}")
        w = w[:, :, 0]
    if w.ndim != 4:
        raise ContractError(f"source kernel must be [O,C,h,w], got {list(w.shape)}")
    sliced = (w.astype(np.float64) * spec.scale).astype(w.dtype)
    return Tensor(np.repeat(sliced[:, :, None], N, axis=2), requires_grad=True)


def adapt_input_channels(w: np.ndarray, channels: int) -> np.ndarray:
    """Average a kernel over its input channels, replicate to ``channels`` and rescale.

    An input whose channels are all equal to x then gives the response the
    source kernel gives to x.
    """
    mean = w.mean(axis=1, keepdims=True, dtype=np.float64)
    return (np.repeat(mean, channels, axis=1) / channels).astype(w.dtype)


@dataclass
class InflationReport:
    inflated: list[tuple[str, int]] = field(default_factory=list)  # (conv name, N)
    copied: list[str] = field(default_factory=list)
    adapted: list[str] = field(default_factory=list)
    fresh: list[str] = field(default_factory=list)

    def summary(self) -> str:
        return (f"{len(self.inflated)} conv layers inflated, {len(self.copied)} layers copied, "
                f"{len(self.adapted)} input-adapted, {len(self.fresh)} fresh: {self.fresh}")


def _leaf_modules(net: Module) -> dict[str, Module]:
    return {n: m for n, m in net.modules() if m._params or m._buffers}


def inflate_network(net2d: Module, net3d: Module, channel_adapt: Optional[str] = None) -> InflationReport:
    """Initialise ``net3d`` in place from the same-named layers of ``net2d``.

    Conv kernels are inflated to the target's temporal extent, biases and
    batch-norm parameters and running statistics are copied.  Target layers
    with no source counterpart keep their fresh initialisation and are
    reported.  A channel mismatch raises ``MappingError`` unless it is the
    input-channel count of a conv and ``channel_adapt="average"``.
    """
    if channel_adapt not in CHANNEL_ADAPT:
        raise ContractError(f"channel_adapt must be one of {CHANNEL_ADAPT}")
    source = _leaf_modules(net2d)
    report = InflationReport()
    for name, dst in _leaf_modules(net3d).items():
        src = source.get(name)
        if src is None or type(src) is not type(dst):
            report.fresh.append(name)
            continue
        if isinstance(dst, Conv):
            sw, dw = src.weight.data, dst.weight.data
            O, C, N, h, w = dw.shape
            if sw.shape[2] != 1:
                raise MappingError(f"{name}: source kernel is not 2D ({list(sw.shape)})")
            if sw.shape[0] != O or sw.shape[3:] != (h, w):
                raise MappingError(f"{name}: source {list(sw.shape)} cannot map to target {list(dw.shape)}")
            kernel = sw
            if sw.shape[1] != C:
                if channel_adapt is None:
                    raise MappingError(f"{name}: {sw.shape[1]} input channels in the source, {C} in the target")
                kernel = adapt_input_channels(sw, C)
                report.adapted.append(name)
            dst.weight.data[...] = inflate_conv(kernel, N).data
            if dst.bias is not None and src.bias is not None:
                dst.bias.data[...] = src.bias.data
            report.inflated.append((name, N))
            continue
        for pname, p in dst._params.items():
            q = src._params.get(pname)
            if q is None or q.shape != p.shape:
                raise MappingError(f"{name}.{pname}: source {None if q is None else list(q.shape)} "
                                   f"vs target {list(p.shape)}")
            p.data[...] = q.data
        for bname, b in dst._buffers.items():
            q = src._buffers.get(bname)
            if q is None or q.shape != b.shape:
                raise MappingError(f"{name}.{bname}: buffer shape mismatch")
            b[...] = q
        report.copied.append(name)
    return report


def inflated_frontend(net2d: FrontEnd, kind: str, in_channels: int, m, rng: Optional[Rng] = None,
                      channel_adapt: Optional[str] = None) -> tuple[FrontEnd, InflationReport]:
    """Build the 3D front-end of ``kind`` and inflate ``net2d`` into it."""
    net3d = build_frontend(kind, in_channels, m, rng or Rng(0), dims=3)
    return net3d, inflate_network(net2d, net3d, channel_adapt)


# ---------------------------------------------------------------------------
# two-round pre-training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageTask:
    """A synthetic pre-training task and its training budget."""

    classes: int = 10
    samples_per_class: int = 16
    clip_length: int = 1
    frame_size: tuple[int, int] = (32, 32)
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0


@dataclass
class TargetTask:
    train: ClipSet
    val: Optional[ClipSet]
    backend: str
    vocab: int
    fit: FitOptions


@dataclass
class PretrainPlan:
    kind: str  # Res2D | Shallow3D_Res2D | I3D, or TwoStream(<inner>)
    m: object
    inputs: tuple[str, ...]
    round1: StageTask
    round2: Optional[StageTask]  # None: inflate straight into fine-tuning
    target: Optional[TargetTask] = None
    out_dir: Optional[str] = None
    seed: int = 0
    flow_params: FlowParams = FlowParams(pyramid_levels=1)
    flow_clip_max: float = 8.0

    def check(self) -> None:
        if self.target is None:
            return
        T, H, W = self.target.train.gray.shape[1:]
        geoms = [self.round1.frame_size] + ([self.round2.frame_size] if self.round2 else [])
        for g in geoms:
            if tuple(g) != (H, W):
                raise ContractError(f"pre-training frames {tuple(g)} do not match target frames {(H, W)}")


@dataclass
class LineageEntry:
    stage: str
    path: Optional[str]
    checksum: int
    parent: int
    stream: str = ""


@dataclass
class PretrainOutcome:
    model: Optional[LipreadModel]
    frontend: Module
    lineage: list[LineageEntry]
    reports: dict[str, InflationReport]
    fit_result: Optional[FitResult] = None
    stage_results: dict[str, FitResult] = field(default_factory=dict)


def _checkpoint(model: Module, plan: PretrainPlan, stage: str, parent: int, stream: str,
                meta: Optional[dict] = None) -> LineageEntry:
    """Save (when an output directory is set) and return the lineage record."""
    import io

    name = f"{stream}_{stage}" if stream else stage
    meta = dict(meta or {}, stream=stream)
    config = {"kind": plan.kind, "m": str(plan.m), "stage": stage, "seed": plan.seed}
    if plan.out_dir:
        path = Path(plan.out_dir) / f"{name}.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        checksum = save_checkpoint(model, path, stage, config, parent, meta)
        return LineageEntry(stage, str(path), checksum, parent, stream)
    buf = io.BytesIO()
    checksum = save_checkpoint(model, buf, stage, config, parent, meta)
    return LineageEntry(stage, None, checksum, parent, stream)


def _normalised(clips: np.ndarray) -> np.ndarray:
    st = NormStats.compute([clips])
    return ((clips - st.mean) / st.std).astype(np.float32)


def _flow_clips(clips: np.ndarray, params: FlowParams, clip_max: float) -> np.ndarray:
    return np.stack([flow_to_input(flow_sequence(c, params), clip_max) for c in clips])


def round1_data(task: StageTask) -> ClipSet:
    x, y = static_shape_task(task.classes, task.samples_per_class, task.frame_size, seed=task.seed)
    return ClipSet(_normalised(x), y)


def round2_data(task: StageTask, modality: str, plan: PretrainPlan) -> ClipSet:
    x, y = motion_task(task.classes, task.samples_per_class, task.frame_size, task.clip_length, seed=task.seed)
    gray = _normalised(x)
    flow = _flow_clips(x, plan.flow_params, plan.flow_clip_max) if modality == "flow" else None
    return ClipSet(gray, y, flow)


def _stage_fit(task: StageTask, seed: int) -> FitOptions:
    return FitOptions(epochs=task.epochs, batch_size=task.batch_size, lr=task.lr, seed=seed,
                      augment=AugmentSpec(flip_prob=0.5, max_shift=2), stop_at_train_acc=0.98)


def pretrain_stream(plan: PretrainPlan, inner: str, modality: str, rng: Rng) -> tuple[FrontEnd, list[LineageEntry],
                                                                                    InflationReport,
                                                                                    dict[str, FitResult]]:
    """Round 1 (2D, grayscale frames) -> inflate -> optional round 2 (3D, ``modality``)."""
    channels = 2 if modality == "flow" else 1
    results: dict[str, FitResult] = {}
    lineage: list[LineageEntry] = []

    r1 = plan.round1
    net2d = build_frontend(inner, 1, plan.m, rng.spawn(1), dims=2)
    model1 = LipreadModel(net2d, build_backend("Mean", net2d.out_features, r1.classes, plan.m, rng.spawn(2)), ("gray",))
    results["round1"] = fit(model1, round1_data(r1), None, _stage_fit(r1, plan.seed))
    info = {"kind": inner, "m": str(plan.m)}
    lineage.append(_checkpoint(model1, plan, "round1", 0, modality, dict(info, in_channels=1)))

    net3d = build_frontend(inner, channels, plan.m, rng.spawn(3), dims=3)
    report = inflate_network(net2d, net3d, "average" if channels != 1 else None)
    log.info("%s stream: %s", modality, report.summary())
    lineage.append(_checkpoint(net3d, plan, "inflated", lineage[-1].checksum, modality,
                               dict(info, in_channels=channels, fresh=report.fresh, adapted=report.adapted)))

    if plan.round2 is not None:
        r2 = plan.round2
        model2 = LipreadModel(net3d, build_backend("Mean", net3d.out_features, r2.classes, plan.m, rng.spawn(4)),
                              (modality,))
        results["round2"] = fit(model2, round2_data(r2, modality, plan), None, _stage_fit(r2, plan.seed))
        lineage.append(_checkpoint(model2.frontend, plan, "round2", lineage[-1].checksum, modality,
                                   dict(info, in_channels=channels)))
    return net3d, lineage, report, results


def two_round_pretrain(plan: PretrainPlan) -> PretrainOutcome:
    """Run the pre-training rounds for every stream, then fine-tune on the target task.

    Emits checkpoints round1 -> inflated -> round2 -> finetuned, each carrying
    its parent's checksum.  With ``plan.round2 = None`` the chain is
    round1 -> inflated -> finetuned.
    """
    from .frontends import FrontEndKind, TwoStreamFrontEnd

    plan.check()
    rng = Rng(plan.seed)
    kind = FrontEndKind.parse(plan.kind, plan.m)
    lineage: list[LineageEntry] = []
    reports: dict[str, InflationReport] = {}
    stage_results: dict[str, FitResult] = {}
    if kind.two_stream:
        streams = {}
        for key, modality in ((1, "gray"), (2, "flow")):
            net, lin, rep, res = pretrain_stream(plan, kind.base, modality, rng.spawn(key))
            streams[modality] = net
            lineage += lin
            reports[modality] = rep
            stage_results.update({f"{modality}_{k}": v for k, v in res.items()})
        frontend: Module = TwoStreamFrontEnd(streams["gray"], streams["flow"])
    else:
        modality = plan.inputs[0]
        frontend, lin, rep, res = pretrain_stream(plan, kind.base, modality, rng.spawn(1))
        lineage += lin
        reports[modality] = rep
        stage_results.update(res)

    outcome = PretrainOutcome(None, frontend, lineage, reports, stage_results=stage_results)
    t = plan.target
    if t is None:
        return outcome
    backend = build_backend(t.backend, frontend.out_features, t.vocab, plan.m, rng.spawn(9))
    model = LipreadModel(frontend, backend, plan.inputs)
    outcome.model = model
    outcome.fit_result = fit(model, t.train, t.val, t.fit)
    parents = [e.checksum for e in lineage if e.stage == ("round2" if plan.round2 else "inflated")]
    lineage.append(_checkpoint(model, plan, "finetuned", parents[0], "",
                               {"stream_parents": parents}))
    return outcome
