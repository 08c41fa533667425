"""Config-driven assembly, training, evaluation and the ablation grid."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backends import build_backend
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, StageConfig
from .dataio import (AugmentSpec, ClipSet, CropSpec, Manifest, NormStats, SyntheticTaskSpec, crop, default_crop,
                     load_clip, synth_split)
from .errors import ConfigError, IngestionError
from .frontends import architecture_summary, architecture_table, build_frontend, build_two_stream, table_csv
from .inflation import PretrainPlan, StageTask, TargetTask, two_round_pretrain
from .optflow import FlowParams, flow_sequence, flow_to_input, read_flo
from .tensor import Rng, Tensor
from .training import FitOptions, FitResult, LipreadModel, Metrics, evaluate, fit

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def assemble(config: ExperimentConfig, vocab: int, rng: Optional[Rng] = None) -> LipreadModel:
    """Front-end and back-end per ``config``, with fresh initialisation."""
    config.validate()
    rng = rng or Rng(config.seed)
    kind = config.kind
    if kind.two_stream:
        frontend = build_two_stream(kind.base, config.m, rng.spawn(1))
    else:
        channels = 2 if config.inputs == ["flow"] else 1
        frontend = build_frontend(kind.base, channels, config.m, rng.spawn(1))
    backend = build_backend(config.backend, frontend.out_features, vocab, config.m, rng.spawn(2))
    return LipreadModel(frontend, backend, config.inputs)


def architecture(model: LipreadModel, T: int = 29, H: int = 32, W: int = 32) -> str:
    """CSV architecture table of ``model`` traced on a probe clip, with a front-end summary."""
    inputs = []
    if "gray" in model.inputs:
        inputs.append(Tensor(np.zeros((1, 1, T, H, W), np.float32)))
    if "flow" in model.inputs:
        inputs.append(Tensor(np.zeros((1, 2, T, H, W), np.float32)))
    rows = architecture_table(model, inputs)
    front_rows = [r for r in rows if r.name.startswith("frontend.")]
    model.eval()
    try:
        summary = architecture_summary(model.frontend, inputs, front_rows)
    finally:
        model.train()
    summary["head_in"], summary["head_out"] = model.backend.head.weight.shape
    return table_csv(rows, summary)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class SplitData:
    clips: ClipSet
    manifest: Manifest


def _entry_flow(entry: dict, root: Path, frames: np.ndarray, params: FlowParams) -> np.ndarray:
    """[2,T,H,W] flow for one entry: pre-computed .flo files when listed, else estimated."""
    paths = entry.get("flow")
    if paths:
        fields = [read_flo(root / p).data for p in paths]
        if len(fields) == frames.shape[0] - 1:
            fields.append(fields[-1])
        if len(fields) != frames.shape[0]:
            raise IngestionError(f"entry lists {len(paths)} flow files for {frames.shape[0]} frames")
        return np.stack(fields).transpose(3, 0, 1, 2)
    return flow_sequence(frames, params)


def load_data(manifest_path, crop_spec: Optional[CropSpec], stats: Optional[NormStats], want_flow: bool,
              flow_params: FlowParams = FlowParams(pyramid_levels=1), clip_max: float = 8.0) -> SplitData:
    """Load, crop and (optionally) normalise a split; flow is estimated on raw frames then cropped."""
    manifest = Manifest.load(manifest_path)
    crop_spec = crop_spec or default_crop(manifest)
    grays, flows, labels = [], [], []
    for entry in manifest.entries:
        sample = load_clip(entry, manifest.root, manifest.clip_length)
        box = crop_spec.box(sample.frames.shape[1:], sample.mouth_center if crop_spec.center is None else None)
        top, left, bottom, right = box
        if want_flow:
            flow = _entry_flow(entry, manifest.root, sample.frames, flow_params)
            flows.append(flow_to_input(flow[:, :, top:bottom, left:right], clip_max))
        g = crop(sample, crop_spec).frames
        if stats is not None:
            g = ((g - np.float32(stats.mean)) / np.float32(stats.std)).astype(np.float32)
        grays.append(g)
        labels.append(sample.label)
    if not grays:
        raise IngestionError(f"manifest {manifest_path} is empty")
    clips = ClipSet(np.stack(grays), np.asarray(labels, dtype=np.int64), np.stack(flows) if want_flow else None,
                    list(manifest.vocab))
    return SplitData(clips, manifest)


def synthetic_splits(spec: SyntheticTaskSpec, splits=("train", "val"), want_flow: bool = False,
                     eval_samples_per_class: Optional[int] = None,
                     flow_params: FlowParams = FlowParams(pyramid_levels=1), clip_max: float = 8.0) -> dict:
    """In-memory ClipSets of a synthetic task, cropped around the mouth and
    normalised with training-split statistics (same steps as ``load_data``)."""
    raw = {}
    for split in splits:
        s = spec
        if split != "train" and eval_samples_per_class:
            s = SyntheticTaskSpec(**{**spec.__dict__, "samples_per_class": eval_samples_per_class})
        raw[split] = synth_split(s, split)
    crop_spec = CropSpec(*spec.frame_size)
    cropped = {}
    for split, (clips, labels, centers) in raw.items():
        grays, flows = [], []
        for clip, center in zip(clips, centers):
            top, left, bottom, right = crop_spec.box(clip.shape[1:], tuple(center))
            grays.append(clip[:, top:bottom, left:right])
            if want_flow:
                flows.append(flow_to_input(flow_sequence(clip, flow_params)[:, :, top:bottom, left:right], clip_max))
        cropped[split] = (np.stack(grays), labels, np.stack(flows) if want_flow else None)
    stats = NormStats.compute([cropped["train"][0]]) if "train" in cropped else NormStats.identity()
    return {split: ClipSet(((g - np.float32(stats.mean)) / np.float32(stats.std)).astype(np.float32), y, f,
                           spec.words())
            for split, (g, y, f) in cropped.items()}


def dataset_stats(config: ExperimentConfig) -> NormStats:
    if config.stats and Path(config.stats).exists():
        return NormStats.load(config.stats)
    raw = load_data(config.train_manifest, None, None, False)
    stats = NormStats.compute([raw.clips.gray])
    if config.stats:
        stats.save(config.stats)
    return stats


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainOutcome:
    config: ExperimentConfig
    model: LipreadModel
    fit: FitResult
    val: Optional[Metrics]
    test: Optional[Metrics]
    checkpoint: Optional[str]
    stats: NormStats
    lineage: list = field(default_factory=list)


def fit_options(config: ExperimentConfig) -> FitOptions:
    return FitOptions(epochs=config.epochs, batch_size=config.batch_size, lr=config.lr, betas=tuple(config.betas),
                      weight_decay=config.weight_decay, seed=config.seed,
                      augment=AugmentSpec(0.5, config.max_shift, config.seed) if config.augment else None,
                      stop_at_train_acc=config.stop_at_train_acc, patience=config.patience,
                      time_budget=config.time_budget)


def _stage_task(stage: StageConfig, frame_size, seed: int) -> StageTask:
    return StageTask(stage.classes, stage.samples_per_class, stage.clip_length, tuple(frame_size), stage.epochs,
                     stage.lr, stage.batch_size, seed)


def train(config: ExperimentConfig, splits: Optional[dict] = None) -> TrainOutcome:
    """Train per ``config``; keeps and saves the best-validation weights.

    ``splits`` may supply pre-loaded {"train", "val", "test"} ClipSets (already
    normalised); otherwise the manifests named in the config are loaded.
    """
    config.validate()
    want_flow = "flow" in config.inputs
    fparams = FlowParams(pyramid_levels=config.flow_levels)
    stats = NormStats.identity()
    if splits is None:
        if not config.train_manifest:
            raise ConfigError("train_manifest is required")
        stats = dataset_stats(config)
        splits = {"train": load_data(config.train_manifest, None, stats, want_flow, fparams,
                                     config.flow_clip_max).clips}
        for key, path in (("val", config.val_manifest), ("test", config.test_manifest)):
            if path:
                splits[key] = load_data(path, None, stats, want_flow, fparams, config.flow_clip_max).clips
    train_set, val_set, test_set = splits["train"], splits.get("val"), splits.get("test")
    vocab = train_set.classes
    opts = fit_options(config)
    out_dir = Path(config.out_dir) / config.name
    out_dir.mkdir(parents=True, exist_ok=True)

    lineage = []
    if config.pretrain == "none":
        model = assemble(config, vocab)
        result = fit(model, train_set, val_set, opts)
    else:
        H, W = train_set.gray.shape[2:]
        plan = PretrainPlan(
            kind=config.frontend, m=config.m, inputs=tuple(config.inputs),
            round1=_stage_task(config.round1, (H, W), config.seed),
            round2=_stage_task(config.round2, (H, W), config.seed) if config.pretrain == "two_round" else None,
            target=TargetTask(train_set, val_set, config.backend, vocab, opts),
            out_dir=str(out_dir / "lineage"), seed=config.seed, flow_params=fparams,
            flow_clip_max=config.flow_clip_max)
        outcome = two_round_pretrain(plan)
        model, result, lineage = outcome.model, outcome.fit_result, outcome.lineage
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    val_m = evaluate(model, val_set) if val_set is not None else None
    test_m = evaluate(model, test_set) if test_set is not None else None

    meta = {"stats": {"mean": stats.mean, "std": stats.std, "pixel_count": stats.pixel_count},
            "vocab": vocab, "best_epoch": result.best_epoch, "frame_size": list(train_set.gray.shape[2:])}
    parent = lineage[-2].checksum if len(lineage) >= 2 else 0
    ckpt = out_dir / "best.ckpt"
    save_checkpoint(model, ckpt, "finetuned" if lineage else "train", config.to_dict(), parent, meta)
    write_metrics(out_dir, result, val_m, test_m)
    return TrainOutcome(config, model, result, val_m, test_m, str(ckpt), stats, lineage)


def write_metrics(out_dir: Path, result: FitResult, val: Optional[Metrics], test: Optional[Metrics]) -> None:
    with open(out_dir / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "train_top1", "val_top1"])
        for i, loss in enumerate(result.loss_curve):
            va = result.val_acc[i] if i < len(result.val_acc) else ""
            w.writerow([i + 1, f"{loss:.6f}", f"{result.train_acc[i]:.4f}", va if va == "" else f"{va:.4f}"])
    summary = {"best_epoch": result.best_epoch, "epochs_run": len(result.loss_curve),
               "val_top1": None if val is None else val.top1, "test_top1": None if test is None else test.top1,
               "val_per_class": None if val is None else val.per_class, "seconds": result.seconds}
    (out_dir / "metrics.json").write_text(json.dumps(summary, indent=2))


def load_trained(checkpoint) -> tuple[LipreadModel, ExperimentConfig, dict]:
    """Rebuild the model described by a checkpoint's embedded config and load its weights."""
    from .checkpoint import read_checkpoint

    ckpt = read_checkpoint(checkpoint)
    if "config" not in ckpt.meta:
        raise ConfigError("checkpoint carries no experiment config")
    config = ExperimentConfig.from_dict(ckpt.meta["config"])
    model = assemble(config, int(ckpt.meta["vocab"]))
    load_checkpoint(checkpoint, model)
    return model, config, ckpt.meta


def evaluate_checkpoint(checkpoint, manifest_path) -> Metrics:
    model, config, meta = load_trained(checkpoint)
    s = meta.get("stats", {})
    stats = NormStats(s.get("mean", 0.0), s.get("std", 1.0), s.get("pixel_count", 0))
    data = load_data(manifest_path, None, stats, "flow" in config.inputs, FlowParams(pyramid_levels=config.flow_levels),
                     config.flow_clip_max).clips
    if data.classes != int(meta["vocab"]):
        raise ConfigError(f"vocabulary mismatch: model has {meta['vocab']} classes, manifest {data.classes}")
    return evaluate(model, data)


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    row: str
    inputs: str
    frontend: str
    backend: str
    pretrain: str
    seed: int
    val_top1: Optional[float]
    test_top1: Optional[float]
    best_epoch: int
    epochs_to_90: Optional[int]
    seconds: float


def ablate(grid: Sequence[ExperimentConfig], seeds: Sequence[int] = (0,), out_csv=None,
           splits: Optional[dict] = None) -> list[AblationRow]:
    """Train every grid config under each seed; writes CSV and a JSON twin when ``out_csv`` is set."""
    rows = []
    for config in grid:
        for seed in seeds:
            doc = config.to_dict()
            doc["seed"] = seed
            doc["name"] = f"{config.name}_s{seed}"
            cfg = ExperimentConfig.from_dict(doc)
            log.info("ablation %s seed %d", config.name, seed)
            out = train(cfg, splits)
            rows.append(AblationRow(config.name.replace("row_", ""), "+".join(cfg.inputs), cfg.frontend, cfg.backend,
                                    cfg.pretrain, seed, None if out.val is None else out.val.top1,
                                    None if out.test is None else out.test.top1, out.fit.best_epoch,
                                    out.fit.epochs_to(0.9), out.fit.seconds))
    if out_csv is not None:
        write_ablation(rows, out_csv)
    return rows


def write_ablation(rows: Sequence[AblationRow], path) -> None:
    path = Path(path)
    cols = list(AblationRow.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([getattr(r, c) for c in cols])
    path.with_suffix(".json").write_text(json.dumps([r.__dict__ for r in rows], indent=2))
