"""Command-line entry point: ``lipread3d <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError, FormatError, IngestionError, MappingError, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


def _gen_data(args) -> int:
    from .dataio import SyntheticTaskSpec, gen_synthetic

    spec = SyntheticTaskSpec(classes=args.classes, samples_per_class=args.samples_per_class,
                             frame_size=(args.frame_size, args.frame_size), clip_length=args.clip_length,
                             window=args.window, noise=args.noise, distractor=args.distractor, seed=args.seed)
    for split in args.splits.split(","):
        spec_split = spec
        if split != "train" and args.eval_samples_per_class:
            spec_split = SyntheticTaskSpec(**{**spec.__dict__, "samples_per_class": args.eval_samples_per_class})
        path = gen_synthetic(spec_split, split, args.out)
        print(f"{split}: {path}")
    return EXIT_OK


def _flow(args) -> int:
    from .dataio import Manifest, load_clip, read_pgm
    from .optflow import FlowField, FlowParams, flow_sequence, write_flo

    params = FlowParams(window=args.window, pyramid_levels=args.levels, iterations_per_level=args.iterations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.frames:
        clip = np.stack([read_pgm(p) for p in args.frames])
        stream = flow_sequence(clip, params)
        for t in range(clip.shape[0] - 1):
            write_flo(FlowField(stream[:, t].transpose(1, 2, 0)), out / f"flow_{t:03d}.flo")
        print(f"wrote {clip.shape[0] - 1} fields to {out}")
        return EXIT_OK
    if not args.manifest:
        raise ConfigError("flow needs --manifest or --frames")
    manifest = Manifest.load(args.manifest)
    for i, entry in enumerate(manifest.entries):
        sample = load_clip(entry, manifest.root, manifest.clip_length)
        stream = flow_sequence(sample.frames, params)
        names = []
        for t in range(sample.T - 1):
            rel = Path(f"{i:05d}_{t:02d}.flo")
            write_flo(FlowField(stream[:, t].transpose(1, 2, 0)), out / rel)
            names.append(os.path.relpath((out / rel).resolve(), manifest.root.resolve()))
        entry["flow"] = names
    target = Path(args.write_manifest or args.manifest)
    manifest.save(target)
    print(f"flow for {len(manifest)} clips; manifest {target}")
    return EXIT_OK


def _train(args) -> int:
    from .config import ExperimentConfig
    from .trainer import train

    config = ExperimentConfig.load(args.config)
    if args.epochs:
        config.epochs = args.epochs
    out = train(config)
    print(json.dumps({"checkpoint": out.checkpoint, "best_epoch": out.fit.best_epoch,
                      "val_top1": None if out.val is None else out.val.top1,
                      "test_top1": None if out.test is None else out.test.top1}))
    return EXIT_OK


def _eval(args) -> int:
    from .trainer import evaluate_checkpoint

    m = evaluate_checkpoint(args.checkpoint, args.split)
    print(json.dumps({"top1": m.top1, "loss": m.loss, "per_class": m.per_class}))
    return EXIT_OK


def _inflate(args) -> int:
    from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
    from .frontends import build_frontend
    from .inflation import inflate_network
    from .tensor import Rng

    src = read_checkpoint(args.from2d)
    kind = args.kind or src.meta.get("kind")
    m = args.width_multiplier or src.meta.get("m", "1/8")
    if not kind:
        raise ConfigError("--kind is required when the checkpoint does not record one")
    in_channels = int(src.meta.get("in_channels", 1))
    net2d = build_frontend(kind, in_channels, m, Rng(0), dims=2)
    prefix = args.prefix
    if prefix is None:
        prefix = "frontend." if any(k.startswith("frontend.") for k in src.entries) else ""
    state = {k[len(prefix):]: v for k, v in src.entries.items() if k.startswith(prefix)}
    try:
        net2d.load_state_dict(state)
    except ShapeError as exc:
        raise FormatError(f"2D checkpoint does not match {kind}: {exc}") from None
    net3d = build_frontend(kind, args.in_channels or in_channels, m, Rng(args.seed), dims=3)
    report = inflate_network(net2d, net3d, "average" if args.adapt_channels else None)
    checksum = save_checkpoint(net3d, args.to3d, "inflated", {"kind": kind, "m": str(m)}, src.checksum,
                               {"kind": kind, "m": str(m), "in_channels": args.in_channels or in_channels,
                                "fresh": report.fresh})
    print(report.summary())
    print(f"wrote {args.to3d} checksum {checksum:016x}")
    load_checkpoint(args.to3d, net3d)
    return EXIT_OK


def _ablate(args) -> int:
    from .config import load_grid
    from .trainer import ablate

    grid = load_grid(args.grid)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ablate(grid, seeds, args.out)
    for r in rows:
        print(f"({r.row}) {r.inputs:9s} {r.frontend:28s} {r.backend:6s} {r.pretrain:12s} seed {r.seed} "
              f"val {r.val_top1} test {r.test_top1}")
    return EXIT_OK


def _arch(args) -> int:
    from .config import ExperimentConfig
    from .tensor import Rng
    from .trainer import architecture, assemble

    if args.config:
        config = ExperimentConfig.load(args.config)
    else:
        inputs = ["gray", "flow"] if args.frontend.startswith("TwoStream") else [args.inputs]
        config = ExperimentConfig.from_dict({"inputs": inputs, "frontend": args.frontend, "backend": args.backend,
                                             "width_multiplier": args.width_multiplier})
    model = assemble(config, args.vocab, Rng(config.seed))
    text = architecture(model, args.frames, args.size, args.size)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def _gradcheck(args) -> int:
    from .checks import gradcheck_config, gradcheck_op

    if args.op:
        report = gradcheck_op(args.op, seed=args.seed)
    elif args.config:
        from .config import ExperimentConfig

        report = gradcheck_config(ExperimentConfig.load(args.config), seed=args.seed, max_checks=args.max_checks)
    else:
        raise ConfigError("gradcheck needs --op or --config")
    print(report)
    return EXIT_OK if report.passed else EXIT_DIVERGED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lipread3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic word dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=20)
    g.add_argument("--samples-per-class", type=int, default=16)
    g.add_argument("--eval-samples-per-class", type=int, default=8)
    g.add_argument("--frame-size", type=int, default=32)
    g.add_argument("--clip-length", type=int, default=29)
    g.add_argument("--window", type=int, default=15)
    g.add_argument("--noise", type=float, default=0.04)
    g.add_argument("--distractor", type=float, default=0.35)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--splits", default="train,val,test")
    g.set_defaults(func=_gen_data)

    f = sub.add_parser("flow", help="estimate optical flow and write .flo files")
    f.add_argument("--manifest")
    f.add_argument("--frames", nargs="+", help="PGM frames of one clip, in order")
    f.add_argument("--out", required=True)
    f.add_argument("--write-manifest", help="where to save the manifest with flow paths (default: in place)")
    f.add_argument("--window", type=int, default=9)
    f.add_argument("--levels", type=int, default=1)
    f.add_argument("--iterations", type=int, default=5)
    f.set_defaults(func=_flow)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", required=True, help="manifest JSON of the split")
    e.set_defaults(func=_eval)

    i = sub.add_parser("inflate", help="inflate a 2D front-end checkpoint into 3D")
    i.add_argument("--from2d", required=True)
    i.add_argument("--to3d", required=True)
    i.add_argument("--kind", help="front-end kind (Res2D, Shallow3D_Res2D, I3D)")
    i.add_argument("--width-multiplier")
    i.add_argument("--in-channels", type=int)
    i.add_argument("--adapt-channels", action="store_true", help="average/replicate the first conv's input channels")
    i.add_argument("--prefix", help="entry-name prefix of the front-end inside the checkpoint")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=_inflate)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--grid", required=True)
    a.add_argument("--seeds", default="0")
    a.add_argument("--out", default="ablation.csv")
    a.set_defaults(func=_ablate)

    r = sub.add_parser("arch", help="print the architecture table of a model")
    r.add_argument("--config")
    r.add_argument("--frontend", default="I3D")
    r.add_argument("--backend", default="BiLSTM")
    r.add_argument("--inputs", default="gray", choices=["gray", "flow"])
    r.add_argument("--width-multiplier", default="1")
    r.add_argument("--vocab", type=int, default=500)
    r.add_argument("--frames", type=int, default=29)
    r.add_argument("--size", type=int, default=112)
    r.add_argument("--out")
    r.set_defaults(func=_arch)

    c = sub.add_parser("gradcheck", help="finite-difference gradient check")
    c.add_argument("--op")
    c.add_argument("--config")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--max-checks", type=int, default=40)
    c.set_defaults(func=_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MappingError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, FormatError, ShapeError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
