"""Command line front end for the whole pipeline.

Subcommands mirror the stages: gen-params, simulate, events, label, train,
eval, sweep.  Every stage is seeded and file-driven so runs reproduce
exactly; simulate exits 0 only when every requested sample reached ok
status.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import learn, pipeline
from .errors import SlipforgeError
from .evsim import EventModelParams, frames_to_events, write_events
from .labelprep import LabelThresholds
from .render import read_pgm

PRESETS = {
    "simple": pipeline.simple_set_spec,
    "complex": pipeline.complex_set_spec,
    "table": pipeline.table_spec,
}


def _load_spec(args) -> pipeline.SweepSpec:
    if args.preset:
        spec = PRESETS[args.preset]()
    else:
        with open(args.config) as f:
            doc = json.load(f)
        spec = pipeline.SweepSpec.from_dict(doc.get("sweep", doc))
    if args.seed is not None:
        spec.seed = args.seed
    return spec


def _load_event_model(args) -> EventModelParams:
    if args.config:
        with open(args.config) as f:
            doc = json.load(f)
        if "event_model" in doc:
            return EventModelParams.from_dict(doc["event_model"])
    return pipeline.default_event_params()


def _cmd_gen_params(args) -> int:
    spec = _load_spec(args)
    sets = pipeline.gen_params(spec)
    subsets = pipeline.sample_subsets(spec)
    if args.output:
        with open(args.output, "w") as f:
            json.dump(
                [dict(p.to_dict(), subset=s) for p, s in zip(sets, subsets)],
                f,
                indent=1,
                sort_keys=True,
            )
            f.write("\n")
    print(f"generated {len(sets)} parameter sets ({subsets.count('test')} test)")
    return 0


def _cmd_simulate(args) -> int:
    spec = _load_spec(args)
    ep = _load_event_model(args)
    manifest = pipeline.run_dataset(
        spec,
        args.output,
        event_params=ep,
        parallelism=args.parallelism,
        resume=args.resume,
        dump_frames=args.dump_frames,
    )
    by_status = {}
    for r in manifest.records:
        by_status[r.status] = by_status.get(r.status, 0) + 1
    total_events = sum(r.n_events for r in manifest.records)
    print(
        f"{len(manifest.records)} samples: "
        + ", ".join(f"{k}={v}" for k, v in sorted(by_status.items()))
        + f"; {total_events} events"
    )
    return 0 if by_status.get("ok", 0) == len(manifest.records) else 1


def _cmd_events(args) -> int:
    frame_paths = sorted(Path(args.frames).glob("*.pgm"))
    if len(frame_paths) < 2:
        print(f"need at least 2 .pgm frames in {args.frames}", file=sys.stderr)
        return 1
    params = EventModelParams(
        contrast_threshold=args.contrast,
        threshold_sigma=args.sigma,
        refractory=args.refractory,
        leak_rate=args.leak,
        shot_noise_rate=args.shot,
        upsample_factor=args.upsample,
    )

    def frames():
        for i, p in enumerate(frame_paths):
            yield read_pgm(p), i / args.fps

    stream = frames_to_events(frames(), params, seed=args.seed)
    write_events(stream, args.output, format=args.format)
    print(f"{len(stream)} events from {len(frame_paths)} frames -> {args.output}")
    return 0


def _cmd_label(args) -> int:
    thresholds = LabelThresholds(theta_slip=args.theta_slip, theta_nonslip=args.theta_nonslip)
    summary = pipeline.run_labelprep(
        args.dataset,
        args.output,
        thresholds=thresholds,
        bins=args.bins,
        seed=args.seed,
        stat=args.stat,
    )
    w = summary["windows"]
    print(
        f"windows: {w['slip']} slip, {w['nonslip']} nonslip, {w['excluded']} excluded; "
        f"split train={summary['train']} val={summary['val']} test={summary['test']}"
    )
    return 0


def _cmd_train(args) -> int:
    sets = pipeline.load_featuresets(args.dataset)
    cfg = learn.TrainConfig(
        optimizer=args.optimizer,
        lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
    )
    model, record = learn.train(args.kind, sets["train"], sets["val"], cfg)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    learn.save_model(model, out / f"{args.kind}.ckpt")
    record.save(out / f"{args.kind}_record.json")
    print(f"best val accuracy {record.best_val_accuracy:.4f} -> {out / (args.kind + '.ckpt')}")
    return 0


def _cmd_eval(args) -> int:
    model = learn.load_model(args.checkpoint)
    sets = pipeline.load_featuresets(args.dataset)
    if args.split not in sets:
        print(f"no {args.split} split in {args.dataset}", file=sys.stderr)
        return 1
    acc, loss = learn.evaluate(model, sets[args.split])
    print(f"{args.split} accuracy {acc:.4f} loss {loss:.4f}")
    return 0


def _cmd_sweep(args) -> int:
    if args.space:
        with open(args.space) as f:
            space = json.load(f)
    else:
        space = {
            "lr": [1e-3, 3e-3, 1e-2],
            "batch_size": [16, 32],
            "optimizer": ["adam", "rmsprop"],
        }
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    records, best, _ = pipeline.run_experiment(
        args.kind, args.dataset, space, args.runs, args.seed, out_dir=str(out), epochs=args.epochs
    )
    if best is None:
        print("every run diverged; nothing to report", file=sys.stderr)
        return 1
    line = f"{args.kind}: best val accuracy {best.best_val_accuracy:.4f} over {len(records)} runs"
    if best.test_accuracy is not None:
        line += f", test accuracy {best.test_accuracy:.4f}"
    print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slipforge",
        description="Synthetic event-camera slip dataset generator and classifier trainer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_spec_args(p):
        g = p.add_mutually_exclusive_group(required=True)
        g.add_argument("--config", help="JSON file with a sweep (and event model) section")
        g.add_argument("--preset", choices=sorted(PRESETS), help="built-in sweep spec")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")

    p = sub.add_parser("gen-params", help="expand a sweep spec into parameter sets")
    add_spec_args(p)
    p.add_argument("--output", help="write the parameter sets to this JSON file")
    p.set_defaults(func=_cmd_gen_params)

    p = sub.add_parser("simulate", help="generate a full dataset of samples")
    add_spec_args(p)
    p.add_argument("--output", required=True, help="dataset directory")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--resume", action="store_true", help="skip samples that already exist")
    p.add_argument("--dump-frames", action="store_true", help="also write PGM frames")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("events", help="convert a directory of PGM frames to events")
    p.add_argument("--frames", required=True, help="directory of *.pgm frames")
    p.add_argument("--output", required=True)
    p.add_argument("--format", choices=["binary", "text"], default="binary")
    p.add_argument("--fps", type=float, default=60.0)
    p.add_argument("--contrast", type=float, default=0.2)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--refractory", type=float, default=0.0005)
    p.add_argument("--leak", type=float, default=0.0)
    p.add_argument("--shot", type=float, default=0.0)
    p.add_argument("--upsample", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_events)

    p = sub.add_parser("label", help="window, label, balance, and split a dataset")
    p.add_argument("--dataset", required=True, help="directory written by simulate")
    p.add_argument("--output", required=True, help="labeled dataset directory")
    p.add_argument("--theta-slip", type=float, default=1.0, help="slip threshold, degrees")
    p.add_argument("--theta-nonslip", type=float, default=0.1, help="non-slip threshold, degrees")
    p.add_argument("--bins", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stat", choices=["range", "endpoints"], default="range")
    p.set_defaults(func=_cmd_label)

    p = sub.add_parser("train", help="train one classifier on a labeled dataset")
    p.add_argument("--dataset", required=True, help="directory written by label")
    p.add_argument("--kind", choices=["mlp", "snn"], required=True)
    p.add_argument("--optimizer", choices=["adam", "rmsprop"], default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True, help="directory for checkpoint and record")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="random hyperparameter search")
    p.add_argument("--dataset", required=True, help="directory written by label")
    p.add_argument("--kind", choices=["mlp", "snn"], required=True)
    p.add_argument("--space", help="JSON file mapping config fields to value lists")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True, help="directory for run records")
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SlipforgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
