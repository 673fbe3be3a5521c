"""Command line entry point: ``xdistill <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import io
from .harness import (
    ABLATION_AXES,
    FIELD_TYPES,
    MetricsReport,
    Trainer,
    TrainConfig,
    _parse_value,
    evaluate_depth,
    load_config,
    run_ablation,
)
from .scenes import SceneDataset


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file of 'key = value' lines")
    group = parser.add_argument_group("config overrides (win over the file)")
    for f in fields(TrainConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar=f.name.upper(),
                           default=None, help=f"default: {f.default}")


def _config_from(args) -> TrainConfig:
    overrides = {}
    for name, kind in FIELD_TYPES.items():
        raw = getattr(args, f"cfg_{name}", None)
        if raw is not None:
            overrides[name] = _parse_value(raw, kind, name)
    return load_config(args.config, **overrides)


def _print_report(report: MetricsReport, as_json: bool) -> None:
    if as_json:
        print(json.dumps(report.as_dict()))
        return
    for key, value in report.as_dict().items():
        print(f"{key:>9}: {value:.6f}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _config_from(args)
    count = args.num if args.num is not None else cfg.num_scenes
    ds = SceneDataset(count, cfg.scene_params(), cfg.data_seed)
    n = io.write_dataset(args.out, (ds[i] for i in range(count)))
    print(f"wrote {n} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from(args)
    trainer = Trainer(cfg)
    run_dir = Path(args.run_dir) if args.run_dir else cfg.run_dir()
    if args.resume:
        trainer.load_checkpoint(args.resume)

    def progress(_, row):
        if args.log_every and (row["step"] % args.log_every == 0 or trainer.step == cfg.steps):
            print(f"step {int(row['step']):6d}  total {row['total']:.5f}  photometric {row['photometric']:.5f}  "
                  f"d2s {row['d2s']:.4f}  lambda {row['lambda_d2s']:.5f}", flush=True)

    trainer.train(run_dir=run_dir, callback=progress)
    report = trainer.evaluate()
    (run_dir / "metrics.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    print(f"run directory: {run_dir}")
    _print_report(report, args.json)
    return 0


def cmd_eval(args) -> int:
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise ValueError("--pred and --gt must be given together")
        report = evaluate_depth(io.read_tensor(args.pred), io.read_tensor(args.gt), args.median_scale)
        _print_report(report, args.json)
        return 0
    if not args.checkpoint:
        raise ValueError("eval needs --checkpoint (with --data or the config's eval split) or --pred/--gt")
    cfg = _config_from(args)
    trainer = Trainer(cfg)
    trainer.load_checkpoint(args.checkpoint)
    dataset = None
    if args.data:
        from .harness import _DirectoryDataset
        dataset = _DirectoryDataset(args.data)
    report = trainer.evaluate(dataset, median_scale=args.median_scale)
    _print_report(report, args.json)
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import format_rows, timed_suite

    rows, seconds = timed_suite(dtypes=args.dtype, probes=args.probes, seed=args.seed, ops=args.op)
    print(format_rows(rows))
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed in {seconds:.1f}s")
    return 0 if not failed else 1


def cmd_ablate(args) -> int:
    cfg = _config_from(args)

    def progress(row):
        print(f"{row['variant']:<20} seed {row['seed']}  abs_rel {row['abs_rel']:.4f}", flush=True)

    result = run_ablation(args.axis, cfg, seeds=args.seeds, out_dir=args.out, progress=progress,
                          variants=args.variants)
    print(result.to_csv(), end="")
    for flag in result.flags:
        print(f"note: {flag}")
    return 0


def cmd_export(args) -> int:
    if args.checkpoint:
        cfg = _config_from(args)
        trainer = Trainer(cfg, dataset=[])
        trainer.load_checkpoint(args.checkpoint)
        image = io.read_tensor(args.input)
        if image.ndim == 3:
            image = image[None]
        array = trainer.predict_depth(image)[0]
    else:
        array = io.read_tensor(args.input)
    if args.kind == "depth":
        array = io.depth_to_image(np.squeeze(array))
    io.export_image(args.output, array)
    print(f"wrote {args.output}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xdistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("generate", help="render a scene dataset to a directory")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, help="number of samples (default: num_scenes)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train depth, pose and translator networks")
    p.add_argument("--run-dir", help="output directory (default: <output_dir>/<hash>_seed<seed>)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--json", action="store_true", help="print final metrics as JSON")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="depth metrics for a checkpoint or a prediction file")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset directory written by 'generate'")
    p.add_argument("--pred", help="predicted depth tensor file")
    p.add_argument("--gt", help="ground-truth depth tensor file")
    p.add_argument("--median-scale", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--json", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", nargs="+", choices=("float32", "float64"), default=["float32", "float64"])
    p.add_argument("--op", nargs="+", help="restrict to these ops")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train every variant along an ablation axis")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", help="directory for per-run logs and the CSV table")
    p.add_argument("--variants", nargs="+", help="only these variants (baselines always run)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="write a depth map or image tensor as a P2/P3 pixmap")
    p.add_argument("--input", required=True, help="tensor file: depth map, or an RGB frame with --checkpoint")
    p.add_argument("--output", required=True)
    p.add_argument("--kind", choices=("depth", "image"), default="depth")
    p.add_argument("--checkpoint", help="predict depth for the input frame with this checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        print(f"xdistill {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
