"""Command-line entry point.

Subcommands: synth, train, eval, infer, gradcheck, selftest.
Exit codes: 0 success, 2 usage or config error, 3 numeric failure,
4 I/O failure.  Set ACTIONLOC_LOG=debug|info|warning to control verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint, plots
from .config import ConfigError, RunConfig, from_dict, load_config
from .data import DatasetError, SyntheticSpec, generate, load
from .detect import write_detections
from .evaluate import EvalProtocol
from .train import (TrainingError, evaluate_split, infer_video, load_run,
                    resolve_for_dataset, train)

log = logging.getLogger("actionloc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _setup_logging() -> None:
    level = os.environ.get("ACTIONLOC_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(message)s")


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return from_dict({})
    return load_config(path)


def _parse_thresholds(text: str) -> tuple[float, ...]:
    """Either a comma list '0.3,0.5' or a grid 'lo:step:hi'."""
    if ":" in text:
        lo, step, hi = (float(x) for x in text.split(":"))
        if step <= 0:
            raise ConfigError(f"threshold grid step must be positive: {text}")
        out = []
        v = lo
        while v <= hi + 1e-9:
            out.append(round(v, 10))
            v += step
        return tuple(out)
    return tuple(float(x) for x in text.split(","))


def cmd_synth(args) -> int:
    raw = yaml.safe_load(Path(args.spec).read_text()) or {}
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = SyntheticSpec.from_dict(raw)
    manifest = generate(spec, args.out)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    dataset = load(args.dataset)
    result = train(dataset, cfg, args.out, resume=args.resume)
    last = result.stats[-1] if result.stats else None
    if last is not None:
        print(f"final loss {last.total:.6f}"
              + (f", best val mAP {result.best_map:.4f}" if result.best_map is not None else ""))
    print(f"run directory: {result.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, cfg = load_run(args.checkpoint, best=args.best)
    dataset = load(args.dataset)
    cfg = resolve_for_dataset(cfg, dataset)
    if args.thresholds:
        cfg.evaluation = EvalProtocol(thresholds=_parse_thresholds(args.thresholds))
        cfg.evaluation.validate()
    detections, report = evaluate_split(dataset, args.subset, params, cfg,
                                        jobs=args.jobs)
    print(report.text_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "map_report.tsv").write_text(report.tsv())
        write_detections(out / "detections.tsv", detections, dataset.class_names)
        plots.save_map_curve(report.thresholds, report.map_per_threshold,
                             report.average_map, out / "figures" / "map_by_threshold.png",
                             per_class=report.ap)
        print(f"report written to {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    params, cfg = load_run(args.checkpoint, best=args.best)
    dataset = load(args.dataset)
    cfg = resolve_for_dataset(cfg, dataset)
    videos = dataset.split(args.subset) if args.subset else dataset.videos
    if args.video:
        videos = [v for v in videos if v.id == args.video]
        if not videos:
            raise DatasetError(f"video {args.video!r} not in dataset")
    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            dets = list(pool.map(
                lambda v: infer_video(v, params, cfg, dataset.feature_fps), videos))
    else:
        dets = [infer_video(v, params, cfg, dataset.feature_fps) for v in videos]
    by_video = {v.id: d for v, d in zip(videos, dets)}
    write_detections(args.out, by_video, dataset.class_names)
    total = sum(len(d) for d in by_video.values())
    print(f"wrote {total} detections for {len(videos)} video(s) to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import (COMPOSED_TOLERANCE, OP_TOLERANCE,
                         composed_gradient_report, op_gradient_report)
    ops = op_gradient_report(points=args.points, seed=args.seed)
    composed = composed_gradient_report(points=max(1, args.points // 2),
                                        seed=args.seed)
    failed = False
    print(f"{'op':24s} {'max rel err':>12s}  limit {OP_TOLERANCE:.0e}")
    for name, err in sorted(ops.items()):
        ok = err < OP_TOLERANCE
        failed |= not ok
        print(f"{name:24s} {err:12.3e}  {'ok' if ok else 'FAIL'}")
    print(f"{'composed':24s} {'max rel err':>12s}  limit {COMPOSED_TOLERANCE:.0e}")
    for name, err in composed.items():
        ok = err < COMPOSED_TOLERANCE
        failed |= not ok
        print(f"{name:24s} {err:12.3e}  {'ok' if ok else 'FAIL'}")
    if failed:
        print("gradient check FAILED")
        return EXIT_NUMERIC
    print("gradient check passed")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .verify import oracle_report
    results = oracle_report(seed=args.seed)
    failed = False
    for r in results:
        failed |= not r.passed
        print(f"[{'pass' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    if failed:
        print("selftest FAILED")
        return EXIT_NUMERIC
    print("selftest passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="actionloc",
                                description="Temporal action localization on "
                                            "precomputed frame features.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("spec", help="YAML file with synthetic-dataset settings")
    sp.add_argument("out", help="output directory")
    sp.add_argument("--seed", type=int, default=None, help="override the spec seed")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--config", default=None, help="run config YAML (defaults apply)")
    sp.add_argument("--dataset", required=True, help="dataset directory or manifest")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--resume", action="store_true",
                    help="continue from the checkpoint in the run directory")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint (mAP table)")
    sp.add_argument("--checkpoint", required=True,
                    help="run directory or checkpoint file")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--subset", default="val")
    sp.add_argument("--thresholds", default=None,
                    help="comma list '0.3,0.5' or grid '0.3:0.1:0.7'")
    sp.add_argument("--out", default=None, help="write report files here")
    sp.add_argument("--best", action="store_true", help="use the best checkpoint")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("infer", help="write detections for a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--subset", default=None, help="restrict to a subset")
    sp.add_argument("--video", default=None, help="restrict to one video id")
    sp.add_argument("--out", required=True, help="detections TSV path")
    sp.add_argument("--best", action="store_true")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    sp.add_argument("--points", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("selftest", help="run the brute-force oracle suites")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except checkpoint.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
