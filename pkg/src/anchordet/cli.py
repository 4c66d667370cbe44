"""Command-line entry point: generate, encode, train, infer, eval, ablate, bench.

File arguments default to locations under ``$ANCHORDET_DATA`` (``./data``
when unset). Exit status is 0 on success, 2 on bad input or configuration
(with a ``path:line`` diagnostic on stderr) and 1 on runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
from pathlib import Path

from . import bench as benchmod
from .config import ConfigError, dump_config, load_config
from .dataio import RecordError, atomic_write, dumps_detections, dumps_targets, load_detections, targets_report
from .evaluation import evaluate, metrics_csv
from .head import TrainingDiverged, load_checkpoint, save_checkpoint
from .pipeline import (ABLATION_GRID, SUPERVISION_MODES, infer_scene, make_frame, run_ablation, supervision_setup,
                       train_head)
from .raster import RASTER_2MP, RASTER_8MP
from .synth import SceneFormatError, SceneGenerationError, dumps_scenes, generate_scene, load_scenes, scale_labels

log = logging.getLogger("anchordet")

DATA_ENV = "ANCHORDET_DATA"


class UsageError(Exception):
    pass


def data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


def _path(arg, default_name: str) -> Path:
    return Path(arg) if arg else data_dir() / default_name


def _cfg(args):
    return load_config(args.config, args.set or ())


def _scenes(path):
    scenes = load_scenes(path)
    if not scenes:
        raise UsageError(f"{path}: no scenes")
    return scenes


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> None:
    cfg = _cfg(args)
    scfg = dataclasses.replace(cfg.scene, seed=args.seed)
    scenes = [generate_scene(scfg, args.first_id + i) for i in range(args.n_scenes)]
    out = _path(args.out, "scenes.jsonl")
    atomic_write(out, dumps_scenes(scenes))
    log.info("wrote %d scenes to %s", len(scenes), out)


def cmd_encode(args) -> None:
    scenes = _scenes(_path(args.scenes, "scenes.jsonl"))
    source, _ = supervision_setup(args.supervision)
    grids, report = {}, []
    for s in scenes:
        if args.raster == "2mp":
            frame = make_frame(s, RASTER_2MP, dropout=0.0, box2d_source=source)
        else:
            s8 = dataclasses.replace(s, labels=scale_labels(s.labels, 2.0))
            frame = make_frame(s8, RASTER_8MP, dropout=0.0, box2d_source=source, cam=s.camera.scaled(2))
        grids[s.scene_id] = frame.targets
        report.append(targets_report(s.scene_id, frame.targets, args.all_pixels))
    meta = {"raster": args.raster, "supervision": args.supervision}
    atomic_write(_path(args.out, "targets.jsonl"), dumps_targets(grids, meta))
    text = "\n".join(report)
    if args.report:
        atomic_write(args.report, text)
    else:
        sys.stdout.write(text)


def cmd_train(args) -> None:
    cfg = _cfg(args)
    scenes = _scenes(_path(args.scenes, "scenes.jsonl"))
    result = train_head(scenes, args.supervision, cfg.optim, args.seed, cfg.loss)
    out = _path(args.out, "head.ckpt")
    meta = {"supervision": args.supervision, "seed": args.seed, "n_scenes": len(scenes),
            "optim": dataclasses.asdict(cfg.optim), "loss": dataclasses.asdict(cfg.loss)}
    tmp = out.with_name(out.name + ".partial")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(tmp, result.params, meta)
    os.replace(tmp, out)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "total", "class", "2d", "3d"))
    for i, row in enumerate(result.curve):
        w.writerow((i, *(f"{row[k]:.6f}" for k in ("total", "class", "2d", "3d"))))
    atomic_write(args.curve or out.with_suffix(".curve.csv"), buf.getvalue())
    log.info("trained on %d scenes; final loss %.4f", len(scenes), result.curve[-1]["total"])


def cmd_infer(args) -> None:
    cfg = _cfg(args)
    params, meta = load_checkpoint(_path(args.checkpoint, "head.ckpt"))
    scenes = _scenes(_path(args.scenes, "scenes.jsonl"))
    post = dataclasses.replace(cfg.post, nms=args.nms)
    dets = {s.scene_id: infer_scene(params, s, post, args.seed, args.resolution_transfer) for s in scenes}
    info = {"nms": args.nms, "resolution_transfer": args.resolution_transfer, "seed": args.seed,
            "checkpoint_meta": meta}
    atomic_write(_path(args.out, "detections.jsonl"), dumps_detections(dets, info))


def cmd_eval(args) -> None:
    cfg = _cfg(args)
    dets = load_detections(_path(args.detections, "detections.jsonl"))
    scenes = _scenes(_path(args.scenes, "scenes.jsonl"))
    known = {s.scene_id for s in scenes}
    extra = sorted(set(dets) - known)
    if extra:
        raise UsageError(f"detections reference unknown scene ids {extra[:5]}")
    rows = evaluate([dets.get(s.scene_id, []) for s in scenes], [s.labels for s in scenes], cfg.eval)
    text = metrics_csv(rows)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_ablate(args) -> None:
    cfg = _cfg(args)
    train_scenes = _scenes(args.train_scenes)
    test_scenes = _scenes(args.test_scenes)
    rows = run_ablation(train_scenes, test_scenes, cfg.optim, args.seed, cfg.eval, cfg.post, ABLATION_GRID, cfg.loss)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("supervision", "nms", "class", "bucket_min", "bucket_max", "metric", "value"))
    for r in rows:
        for cls, lo, hi, metric, v in r["metrics"]:
            w.writerow((r["supervision"], r["nms"], cls, f"{lo:g}", f"{hi:g}", metric, f"{v:.6f}"))
    if args.out:
        atomic_write(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


def cmd_bench(args) -> None:
    try:
        ranges = [float(x) for x in args.ranges.split(",") if x.strip()]
    except ValueError as e:
        raise UsageError(f"--ranges: {e}") from e
    params = None
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
    rows = benchmod.bench_range_scaling(ranges, args.reps, args.warmup, args.seed, params=params, oracle=args.oracle)
    text = benchmod.rows_csv(rows)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    if args.dat:
        atomic_write(args.dat, benchmod.rows_gnuplot(rows))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anchordet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="seed for every random choice")

    sp = sub.add_parser("generate", help="write a synthetic scene dataset")
    common(sp)
    sp.add_argument("--n-scenes", type=int, default=10)
    sp.add_argument("--first-id", type=int, default=0, help="scene id of the first scene")
    sp.add_argument("--out", help="scene JSON-lines file")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("encode", help="dump target grids and a per-pixel report")
    common(sp, seed=False)
    sp.add_argument("--scenes")
    sp.add_argument("--out", help="target JSON-lines file")
    sp.add_argument("--report", help="text report file (stdout when omitted)")
    sp.add_argument("--raster", choices=("2mp", "8mp"), default="2mp")
    sp.add_argument("--supervision", choices=SUPERVISION_MODES, default="3d+2d")
    sp.add_argument("--all-pixels", action="store_true", help="include background pixels in the report")
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("train", help="train the head and write a checkpoint")
    common(sp)
    sp.add_argument("--scenes")
    sp.add_argument("--out", help="checkpoint file")
    sp.add_argument("--curve", help="loss curve CSV (default: next to the checkpoint)")
    sp.add_argument("--supervision", choices=SUPERVISION_MODES, default="3d+2d")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="run a checkpoint over scenes")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--scenes")
    sp.add_argument("--out", help="detection JSON-lines file")
    sp.add_argument("--nms", choices=("2d", "3d", "both", "none"), default="both")
    sp.add_argument("--resolution-transfer", action="store_true",
                    help="double raster resolution, no dropout, halve ranges, undo per detection")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score detections against scene labels")
    common(sp, seed=False)
    sp.add_argument("--detections")
    sp.add_argument("--scenes")
    sp.add_argument("--out", help="metrics CSV (stdout when omitted)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="supervision x NMS table on held-out scenes")
    common(sp)
    sp.add_argument("--train-scenes", required=True)
    sp.add_argument("--test-scenes", required=True)
    sp.add_argument("--out", help="combined CSV (stdout when omitted)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bench", help="runtime vs operating range")
    common(sp)
    sp.add_argument("--ranges", default="100,200,300,400,500", help="comma-separated max ranges in metres")
    sp.add_argument("--reps", type=int, default=20)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--checkpoint", help="head to time (default: train a small one first)")
    sp.add_argument("--oracle", action="store_true", help="time target encoding with perfect predictions")
    sp.add_argument("--out", help="CSV (stdout when omitted)")
    sp.add_argument("--dat", help="also write a gnuplot data file")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.dump_config:
            sys.stdout.write(dump_config(_cfg(args)))
            return 0
        args.func(args)
    except (ConfigError, SceneFormatError, RecordError, UsageError, FileNotFoundError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"anchordet {args.command}: error: {msg}", file=sys.stderr)
        return 2
    except (SceneGenerationError, TrainingDiverged, ValueError) as e:
        print(f"anchordet {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
