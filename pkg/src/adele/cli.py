"""Command-line entry point: ``python3 -m adele <command> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import io
from . import metrics as M
from .earlycurve import MIN_POINTS, NotEnoughDataError, scan_trigger
from .synthgen import PlacementError, generate_dataset
from .trainer import AGGREGATE, MODES, SweepPoint, _predict_single, annotation_quality, run_experiment

log = logging.getLogger("adele")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _levels(text: str) -> list:
    try:
        levels = [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated integers: {text!r}")
    if not levels:
        raise argparse.ArgumentTypeError("at least one level is required")
    if len(set(levels)) != len(levels):
        raise argparse.ArgumentTypeError(f"duplicate levels in {text!r}")
    if min(levels) < 0:
        raise argparse.ArgumentTypeError("levels must be >= 0")
    return levels


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",")]


# flag -> (section, key, type); None type means the flag has a custom parser
TRAIN_FLAGS = {
    "mode": ("train", "mode", str),
    "seed": ("train", "seed", int),
    "lam": ("train", "lam", float),
    "rho": ("train", "rho", float),
    "r": ("train", "r", float),
    "tau": ("train", "tau", float),
    "scales": ("train", "scales", _floats),
    "granularity": ("train", "granularity", str),
    "trigger_mode": ("train", "trigger_mode", str),
    "gate": ("train", "gate", str),
    "min_points": ("train", "min_points", int),
    "epochs": ("optim", "epochs", int),
    "lr": ("optim", "lr", float),
    "momentum": ("optim", "momentum", float),
    "weight_decay": ("optim", "weight_decay", float),
    "batch_size": ("optim", "batch_size", int),
}


def _add_train_flags(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    for name, (_, _, typ) in TRAIN_FLAGS.items():
        if name == "mode":
            if with_mode:
                p.add_argument("--mode", choices=MODES)
            continue
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adele", description="Early-learning label correction experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate and save a synthetic dataset")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train one arm and write metrics, checkpoint and summary")
    p.add_argument("--config", type=Path)
    p.add_argument("--data", type=Path, help="dataset file; generated from the config when omitted")
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)

    p = sub.add_parser("fit-curve", help="fit the saturating curve to an exported series")
    p.add_argument("--series", type=Path, required=True)
    p.add_argument("--r", type=float, default=0.9)
    p.add_argument("--class", dest="cls", default=None,
                   help="class to read from a metrics CSV (default: first class with data)")
    p.add_argument("--min-points", type=int, default=MIN_POINTS)

    p = sub.add_parser("eval", help="val/test mIoU of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("sweep", help="baseline vs ADELE over corruption levels")
    p.add_argument("--config", type=Path)
    p.add_argument("--levels", type=_levels, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--parallel", type=int, default=1)
    _add_train_flags(p, with_mode=False)

    p = sub.add_parser("report", help="render SVG charts for a finished run")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def merged_config(args) -> io.RunConfig:
    """Config file (or defaults) with command-line overrides applied, validated as one document."""
    doc = {}
    if getattr(args, "config", None) is not None:
        if not args.config.is_file():
            raise FileNotFoundError(f"config file not found: {args.config}")
        try:
            doc = json.loads(args.config.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise io.ConfigError([f"not valid JSON: {exc}"]) from None
        if not isinstance(doc, dict):
            raise io.ConfigError(["top level must be a JSON object"])
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    train = doc.setdefault("train", {})
    if isinstance(train, dict):
        optim = train.setdefault("optim", {})
        for name, (section, key, _) in TRAIN_FLAGS.items():
            val = getattr(args, name, None)
            if val is None:
                continue
            if section == "optim" and isinstance(optim, dict):
                optim[key] = val
            elif section == "train":
                train[key] = val
    return io.config_from_dict(doc)


def _dataset_for(args, cfg: io.RunConfig):
    if args.data is not None:
        return io.load_dataset(args.data)
    return generate_dataset(cfg.synth, cfg.noise)


def cmd_synth(args) -> int:
    cfg = merged_config(args)
    if args.seed is not None:
        cfg.synth = replace(cfg.synth, seed=args.seed)
    data = generate_dataset(cfg.synth, cfg.noise)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    io.save_dataset(data, args.out)
    digest = hashlib.sha256(args.out.read_bytes()).hexdigest()
    print(json.dumps({"annotation_miou": annotation_quality(data), "examples": len(data),
                      "sha256": digest, "path": str(args.out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = merged_config(args)
    data = _dataset_for(args, cfg)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_dict()
    echo["data"] = str(args.data) if args.data else None
    io.write_json(echo, out / "config.json")
    with io.MetricsWriter(out / "metrics.csv") as writer:
        try:
            record = run_experiment(cfg.train, data, on_epoch=writer.write)
        except Exception as exc:
            partial = getattr(exc, "partial_record", None)
            if partial is not None:
                io.save_checkpoint(partial.params, out / "checkpoint.npz", echo)
            raise
    io.save_checkpoint(record.params, out / "checkpoint.npz", echo)
    summary = dict(record.summary, mode=cfg.train.mode, seed=cfg.train.seed,
                   annotation_miou=annotation_quality(data))
    io.write_json(summary, out / "summary.json")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _read_series(path: Path, cls):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise NotEnoughDataError(f"{path}: empty series file")
    header = rows[0]
    if "epoch" in header and "class" in header and "train_iou" in header:
        metrics = io.read_metrics_csv(path)
        classes = sorted({r["class"] for r in metrics if r["class"] != AGGREGATE})
        if cls is None:
            cls = next((c for c in classes if c != 0), classes[0] if classes else 0)
        else:
            cls = cls if cls == AGGREGATE else int(cls)
        pts = [(r["epoch"], r["train_iou"]) for r in metrics
               if r["class"] == cls and r["epoch"] >= 1 and r["train_iou"] is not None]
    else:
        # plain two-column series, optional header
        body = rows[1:] if not _is_number(header[0]) else rows
        pts = [(float(r[0]), float(r[1])) for r in body if len(r) >= 2 and r[1] != ""]
    t = np.array([p[0] for p in pts], dtype=float)
    y = np.array([p[1] for p in pts], dtype=float)
    return t, y, cls


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def cmd_fit_curve(args) -> int:
    if not args.series.is_file():
        raise FileNotFoundError(f"series file not found: {args.series}")
    t, y, cls = _read_series(args.series, args.cls)
    if len(t) < args.min_points:
        raise NotEnoughDataError(f"series has {len(t)} points, at least {args.min_points} are needed")
    epoch, fit = scan_trigger((t, y), r=args.r, min_points=args.min_points)
    from .earlycurve import fit_curve
    final = fit_curve((t, y), args.min_points)
    out = {"a": final.a, "b": final.b, "c": final.c, "sse": final.sse, "points": final.points_used,
           "r": args.r, "trigger_epoch": epoch}
    if cls is not None:
        out["class"] = cls
    print(f"a={final.a:.6g} b={final.b:.6g} c={final.c:.6g} sse={final.sse:.3g}")
    print(f"trigger epoch {epoch}" if epoch is not None else "no trigger")
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def evaluate_checkpoint(params, data) -> dict:
    k = data.num_classes
    out = {}
    for split in ("val", "test"):
        sub = data.subset(split)
        if len(sub) == 0:
            out[f"{split}_miou"] = None
            continue
        rep = M.report_from_confusion(M.confusion_matrix(
            _predict_single(params, sub.images), sub.clean_masks, k))
        out[f"{split}_miou"] = rep.miou
    return out


def cmd_eval(args) -> int:
    params, _ = io.load_checkpoint(args.checkpoint)
    data = io.load_dataset(args.data)
    print(json.dumps(evaluate_checkpoint(params, data), sort_keys=True))
    return EXIT_OK


def _sweep_level(cfg: io.RunConfig, level: int) -> SweepPoint:
    data = generate_dataset(cfg.synth, replace(cfg.noise, max_iterations=level))
    runs = [run_experiment(replace(cfg.train, mode=arm), data) for arm in ("baseline", "adele")]
    for r in runs:
        r.params = None
    return SweepPoint(level, annotation_quality(data), *runs)


def cmd_sweep(args) -> int:
    cfg = merged_config(args)
    if args.parallel < 1:
        raise UsageError("--parallel must be >= 1")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(dict(cfg.to_dict(), levels=args.levels), out / "config.json")
    if args.parallel == 1:
        points = [_sweep_level(cfg, lv) for lv in args.levels]
    else:
        with ProcessPoolExecutor(args.parallel) as pool:
            points = list(pool.map(_sweep_level, [cfg] * len(args.levels), args.levels))
    for pt in points:
        for arm, rec in (("baseline", pt.baseline), ("adele", pt.adele)):
            d = out / f"level{pt.level}_{arm}"
            d.mkdir(exist_ok=True)
            io.write_metrics_csv(rec.rows, d / "metrics.csv")
            io.write_json(rec.summary, d / "summary.json")
    io.write_sweep(points, out)
    rows = io.sweep_rows(points)
    print(json.dumps(rows))
    return EXIT_OK


def cmd_report(args) -> int:
    run = args.run
    if not run.is_dir():
        raise FileNotFoundError(f"run directory not found: {run}")
    csv_path = run / "metrics.csv"
    if not csv_path.is_file():
        raise FileNotFoundError(f"no metrics.csv in {run}")
    paths = io.write_report(io.read_metrics_csv(csv_path), args.out)
    print(json.dumps([str(p) for p in paths]))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "fit-curve": cmd_fit_curve, "eval": cmd_eval,
            "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except io.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, io.DatasetFormatError, NotEnoughDataError, PlacementError,
            FloatingPointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
