"""On-disk formats: dataset container, run configs, metrics CSV, checkpoints, SVG reports.

Dataset container layout (all little-endian)::

    b"SEGD"  u16 version  u32 N  u32 H  u32 W  u32 C  u32 K
    N x ( f32[H*W*C] image, u8[H*W] clean mask, u8[H*W] noisy mask )
    u32 length  UTF-8 JSON metadata

The metadata block carries class names, split tags, the generator config
and the seed.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .earlycurve import curve
from .netcore import ModelParams, ModelSpec
from .synthgen import SPLITS, Dataset, NoiseConfig, SynthConfig
from .trainer import AGGREGATE, COLUMNS, TrainConfig

MAGIC = b"SEGD"
VERSION = 1
_HEADER = struct.Struct("<4sH5I")


class DatasetFormatError(ValueError):
    """Base class for unreadable dataset files."""


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    def __init__(self, expected: int, actual: int, what: str = "file"):
        super().__init__(f"truncated {what}: expected at least {expected} bytes, got {actual}")
        self.expected, self.actual = expected, actual


class CountMismatchError(DatasetFormatError):
    pass


class ConfigError(ValueError):
    def __init__(self, errors: list):
        super().__init__("invalid config:\n  " + "\n  ".join(errors))
        self.errors = list(errors)


# ---------------------------------------------------------------- dataset

def dataset_bytes(d: Dataset) -> bytes:
    n = len(d)
    h, w, c = d.images.shape[1:] if n else (0, 0, 0)
    meta = dict(d.meta)
    meta["split"] = [SPLITS[int(s)] for s in d.split]
    meta.setdefault("class_names", ["background"] + [f"class{i}" for i in range(1, d.num_classes)])
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, n, h, w, c, d.num_classes)]
    images = np.ascontiguousarray(d.images, dtype="<f4")
    clean = np.ascontiguousarray(d.clean_masks, dtype=np.uint8)
    noisy = np.ascontiguousarray(d.noisy_masks, dtype=np.uint8)
    for i in range(n):
        parts += [images[i].tobytes(), clean[i].tobytes(), noisy[i].tobytes()]
    parts += [struct.pack("<I", len(blob)), blob]
    return b"".join(parts)


def save_dataset(d: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(d))


def parse_dataset(buf: bytes) -> Dataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not a dataset file: magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(_HEADER.size, len(buf), "header")
    _, version, n, h, w, c, k = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"dataset format version {version}, this build reads {VERSION}")
    per = h * w * c * 4 + 2 * h * w
    body_end = _HEADER.size + n * per
    if len(buf) < body_end + 4:
        raise TruncatedFileError(body_end + 4, len(buf))
    (meta_len,) = struct.unpack_from("<I", buf, body_end)
    expected = body_end + 4 + meta_len
    if len(buf) < expected:
        raise TruncatedFileError(expected, len(buf))
    if len(buf) > expected:
        raise CountMismatchError(f"declared counts account for {expected} bytes, file has {len(buf)}")
    try:
        meta = json.loads(buf[body_end + 4:expected].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"metadata block is not valid JSON: {exc}") from None
    split_names = meta.pop("split", None)
    if split_names is None or len(split_names) != n:
        raise CountMismatchError(f"metadata lists {len(split_names or [])} split tags for {n} examples")
    records = np.frombuffer(buf, dtype=np.uint8, count=n * per, offset=_HEADER.size).reshape(n, per)
    nimg = h * w * c * 4
    images = records[:, :nimg].copy().view("<f4").reshape(n, h, w, c).astype(np.float32)
    clean = records[:, nimg:nimg + h * w].reshape(n, h, w).copy()
    noisy = records[:, nimg + h * w:].reshape(n, h, w).copy()
    split = np.array([SPLITS.index(s) for s in split_names], dtype=np.uint8)
    return Dataset(images, clean, noisy, split, k, meta)


def load_dataset(path) -> Dataset:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"dataset file not found: {p}")
    return parse_dataset(p.read_bytes())


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"synth": asdict(self.synth), "noise": asdict(self.noise), "train": asdict(self.train)}


_SECTIONS = {"synth": SynthConfig, "noise": NoiseConfig, "train": TrainConfig}


def _check_keys(section: str, cls, values: dict, errors: list) -> None:
    known = {f.name for f in fields(cls)}
    for key in sorted(set(values) - known):
        errors.append(f"{section}: unknown key {key!r}")


def _build(section: str, cls, values, errors: list):
    if not isinstance(values, dict):
        errors.append(f"{section}: expected an object, got {type(values).__name__}")
        return None
    _check_keys(section, cls, values, errors)
    known = {f.name for f in fields(cls)}
    kwargs = {k: v for k, v in values.items() if k in known}
    if section == "train" and isinstance(kwargs.get("optim"), dict):
        from .netcore import OptimConfig
        _check_keys("train.optim", OptimConfig, kwargs["optim"], errors)
        okeys = {f.name for f in fields(OptimConfig)}
        try:
            kwargs["optim"] = OptimConfig(**{k: v for k, v in kwargs["optim"].items() if k in okeys})
        except (TypeError, ValueError) as exc:
            errors.append(f"train.optim: {exc}")
            kwargs.pop("optim")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        # dataclass validation joins several messages with '; '
        errors.extend(f"{section}: {msg}" for msg in str(exc).split("; "))
        return None


def config_from_dict(doc) -> RunConfig:
    """Validate a config document; every problem is reported, not just the first."""
    errors: list = []
    if not isinstance(doc, dict):
        raise ConfigError(["top level must be a JSON object"])
    for key in sorted(set(doc) - set(_SECTIONS)):
        errors.append(f"unknown section {key!r}")
    built = {name: _build(name, cls, doc.get(name, {}), errors) for name, cls in _SECTIONS.items()}
    if errors:
        raise ConfigError(errors)
    return RunConfig(**built)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError([f"not valid JSON: {exc}"]) from None
    return config_from_dict(doc)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- metrics CSV

def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def parse_cell(name: str, s: str):
    if s == "":
        return None
    if name == "class":
        return s if s == AGGREGATE else int(s)
    if name in ("epoch", "triggered", "trigger_epoch", "corrected_pixels", "level"):
        return int(s)
    return float(s)


class MetricsWriter:
    """Appends rows as they arrive so an aborted run leaves a readable prefix."""

    def __init__(self, path, columns=COLUMNS):
        self.columns = list(columns)
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.columns)
        self._fh.flush()

    def write(self, rows: Iterable[dict]) -> None:
        for r in rows:
            self._w.writerow([format_cell(r.get(c)) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics_csv(rows: list, path, columns=COLUMNS) -> None:
    with MetricsWriter(path, columns) as w:
        w.write(rows)


def read_metrics_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty metrics file")
        return [{name: parse_cell(name, cell) for name, cell in zip(header, line)} for line in reader]


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params: ModelParams, path, config: Optional[dict] = None) -> None:
    header = json.dumps({"spec": asdict(params.spec), "config": config or {}}, sort_keys=True)
    vec = params.vector.astype(params.vector.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(header), vector=vec)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    with np.load(p, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        vector = z["vector"].copy()
    spec = ModelSpec(**header["spec"])
    return ModelParams(spec, vector.astype(spec.dtype)), header["config"]


# ---------------------------------------------------------------- SVG report

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


class LineChart:
    """Minimal deterministic SVG line chart."""

    W, H, ML, MR, MT, MB = 520, 320, 56, 130, 30, 44

    def __init__(self, title: str, xlabel: str, ylabel: str, y_range=(0.0, 1.0)):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.y_range = y_range
        self.series = []    # (label, xs, ys, color, dashed, show_points)
        self.markers = []   # (x, label, color)

    def add(self, label, xs, ys, color=None, dashed=False, points=True):
        color = color or PALETTE[len(self.series) % len(PALETTE)]
        self.series.append((label, list(xs), list(ys), color, dashed, points))

    def mark(self, x, label, color="#444444"):
        self.markers.append((x, label, color))

    def _xrange(self):
        xs = [x for s in self.series for x in s[1]] + [m[0] for m in self.markers]
        lo, hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
        return (lo - 0.5, hi + 0.5) if hi == lo else (lo, hi)

    def render(self) -> str:
        x0, x1 = self._xrange()
        y0, y1 = self.y_range
        pw, ph = self.W - self.ML - self.MR, self.H - self.MT - self.MB
        sx = lambda x: self.ML + (x - x0) / (x1 - x0) * pw  # noqa: E731
        sy = lambda y: self.MT + ph - (min(max(y, y0), y1) - y0) / (y1 - y0) * ph  # noqa: E731
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.W}" height="{self.H}" '
               f'font-family="sans-serif" font-size="11">',
               f'<rect width="{self.W}" height="{self.H}" fill="white"/>',
               f'<text x="{self.W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{self.title}</text>',
               f'<rect x="{self.ML}" y="{self.MT}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>']
        for i in range(6):
            yv = y0 + (y1 - y0) * i / 5
            out.append(f'<text x="{self.ML - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{_num(yv)}</text>')
            xv = x0 + (x1 - x0) * i / 5
            out.append(f'<text x="{sx(xv):.1f}" y="{self.MT + ph + 16}" text-anchor="middle">{_num(xv)}</text>')
        out.append(f'<text x="{self.ML + pw / 2:.1f}" y="{self.H - 8}" text-anchor="middle">{self.xlabel}</text>')
        out.append(f'<text x="14" y="{self.MT + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {self.MT + ph / 2:.1f})">{self.ylabel}</text>')
        for x, label, color in self.markers:
            out.append(f'<line class="trigger-marker" data-epoch="{x}" x1="{sx(x):.1f}" y1="{self.MT}" '
                       f'x2="{sx(x):.1f}" y2="{self.MT + ph}" stroke="{color}" stroke-dasharray="2,3"/>')
            out.append(f'<text x="{sx(x) + 3:.1f}" y="{self.MT + 12}" fill="{color}">{label}</text>')
        for i, (label, xs, ys, color, dashed, points) in enumerate(self.series):
            # undefined values break the line into segments
            segs, cur = [], []
            for x, y in zip(xs, ys):
                if y is None:
                    if cur:
                        segs.append(cur)
                    cur = []
                else:
                    cur.append(f"{sx(x):.1f},{sy(y):.1f}")
            if cur:
                segs.append(cur)
            dash = ' stroke-dasharray="6,4"' if dashed else ""
            for seg in segs:
                if len(seg) > 1:
                    out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} '
                               f'points="{" ".join(seg)}"/>')
                if points or len(seg) == 1:
                    out += [f'<circle cx="{p.split(",")[0]}" cy="{p.split(",")[1]}" r="2" fill="{color}"/>'
                            for p in seg]
            ly = self.MT + 10 + 16 * i
            lx = self.ML + pw + 10
            out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" '
                       f'stroke-width="2"{dash}/>')
            out.append(f'<text x="{lx + 22}" y="{ly + 4}">{label}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def _class_rows(rows: list, c) -> list:
    return [r for r in rows if r["class"] == c]


def _classes(rows: list) -> list:
    return sorted({r["class"] for r in rows if r["class"] != AGGREGATE})


def report_charts(rows: list) -> dict:
    """Chart name -> SVG text for one run's metric rows."""
    if not rows:
        raise ValueError("cannot report on an empty run record")
    charts = {}
    classes = _classes(rows)
    fg = [c for c in classes if c != 0] or classes

    ch = LineChart("Early learning and memorization", "epoch", "IoU on mislabeled pixels")
    for i, c in enumerate(fg):
        cr = _class_rows(rows, c)
        color = PALETTE[i % len(PALETTE)]
        ch.add(f"IoU_el c{c}", [r["epoch"] for r in cr], [r["iou_el"] for r in cr], color)
        ch.add(f"IoU_m c{c}", [r["epoch"] for r in cr], [r["iou_m"] for r in cr], color, dashed=True)
    charts["memorization"] = ch.render()

    for c in classes:
        cr = _class_rows(rows, c)
        ch = LineChart(f"Training IoU vs noisy labels, class {c}", "epoch", "IoU")
        epochs = [r["epoch"] for r in cr]
        ch.add("observed", epochs, [r["train_iou"] for r in cr], PALETTE[0], points=True)
        last = cr[-1]
        if last["fit_a"] is not None and max(epochs) >= 1:
            t = np.linspace(1, max(epochs), 200)
            ch.add("fitted", t, curve(t, last["fit_a"], last["fit_b"], last["fit_c"]),
                   PALETTE[1], points=False)
        if last["trigger_epoch"] is not None:
            ch.mark(last["trigger_epoch"], f"trigger {last['trigger_epoch']}", PALETTE[1])
        charts[f"fit_class{c}"] = ch.render()

    agg = _class_rows(rows, AGGREGATE)
    ch = LineChart("Annotation quality and accuracy", "epoch", "mIoU")
    ep = [r["epoch"] for r in agg]
    ch.add("label quality", ep, [r["label_quality"] for r in agg])
    ch.add("val", ep, [r["val_iou"] for r in agg])
    ch.add("test", ep, [r["test_iou"] for r in agg])
    charts["quality"] = ch.render()
    return charts


def write_report(rows: list, out_dir) -> list:
    """Write the run's SVG charts plus its metrics CSV; returns the written paths."""
    charts = report_charts(rows)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, svg in charts.items():
        p = out / f"{name}.svg"
        p.write_text(svg, encoding="utf-8")
        paths.append(p)
    p = out / "metrics.csv"
    write_metrics_csv(rows, p)
    return paths + [p]


SWEEP_COLUMNS = ["level", "annotation_miou", "baseline", "adele", "gap"]


def sweep_rows(points) -> list:
    rows = []
    for pt in points:
        r = pt.row()
        r["gap"] = r["adele"] - r["baseline"]
        rows.append(r)
    return rows


def sweep_chart(rows: list) -> str:
    if not rows:
        raise ValueError("cannot chart an empty sweep")
    ch = LineChart("Test mIoU vs annotation quality", "annotation mIoU", "test mIoU")
    xs = [r["annotation_miou"] for r in rows]
    ch.add("baseline", xs, [r["baseline"] for r in rows])
    ch.add("adele", xs, [r["adele"] for r in rows])
    return ch.render()


def write_sweep(points, out_dir) -> list:
    rows = sweep_rows(points)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out / "sweep.csv", SWEEP_COLUMNS)
    (out / "sweep.svg").write_text(sweep_chart(rows), encoding="utf-8")
    return [out / "sweep.csv", out / "sweep.svg"]
