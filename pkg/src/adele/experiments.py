"""Seeded multi-run experiments and the checks applied to their results.

Runs are cached on disk as JSON, keyed by the full run configuration plus a
digest of the package source, so a cached result is only reused when the code
that would produce it is unchanged.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .synthgen import generate_dataset
from .trainer import AGGREGATE, annotation_quality, run_experiment

log = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).resolve().parent
REPO_DIR = PACKAGE_DIR.parent.parent
CONFIG_DIR = REPO_DIR / "configs"
DEFAULT_CACHE = REPO_DIR / "results" / "cache"
SEEDS = (0, 1, 2, 3, 4)
SWEEP_LEVELS = (0, 1, 2, 3, 4, 6, 8)


# modules whose code determines a run's numbers
RESULT_MODULES = ("grid", "synthgen", "metrics", "earlycurve", "correct", "consistency", "netcore", "trainer")


def source_digest() -> str:
    h = hashlib.sha256()
    for p in (PACKAGE_DIR / f"{m}.py" for m in RESULT_MODULES):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def load_reference(name: str = "reference") -> io.RunConfig:
    return io.load_config(CONFIG_DIR / f"{name}.json")


def with_seed(cfg: io.RunConfig, seed: int, **train_overrides) -> io.RunConfig:
    """Same setting, new seed for both the data and the network."""
    return io.RunConfig(replace(cfg.synth, seed=seed), cfg.noise,
                        replace(cfg.train, seed=seed, **train_overrides))


@dataclass
class RunResult:
    config: dict
    summary: dict
    rows: list
    wall_clock: float
    annotation_miou: float

    def column(self, name: str, cls=AGGREGATE) -> list:
        return [r[name] for r in self.rows if r["class"] == cls]

    @property
    def classes(self) -> list:
        return sorted({r["class"] for r in self.rows if r["class"] != AGGREGATE})


def run_key(cfg: io.RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True) + source_digest()
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def run_cached(cfg: io.RunConfig, cache_dir: Optional[Path] = DEFAULT_CACHE) -> RunResult:
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{cfg.train.mode}-{run_key(cfg)}.json"
        if path.is_file():
            return RunResult(**json.loads(path.read_text()))
    data = generate_dataset(cfg.synth, cfg.noise)
    rec = run_experiment(cfg.train, data)
    res = RunResult(cfg.to_dict(), rec.summary, rec.rows, rec.wall_clock, annotation_quality(data))
    log.info("%s seed %d: %.1fs last test %.4f", cfg.train.mode, cfg.train.seed, rec.wall_clock,
             rec.summary["last_epoch_test_miou"])
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(res), sort_keys=True))
    return res


# ---------------------------------------------------------------- checks

@dataclass
class Check:
    passed: bool
    detail: str


def early_learning_signature(run: RunResult, drop: float = 0.05, min_iou_m: float = 0.5) -> Check:
    """Some foreground class peaks in IoU_el before the end and falls by ``drop``; pooled IoU_m is high."""
    found = []
    for c in run.classes:
        if c == 0:
            continue
        el = run.column("iou_el", c)[1:]          # trained epochs only
        vals = [v for v in el if v is not None]
        if not vals or el[-1] is None:
            continue
        peak = max(vals)
        at = el.index(peak)
        if at < len(el) - 1 and el[-1] <= peak - drop:
            found.append((c, at + 1, round(peak, 3), round(el[-1], 3)))
    iou_m = run.column("iou_m")[-1]
    ok = bool(found) and iou_m is not None and iou_m >= min_iou_m
    return Check(ok, f"classes (c, peak epoch, peak, final) {found}; final pooled IoU_m {iou_m:.3f}")


def count_holds(pairs: Sequence[tuple]) -> int:
    return sum(1 for a, b in pairs if a >= b)


def ablation_ordering(base, corr, cons, full, metric="last_epoch_val_miou", allowed=1) -> Check:
    n = len(base)
    get = lambda runs: [r.summary[metric] for r in runs]  # noqa: E731
    b, c1, c2, f = get(base), get(corr), get(cons), get(full)
    mid = [max(x, y) for x, y in zip(c1, c2)]
    top_ok = count_holds(zip(f, mid)) >= n - allowed
    low_ok = count_holds(zip(mid, b)) >= n - allowed
    detail = (f"means baseline {np.mean(b):.4f} correction {np.mean(c1):.4f} consistency {np.mean(c2):.4f} "
              f"adele {np.mean(f):.4f}; adele>=max holds {count_holds(zip(f, mid))}/{n}, "
              f"max>=baseline holds {count_holds(zip(mid, b))}/{n}")
    return Check(top_ok and low_ok, detail)


def improvement(base, full, margin=0.05) -> Check:
    bt = np.mean([r.summary["last_epoch_test_miou"] for r in base])
    ft = np.mean([r.summary["last_epoch_test_miou"] for r in full])
    bm = np.mean([r.column("iou_m")[-1] for r in base])
    fm = np.mean([r.column("iou_m")[-1] for r in full])
    ok = ft - bt >= margin and fm < bm
    return Check(ok, f"test mIoU baseline {bt:.4f} adele {ft:.4f} (gap {ft - bt:+.4f}); "
                     f"final IoU_m baseline {bm:.4f} adele {fm:.4f}")


def adaptive_vs_global(per_class, global_, min_seeds=4) -> Check:
    pc = np.mean([r.summary["last_epoch_test_miou"] for r in per_class])
    gl = np.mean([r.summary["last_epoch_test_miou"] for r in global_])
    spread = 0
    for r in per_class:
        epochs = {e for e in r.summary["trigger_epochs"] if e is not None}
        spread += len(epochs) >= 2
    ok = pc >= gl and spread >= min_seeds
    triggers = [r.summary["trigger_epochs"] for r in per_class]
    return Check(ok, f"test mIoU per-class {pc:.4f} global {gl:.4f}; distinct trigger epochs in "
                     f"{spread}/{len(per_class)} seeds {triggers}")


def sweep_shape(points: Sequence[dict], budget_s: float = 1800.0, wall: float = 0.0) -> Check:
    """``points``: dicts with level, annotation_miou, baseline, adele (test mIoU)."""
    aq = [p["annotation_miou"] for p in points]
    gaps = [p["adele"] - p["baseline"] for p in points]
    decreasing = all(a > b for a, b in zip(aq, aq[1:]))
    nonneg = all(g >= 0 for g in gaps)
    best = int(np.argmax(gaps))
    interior = 0 < best < len(gaps) - 1
    ok = decreasing and nonneg and interior and wall <= budget_s
    return Check(ok, f"annotation mIoU {[round(a, 3) for a in aq]}; gaps {[round(g, 4) for g in gaps]}; "
                     f"max gap at level {points[best]['level']}; runtime {wall:.0f}s of {budget_s:.0f}s")


# ---------------------------------------------------------------- suites

def arm_runs(cfg: io.RunConfig, mode: str, seeds=SEEDS, cache_dir=DEFAULT_CACHE, **overrides) -> list:
    return [run_cached(with_seed(cfg, s, mode=mode, **overrides), cache_dir) for s in seeds]


def sweep_runs(cfg: io.RunConfig, levels=SWEEP_LEVELS, seed: int = 0, cache_dir=DEFAULT_CACHE):
    points, wall = [], 0.0
    for level in levels:
        lv = io.RunConfig(replace(cfg.synth, seed=seed), replace(cfg.noise, max_iterations=level),
                          replace(cfg.train, seed=seed))
        b = run_cached(replace_mode(lv, "baseline"), cache_dir)
        a = run_cached(replace_mode(lv, "adele"), cache_dir)
        wall += b.wall_clock + a.wall_clock
        points.append({"level": level, "annotation_miou": b.annotation_miou,
                       "baseline": b.summary["last_epoch_test_miou"],
                       "adele": a.summary["last_epoch_test_miou"]})
    return points, wall


def replace_mode(cfg: io.RunConfig, mode: str) -> io.RunConfig:
    return io.RunConfig(cfg.synth, cfg.noise, replace(cfg.train, mode=mode))
