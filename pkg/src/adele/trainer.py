"""Training runs for the four ablation arms and the noise-level sweep.

``baseline``          single-scale cross-entropy on the noisy annotations
``correction_only``   baseline plus class-adaptive label correction
``consistency_only``  multiscale cross-entropy plus the consistency regularizer
``adele``             correction and consistency together

Arms without the regularizer train at scale 1.0 only, since extra scales would
change nothing but the cost.  Correction always uses the multiscale average.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import metrics as M
from .consistency import ScaledView, check_scales, consistency_grad_probs, consistency_loss, softmax_backward
from .correct import AnnotationStore, CorrectionState, correct_labels, label_quality, update_state, update_state_global
from .earlycurve import MIN_POINTS, FitResult, NotEnoughDataError, fit_curve
from .netcore import ModelParams, ModelSpec, OptimConfig, backward, cross_entropy, forward, init_params, predict_dataset, sgd_step
from .synthgen import Dataset, NoiseConfig, SynthConfig, generate_dataset

log = logging.getLogger(__name__)

MODES = ("baseline", "correction_only", "consistency_only", "adele")
AGGREGATE = "all"


@dataclass
class TrainConfig:
    mode: str = "adele"
    lam: float = 1.0
    rho: float = 0.8
    r: float = 0.9
    tau: float = 0.8
    scales: list = field(default_factory=lambda: [0.7, 1.0, 1.5])
    granularity: str = "epoch"        # epoch | iteration
    trigger_mode: str = "per_class"   # per_class | global
    gate: str = "pixel"
    stop_grad_q: bool = False
    min_points: int = MIN_POINTS
    hidden: list = field(default_factory=lambda: [[3, 16], [3, 16]])
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        errors = []
        if self.mode not in MODES:
            errors.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0:
            errors.append("lam must be >= 0")
        for name in ("rho", "r", "tau"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors.append(f"{name} must lie in [0, 1]")
        if self.granularity not in ("epoch", "iteration"):
            errors.append("granularity must be 'epoch' or 'iteration'")
        if self.trigger_mode not in ("per_class", "global"):
            errors.append("trigger_mode must be 'per_class' or 'global'")
        if self.gate not in ("pixel", "image"):
            errors.append("gate must be 'pixel' or 'image'")
        if self.min_points < 3:
            errors.append("min_points must be >= 3")
        try:
            self.scales = list(check_scales(self.scales))
        except ValueError as exc:
            errors.append(str(exc))
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def correcting(self) -> bool:
        return self.mode in ("correction_only", "adele")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.mode in ("consistency_only", "adele") else 0.0

    @property
    def train_scales(self) -> list:
        return list(self.scales) if self.effective_lam > 0 else [1.0]

    @property
    def predict_scales(self) -> list:
        return [1.0] if self.mode == "baseline" else list(self.scales)

    @property
    def epochs(self) -> int:
        return self.optim.epochs


COLUMNS = [
    "epoch", "class", "train_iou", "iou_el", "iou_m", "val_iou", "test_iou",
    "label_quality", "triggered", "trigger_epoch", "corrected_pixels",
    "fit_a", "fit_b", "fit_c", "fit_sse", "slope_change",
    "consistency_loss_mean", "ce_loss_mean",
]


@dataclass
class RunRecord:
    rows: list                 # dicts keyed by COLUMNS
    config: dict
    summary: dict
    params: Optional[ModelParams] = None
    wall_clock: float = 0.0

    def column(self, name: str, cls=AGGREGATE) -> list:
        return [r[name] for r in self.rows if r["class"] == cls]

    def epochs(self) -> list:
        return self.column("epoch")


@dataclass
class RunState:
    cfg: TrainConfig
    params: ModelParams
    velocity: np.ndarray
    train: Dataset
    val: Dataset
    test: Dataset
    store: AnnotationStore
    state: CorrectionState
    series: list
    epoch: int = 0
    fits: dict = field(default_factory=dict)
    slope: dict = field(default_factory=dict)


# ---------------------------------------------------------------- one minibatch

def batch_gradient(params: ModelParams, x: np.ndarray, y: np.ndarray, scales, lam: float,
                   rho: float, gate: str = "pixel", stop_grad_q: bool = False):
    """Composite loss (mean-over-scales cross-entropy + lam * consistency) and its gradient.

    Returns ``(grad, ce, cons, q)`` where ``q`` is the scale-averaged prediction
    made with the parameters before the update.
    """
    views, caches, ptil, ps, sums = [], [], [], [], []
    for s in scales:
        view = ScaledView(x.shape[1:3], s)
        _, p_t, cache = forward(params, view.to_scaled(x), keep=True)
        p, sm = view.to_common(p_t)
        views.append(view)
        caches.append(cache)
        ptil.append(p_t)
        ps.append(p)
        sums.append(sm)
    n_s = len(scales)
    ce = 0.0
    gps = []
    for p in ps:
        loss, g = cross_entropy(p, y)
        ce += loss / n_s
        gps.append(g / n_s)
    cons = None
    if n_s > 1:
        cons, _ = consistency_loss(ps, None, rho, gate)
        if lam > 0:
            for g, gc in zip(gps, consistency_grad_probs(ps, rho, gate, stop_grad_q)):
                g += lam * gc
    grad = np.zeros_like(params.vector)
    for view, cache, p_t, p, sm, g in zip(views, caches, ptil, ps, sums, gps):
        g_t = view.to_common_backward(p, sm, g)
        grad += backward(params, cache, softmax_backward(p_t, g_t))
    q = sum(ps[1:], ps[0].copy()) / n_s
    total = ce + (lam * cons if cons is not None else 0.0)
    return grad, ce, cons, q, total


# ---------------------------------------------------------------- epoch loop

def _predict_single(params: ModelParams, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = [np.argmax(forward(params, images[i:i + batch_size])[1], axis=-1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(images.shape[:3], dtype=np.int64)


def _fit_or_none(series: M.ClassIoUSeries, min_points: int) -> Optional[FitResult]:
    try:
        return fit_curve(series, min_points)
    except NotEnoughDataError:
        return None


def _mean_series(series: list) -> M.ClassIoUSeries:
    out = M.ClassIoUSeries(-1)
    for i, t in enumerate(series[0].epochs):
        vals = [s.values[i] for s in series if s.values[i] is not None]
        out.epochs.append(t)
        out.values.append(float(np.mean(vals)) if vals else None)
    return out


def _fmt(v):
    return None if v is None else float(v)


def evaluate_rows(rs: RunState, epoch: int, train_preds: np.ndarray, ce_mean, cons_mean,
                  corrected: list) -> list:
    k = rs.train.num_classes
    gt, orig = rs.train.clean_masks, rs.store.original
    val_rep = M.report_from_confusion(M.confusion_matrix(
        _predict_single(rs.params, rs.val.images), rs.val.clean_masks, k))
    test_rep = M.report_from_confusion(M.confusion_matrix(
        _predict_single(rs.params, rs.test.images), rs.test.clean_masks, k))
    lq = label_quality(rs.store, gt, k)
    rows = []
    train_vals = []
    for c in range(k):
        tr = rs.series[c].values[-1] if epoch >= 1 else M.iou(train_preds, orig, c)
        el = M.pooled_region_iou(train_preds, gt, gt, orig, c)
        mm = M.pooled_region_iou(train_preds, orig, gt, orig, c)
        fit = rs.fits.get(c)
        rows.append({
            "epoch": epoch, "class": c, "train_iou": _fmt(tr), "iou_el": _fmt(el), "iou_m": _fmt(mm),
            "val_iou": _fmt(val_rep.per_class_iou[c]), "test_iou": _fmt(test_rep.per_class_iou[c]),
            "label_quality": _fmt(lq.per_class_iou[c]),
            "triggered": int(rs.state.triggered[c]), "trigger_epoch": rs.state.trigger_epoch[c],
            "corrected_pixels": corrected[c],
            "fit_a": fit.a if fit else None, "fit_b": fit.b if fit else None,
            "fit_c": fit.c if fit else None, "fit_sse": fit.sse if fit else None,
            "slope_change": rs.slope.get(c), "consistency_loss_mean": None, "ce_loss_mean": None,
        })
        if tr is not None:
            train_vals.append(tr)
    # diagnostics on the aggregate row pool counts over the foreground classes
    fg = range(1, k)
    mean = lambda v: float(np.mean(v)) if v else None  # noqa: E731
    gfit = rs.fits.get(AGGREGATE)
    rows.append({
        "epoch": epoch, "class": AGGREGATE, "train_iou": mean(train_vals),
        "iou_el": _fmt(M.pooled_region_iou(train_preds, gt, gt, orig, fg)),
        "iou_m": _fmt(M.pooled_region_iou(train_preds, orig, gt, orig, fg)),
        "val_iou": val_rep.miou, "test_iou": test_rep.miou, "label_quality": lq.miou,
        "triggered": int(sum(rs.state.triggered)),
        "trigger_epoch": min((e for e in rs.state.trigger_epoch if e is not None), default=None),
        "corrected_pixels": int(sum(corrected)),
        "fit_a": gfit.a if gfit else None, "fit_b": gfit.b if gfit else None,
        "fit_c": gfit.c if gfit else None, "fit_sse": gfit.sse if gfit else None,
        "slope_change": rs.slope.get(AGGREGATE),
        "consistency_loss_mean": cons_mean, "ce_loss_mean": ce_mean,
    })
    return rows


def run_epoch(rs: RunState) -> list:
    """Train one epoch, update triggers and corrections, and return its metric rows."""
    cfg = rs.cfg
    rs.epoch += 1
    epoch = rs.epoch
    k = rs.train.num_classes
    n = len(rs.train)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    bs = cfg.optim.batch_size
    lam = cfg.effective_lam
    corrected = [0] * k
    ce_sum, cons_sum, nb = 0.0, 0.0, 0
    for start in range(0, n, bs):
        idx = np.sort(order[start:start + bs])
        x = rs.train.images[idx]
        y = rs.store.working[idx].astype(np.int64)
        grad, ce, cons, q, _ = batch_gradient(rs.params, x, y, cfg.train_scales, lam, cfg.rho,
                                              cfg.gate, cfg.stop_grad_q)
        if cfg.correcting and cfg.granularity == "iteration" and cfg.train_scales != cfg.scales:
            q = predict_dataset(rs.params, x, cfg.scales)
        rs.params.vector, rs.velocity = sgd_step(rs.params.vector, grad, rs.velocity, cfg.optim)
        ce_sum += ce
        cons_sum += cons or 0.0
        nb += 1
        if cfg.correcting and cfg.granularity == "iteration":
            for c, v in enumerate(correct_labels(rs.store, rs.state, q, cfg.tau, idx)):
                corrected[c] += v

    q_train = predict_dataset(rs.params, rs.train.images, cfg.predict_scales)
    preds = np.argmax(q_train, axis=-1)
    for c in range(k):
        M.append_training_iou(rs.series[c], epoch, preds, rs.store.original)

    if cfg.correcting:
        if cfg.trigger_mode == "per_class":
            fits = {c: _fit_or_none(rs.series[c], cfg.min_points)
                    for c in range(k) if not rs.state.triggered[c]}
            rs.fits.update({c: f for c, f in fits.items() if f is not None})
            for c, d in update_state(rs.state, fits, epoch, cfg.r).items():
                rs.slope[c] = d.relative_slope_change
        elif not rs.state.any_triggered():
            fit = _fit_or_none(_mean_series(rs.series), cfg.min_points)
            if fit is not None:
                rs.fits[AGGREGATE] = fit
                d = update_state_global(rs.state, fit, epoch, cfg.r)
                rs.slope[AGGREGATE] = d.relative_slope_change if d else None
        if cfg.granularity == "epoch":
            for c, v in enumerate(correct_labels(rs.store, rs.state, q_train, cfg.tau)):
                corrected[c] += v

    cons_mean = cons_sum / nb if len(cfg.train_scales) > 1 and nb else None
    return evaluate_rows(rs, epoch, preds, ce_sum / max(nb, 1), cons_mean, corrected)


def init_run(cfg: TrainConfig, data: Dataset) -> RunState:
    train, val, test = (data.subset(s) for s in ("train", "val", "test"))
    if len(train) == 0:
        raise ValueError("dataset has no training examples")
    spec = ModelSpec(in_channels=data.images.shape[-1], num_classes=data.num_classes,
                     hidden=cfg.hidden, seed=cfg.seed)
    params = init_params(spec)
    k = data.num_classes
    return RunState(cfg, params, np.zeros_like(params.vector), train, val, test,
                    AnnotationStore(train.noisy_masks), CorrectionState(k),
                    [M.ClassIoUSeries(c) for c in range(k)])


def _summary(rows: list, state: CorrectionState) -> dict:
    agg = [r for r in rows if r["class"] == AGGREGATE]
    pool = [r for r in agg if r["epoch"] >= 1] or agg
    best = max(pool, key=lambda r: (r["val_iou"], -r["epoch"]))
    return {
        "best_val_epoch": best["epoch"],
        "best_val_test_miou": best["test_iou"],
        "best_val_miou": best["val_iou"],
        "last_epoch_test_miou": pool[-1]["test_iou"],
        "last_epoch_val_miou": pool[-1]["val_iou"],
        "max_test_miou": max(r["test_iou"] for r in pool),
        "final_label_quality": pool[-1]["label_quality"],
        "initial_label_quality": agg[0]["label_quality"],
        "trigger_epochs": list(state.trigger_epoch),
        "epochs": agg[-1]["epoch"],
    }


def config_echo(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def run_experiment(cfg: TrainConfig, data: Dataset, on_epoch=None) -> RunRecord:
    """Full training run; deterministic given ``cfg.seed`` and the dataset."""
    t0 = time.perf_counter()
    rs = init_run(cfg, data)
    q0 = predict_dataset(rs.params, rs.train.images, cfg.predict_scales)
    rows = evaluate_rows(rs, 0, np.argmax(q0, axis=-1), None, None, [0] * data.num_classes)
    if on_epoch:
        on_epoch(rows)
    try:
        for _ in range(cfg.epochs):
            new = run_epoch(rs)
            rows.extend(new)
            if on_epoch:
                on_epoch(new)
            agg = new[-1]
            log.info("epoch %d ce %.4f val %.3f test %.3f lq %.3f triggered %s", agg["epoch"],
                     agg["ce_loss_mean"], agg["val_iou"], agg["test_iou"], agg["label_quality"],
                     rs.state.trigger_epoch)
    except Exception as exc:
        exc.partial_record = RunRecord(rows, config_echo(cfg), {}, rs.params,
                                       time.perf_counter() - t0)
        raise
    return RunRecord(rows, config_echo(cfg), _summary(rows, rs.state), rs.params,
                     time.perf_counter() - t0)


def annotation_quality(data: Dataset) -> float:
    train = data.subset("train")
    return M.miou(train.noisy_masks, train.clean_masks, data.num_classes).miou


@dataclass
class SweepPoint:
    level: int
    annotation_miou: float
    baseline: RunRecord
    adele: RunRecord

    def row(self, metric: str = "last_epoch_test_miou") -> dict:
        return {"level": self.level, "annotation_miou": self.annotation_miou,
                "baseline": self.baseline.summary[metric], "adele": self.adele.summary[metric]}


def noise_sweep(synth: SynthConfig, noise: NoiseConfig, cfg: TrainConfig, levels,
                arms=("baseline", "adele")) -> list:
    """Train the baseline and ADELE arms at each corruption level."""
    levels = list(levels)
    if len(set(levels)) != len(levels):
        raise ValueError("duplicate corruption levels")
    points = []
    for level in levels:
        data = generate_dataset(synth, replace(noise, max_iterations=int(level)))
        runs = {arm: run_experiment(replace(cfg, mode=arm), data) for arm in arms}
        points.append(SweepPoint(int(level), annotation_quality(data), runs[arms[0]], runs[arms[1]]))
        log.info("level %s annotation %.3f %s", level, points[-1].annotation_miou, points[-1].row())
    return points
