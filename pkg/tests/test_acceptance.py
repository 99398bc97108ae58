"""Acceptance criteria 1-13, each at its stated tolerance.

Criteria 8-12 train many networks.  Their runs are cached under
``results/cache`` keyed by configuration and by a digest of the modules that
produce the numbers, so a stale result is never reused; a cold cache
recomputes everything (about two hours on one core).
"""

import math
import time

import numpy as np
import pytest

from adele import experiments as X
from adele import io, metrics as M
from adele.consistency import consistency_grad, consistency_loss, gate_mask, softmax
from adele.earlycurve import FitResult, check_trigger, curve, curve_derivative, fit_curve
from adele.netcore import ModelSpec, init_params
from adele.synthgen import NoiseConfig, SynthConfig, dilate, erode, generate_dataset
from adele.trainer import batch_gradient

from test_consistency import _fd_check, kl_oracle
from test_earlycurve import central_difference
from test_metrics import brute_counts
from test_netcore import composite_loss_oracle
from test_synthgen import dilate_oracle, erode_oracle


def fr(a, b, c):
    return FitResult(a, b, c, 0.0, True, 0)


# ---------------------------------------------------------------- 1-7: exact suites

def test_c01_curve_fit_recovery(criterion):
    rng = np.random.default_rng(1)
    t = np.arange(1, 51, dtype=float)
    worst_sse = worst_err = 0.0
    start = time.perf_counter()
    for _ in range(20):
        a, b, c = rng.uniform(0.3, 1.0), rng.uniform(0.05, 1.0), rng.uniform(0.5, 2.0)
        fit = fit_curve((t, curve(t, a, b, c)))
        worst_sse = max(worst_sse, fit.sse)
        worst_err = max(worst_err, abs(fit.a - a), abs(fit.b - b), abs(fit.c - c))
    elapsed = time.perf_counter() - start
    ok = worst_sse <= 1e-8 and worst_err <= 1e-3 and elapsed < 5.0
    criterion(1, "curve-fit recovery", ok,
              f"max sse {worst_sse:.2e}, max param error {worst_err:.2e}, {elapsed:.2f}s for 20 fits")
    assert ok


def test_c02_derivative_correctness(criterion):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        a, b, c = rng.uniform(0.05, 1.0), rng.uniform(0.01, 2.0), rng.uniform(0.1, 3.0)
        t = rng.uniform(1.0, 20.0)
        d = curve_derivative(fr(a, b, c), t)
        fd = central_difference(a, b, c, t)
        worst = max(worst, abs(d - fd) / abs(d) if d else abs(fd))
    criterion(2, "derivative vs central differences", worst <= 1e-5, f"max relative error {worst:.2e}")
    assert worst <= 1e-5


def test_c03_trigger_arithmetic(criterion, monkeypatch):
    from adele import earlycurve
    with monkeypatch.context() as mp:
        mp.setattr(earlycurve, "curve_derivative", lambda fit, t: {1.0: 0.1, 7.0: 0.005}[float(t)])
        worked = earlycurve.check_trigger(fr(0.5, 0.5, 0.5), 7, 0.9)
    first_never = all(not check_trigger(fr(0.9, 0.5, 0.8), 1, r).triggered for r in (0.0, 0.5, 0.9))
    fit = fr(0.85, 0.25, 0.9)
    epochs = []
    for r in (0.0, 0.5, 0.7, 0.9, 0.99):
        epochs.append(next(t for t in range(1, 500) if check_trigger(fit, t, r).triggered))
    ok = (worked.triggered and abs(worked.relative_slope_change - 0.95) < 1e-12 and first_never
          and epochs == sorted(epochs))
    criterion(3, "trigger arithmetic", ok,
              f"(0.1, 0.005) ratio {worked.relative_slope_change:.3f}; t=1 never fires {first_never}; "
              f"trigger epochs over r grid {epochs}")
    assert ok


def test_c04_metrics_oracle(criterion):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(200):
        k = int(rng.integers(2, 5))
        h, w = rng.integers(1, 17, 2)
        gt = rng.integers(0, k, (h, w))
        noisy = np.where(rng.random((h, w)) < 0.3, rng.integers(0, k, (h, w)), gt)
        pred = rng.integers(0, k, (h, w))
        region = gt != noisy
        for c in range(k):
            checks = [
                (M.iou_counts(pred, gt, c), brute_counts(pred, gt, c)),
                (M.iou_counts(pred, gt, c, region), brute_counts(pred, gt, c, region)),
                (M.iou_counts(pred, noisy, c, region), brute_counts(pred, noisy, c, region)),
            ]
            mismatches += sum(a != b for a, b in checks)
            i, u = brute_counts(pred, gt, c, region)
            el = M.iou_el(pred, gt, noisy, c)
            mismatches += (el is None) != (u == 0) or (u and el != i / u)
        rep = M.miou(pred, gt, k)
        exact = [brute_counts(pred, gt, c) for c in range(k)]
        mean = np.mean([i / u for i, u in exact if u])
        mismatches += abs(rep.miou - mean) > 1e-12
    criterion(4, "metrics vs brute-force counts", mismatches == 0, f"{mismatches} mismatches over 200 instances")
    assert mismatches == 0


def test_c05_morphology_oracle(criterion):
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(200):
        h, w = rng.integers(1, 17, 2)
        m = (rng.random((h, w)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        extra = (rng.random((h, w)) < 0.2).astype(np.uint8)
        it = int(rng.integers(0, 4))
        d, e = dilate(m, it), erode(m, it)
        bad += not np.array_equal(d, dilate_oracle(m, it))
        bad += not np.array_equal(e, erode_oracle(m, it))
        bad += not (np.all(d >= m) and np.all(e <= m))
        bad += not (np.all(d <= dilate(m | extra, it)) and np.all(e <= erode(m | extra, it)))
    criterion(5, "morphology vs set oracles", bad == 0, f"{bad} failures over 200 masks")
    assert bad == 0


def test_c06_consistency_loss(criterion):
    ps = [np.array([[[1.0, 0.0]]]), np.array([[[0.0, 1.0]]]), np.array([[[0.5, 0.5]]])]
    hand = abs(consistency_loss(ps, None, 0.5)[0] - 2 * math.log(2) / 3)
    rng = np.random.default_rng(6)
    negatives = oracle_miss = 0
    for _ in range(500):
        s = int(rng.integers(2, 4))
        pr = [softmax(rng.standard_normal((3, 3, 3)) * 3) for _ in range(s)]
        rho = float(rng.uniform(0, 1))
        loss = consistency_loss(pr, None, rho)[0]
        negatives += loss < 0
        oracle_miss += abs(loss - kl_oracle(pr, sum(pr) / s, rho)) > 1e-9 * max(1.0, loss)
    # zero iff agreement on gated pixels
    agree_ok = True
    for _ in range(50):
        p = softmax(rng.standard_normal((2, 2, 3)) * 3)
        other = p.copy()
        other[1, 1] = p[1, 1][::-1]
        agree_ok &= consistency_loss([p, p.copy()], None, 0.0)[0] == pytest.approx(0.0, abs=1e-15)
        q = (p + other) / 2
        differs = not np.allclose(p[1, 1], other[1, 1])
        agree_ok &= (consistency_loss([p, other], None, 0.0)[0] > 0) == differs
        rho = float(q[1, 1].max()) + 1e-9
        if not gate_mask(q, rho)[1, 1]:
            agree_ok &= consistency_loss([p, other], None, rho)[0] == pytest.approx(0.0, abs=1e-12)
    # gradients, half the instances with rho placed between pixel confidences
    grad_fail = 0
    for i in range(50):
        s = int(rng.integers(2, 4))
        shape = tuple(int(v) for v in rng.integers(1, 5, 2)) + (int(rng.integers(2, 5)),)
        zs = [rng.standard_normal(shape) * 2 for _ in range(s)]
        q = sum(softmax(z) for z in zs) / s
        conf = np.sort(q.max(-1).ravel())
        rho = 0.0
        if i % 2 and len(conf) > 1 and np.diff(conf).max() > 1e-3:
            j = int(np.argmax(np.diff(conf)))
            rho = float(conf[j] + conf[j + 1]) / 2
        try:
            _fd_check(zs, rho, "pixel" if i % 4 < 2 else "image")
        except AssertionError:
            grad_fail += 1
    ok = hand <= 1e-9 and negatives == 0 and oracle_miss == 0 and agree_ok and grad_fail == 0
    criterion(6, "consistency loss", ok,
              f"hand instance error {hand:.1e}; negative losses {negatives}/500; oracle misses {oracle_miss}; "
              f"zero-iff-agreement {bool(agree_ok)}; gradient failures {grad_fail}/50")
    assert ok


def test_c07_model_gradient(criterion):
    rng = np.random.default_rng(7)
    params = init_params(ModelSpec(in_channels=3, num_classes=3, hidden=[[5, 6], [3, 6]], seed=7,
                                   dtype="float64"))
    x = rng.standard_normal((2, 8, 8, 3))
    y = rng.integers(0, 3, (2, 8, 8))
    scales, lam, rho = [0.7, 1.0, 1.5], 1.0, 0.0
    grad, *_ = batch_gradient(params, x, y, scales, lam, rho)
    mask = np.ones(y.shape, bool)
    worst = 0.0
    h = 1e-6
    for i in rng.choice(params.size, 100, replace=False):
        v0 = params.vector[i]
        params.vector[i] = v0 + h
        lp = composite_loss_oracle(params, x, y, scales, lam, rho, mask)
        params.vector[i] = v0 - h
        lm = composite_loss_oracle(params, x, y, scales, lam, rho, mask)
        params.vector[i] = v0
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(grad[i] - fd) / max(abs(fd), abs(grad[i]), 1e-6))
    criterion(7, "model gradient vs finite differences", worst <= 1e-4,
              f"max relative error {worst:.2e} over 100 coordinates")
    assert worst <= 1e-4


# ---------------------------------------------------------------- 8-12: seeded runs

@pytest.fixture(scope="module")
def reference():
    return X.load_reference("reference")


@pytest.fixture(scope="module")
def baseline_runs(reference):
    return X.arm_runs(reference, "baseline")


@pytest.fixture(scope="module")
def adele_runs(reference):
    return X.arm_runs(reference, "adele")


def test_c08_early_learning_signature(criterion, baseline_runs):
    checks = [X.early_learning_signature(r) for r in baseline_runs]
    times = [r.wall_clock for r in baseline_runs]
    ok = all(c.passed for c in checks) and max(times) <= 120.0
    detail = "; ".join(f"seed {s}: {'ok' if c.passed else 'no'} ({c.detail})" for s, c in zip(X.SEEDS, checks))
    criterion(8, "early-learning signature", ok, f"{detail}; slowest run {max(times):.0f}s")
    assert ok


def test_c09_adele_improvement(criterion, baseline_runs, adele_runs):
    check = X.improvement(baseline_runs, adele_runs, margin=0.05)
    criterion(9, "ADELE improvement", check.passed, check.detail)
    assert check.passed


def test_c10_ablation_ordering(criterion, reference, baseline_runs, adele_runs):
    corr = X.arm_runs(reference, "correction_only")
    cons = X.arm_runs(reference, "consistency_only")
    check = X.ablation_ordering(baseline_runs, corr, cons, adele_runs)
    criterion(10, "ablation ordering", check.passed, check.detail)
    assert check.passed


def test_c11_class_adaptive_vs_global(criterion):
    variant = X.load_reference("imbalanced")
    per_class = X.arm_runs(variant, "adele", trigger_mode="per_class")
    global_ = X.arm_runs(variant, "adele", trigger_mode="global")
    check = X.adaptive_vs_global(per_class, global_)
    criterion(11, "class-adaptive vs global trigger", check.passed, check.detail)
    assert check.passed


def test_c12_noise_sweep(criterion):
    points, wall = X.sweep_runs(X.load_reference("sweep"))
    check = X.sweep_shape(points, budget_s=1800.0, wall=wall)
    criterion(12, "noise sweep shape", check.passed, check.detail)
    assert check.passed


# ---------------------------------------------------------------- 13: determinism and formats

def test_c13_determinism_and_formats(criterion, tmp_path):
    from adele.cli import main
    tiny = SynthConfig(height=32, width=32, num_train=6, num_val=2, num_test=2,
                       size_ranges=[[5, 8], [3, 5], [3, 4]], seed=3)
    noise = NoiseConfig(2, 0.8)
    cfg_path = tmp_path / "tiny.json"
    io.write_json({"synth": vars(tiny), "noise": vars(noise),
                   "train": {"hidden": [[3, 4]], "min_points": 3, "optim": {"epochs": 3}}}, cfg_path)
    results = {}
    for name in ("a", "b"):
        main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / f"{name}.segd")])
        main(["train", "--config", str(cfg_path), "--data", str(tmp_path / f"{name}.segd"),
              "--out", str(tmp_path / name), "--mode", "adele"])
    results["csv identical"] = (tmp_path / "a" / "metrics.csv").read_bytes() == \
        (tmp_path / "b" / "metrics.csv").read_bytes()
    results["dataset identical"] = (tmp_path / "a.segd").read_bytes() == (tmp_path / "b.segd").read_bytes()
    data = generate_dataset(tiny, noise)
    blob = io.dataset_bytes(data)
    results["round trip"] = io.parse_dataset(blob) == data and io.dataset_bytes(io.parse_dataset(blob)) == blob
    corrupt = {
        "magic": (b"XXXX" + blob[4:], io.BadMagicError),
        "version": (blob[:4] + (7).to_bytes(2, "little") + blob[6:], io.VersionMismatchError),
        "truncated": (blob[:len(blob) // 2], io.TruncatedFileError),
        "trailing": (blob + b"!", io.CountMismatchError),
    }
    for name, (buf, err) in corrupt.items():
        try:
            io.parse_dataset(buf)
            results[f"rejects {name}"] = False
        except err:
            results[f"rejects {name}"] = True
        except Exception:
            results[f"rejects {name}"] = False
    ok = all(results.values())
    criterion(13, "determinism and formats", ok, ", ".join(f"{k} {v}" for k, v in results.items()))
    assert ok
