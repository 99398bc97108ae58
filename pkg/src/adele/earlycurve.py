"""Detect the onset of memorization from a class's training-IoU curve.

The training IoU of a class is modelled as

    f(t) = a * (1 - exp(-b * t**c)),    0 < a <= 1,  b >= 0,  c >= 0

and memorization is declared to have begun at epoch ``t`` once the slope has
dropped by more than a fraction ``r`` of its value at ``t = 1``::

    |f'(1) - f'(t)| / |f'(1)| > r

The fit is a damped Gauss-Newton (Levenberg-Marquardt) least-squares solve on
unconstrained parameters mapped through scaled logistic functions, restarted
from a fixed grid of initial points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .metrics import ClassIoUSeries

A_FLOOR = 1e-6
B_CAP = 100.0
C_CAP = 10.0
MIN_POINTS = 5
MAX_ITER = 200
GRAD_TOL = 1e-10


class NotEnoughDataError(ValueError):
    pass


@dataclass(frozen=True)
class FitResult:
    a: float
    b: float
    c: float
    sse: float
    converged: bool
    points_used: int

    def __call__(self, t):
        return curve(t, self.a, self.b, self.c)


@dataclass(frozen=True)
class TriggerDecision:
    class_id: Optional[int]
    triggered: bool
    relative_slope_change: float
    epoch_evaluated: float


def curve(t, a, b, c):
    t = np.asarray(t, dtype=np.float64)
    return a * -np.expm1(-b * t ** c)


def curve_derivative(fit: FitResult, t: float) -> float:
    if t < 1:
        raise ValueError("the derivative is only evaluated for t >= 1")
    a, b, c = fit.a, fit.b, fit.c
    if b == 0.0 or c == 0.0:
        return 0.0
    return float(a * b * c * math.exp(-b * t ** c) * t ** (c - 1.0))


def relative_slope_change(fit: FitResult, t: float) -> float:
    d1 = curve_derivative(fit, 1.0)
    if d1 == 0.0:
        return 0.0
    return abs(d1 - curve_derivative(fit, t)) / abs(d1)


def check_trigger(fit: FitResult, t: float, r: float = 0.9,
                  class_id: Optional[int] = None) -> TriggerDecision:
    """A flat-from-the-start curve (``f'(1) == 0``) never triggers."""
    if t < 1:
        raise ValueError("epochs start at 1")
    ratio = relative_slope_change(fit, t)
    return TriggerDecision(class_id, ratio > r, ratio, t)


# ---------------------------------------------------------------- fitting

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logit(p):
    p = min(max(p, 1e-12), 1 - 1e-12)
    return math.log(p / (1.0 - p))


def _to_params(theta):
    sa, sb, sc = _sigmoid(theta)
    a = A_FLOOR + (1.0 - A_FLOOR) * sa
    return (a, B_CAP * sb, C_CAP * sc), ((1.0 - A_FLOOR) * sa * (1 - sa),
                                         B_CAP * sb * (1 - sb), C_CAP * sc * (1 - sc))


def _from_params(a, b, c):
    return np.array([_logit((a - A_FLOOR) / (1.0 - A_FLOOR)), _logit(b / B_CAP), _logit(c / C_CAP)])


def _residual_jacobian(theta, t, y, logt):
    (a, b, c), dp = _to_params(theta)
    tc = t ** c
    e = np.exp(-b * tc)
    r = a * -np.expm1(-b * tc) - y
    J = np.empty((len(t), 3))
    J[:, 0] = -np.expm1(-b * tc) * dp[0]
    J[:, 1] = a * tc * e * dp[1]
    J[:, 2] = a * b * tc * logt * e * dp[2]
    return r, J


def _levenberg_marquardt(theta, t, y, logt):
    r, J = _residual_jacobian(theta, t, y, logt)
    sse = float(r @ r)
    mu = 1e-3
    converged = False
    for _ in range(MAX_ITER):
        g = J.T @ r
        if np.linalg.norm(g) < GRAD_TOL or sse == 0.0:
            converged = True
            break
        A = J.T @ J
        diag = np.maximum(np.diag(A), 1e-12)
        improved = False
        while mu < 1e12:
            try:
                step = np.linalg.solve(A + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            cand = theta + step
            r_new, J_new = _residual_jacobian(cand, t, y, logt)
            sse_new = float(r_new @ r_new)
            if np.isfinite(sse_new) and sse_new <= sse:
                small = np.linalg.norm(step) <= 1e-12 * (np.linalg.norm(theta) + 1e-12)
                stalled = sse - sse_new <= 1e-15 * max(sse, 1e-300)
                theta, r, J, sse = cand, r_new, J_new, sse_new
                mu = max(mu / 3.0, 1e-12)
                improved = True
                if small or (stalled and sse < 1e-20):
                    converged = True
                break
            mu *= 4.0
        if not improved:
            # no descent direction left at any damping: a stationary point
            converged = True
            break
        if converged:
            break
    return theta, sse, converged


def starting_points(y_max: float) -> list:
    a0 = min(max(y_max, 1e-3), 0.999)
    grid = [(a0, b0, c0) for b0 in (0.01, 0.1, 1.0) for c0 in (0.5, 1.0, 2.0)]
    rng = np.random.default_rng(0)
    for _ in range(3):
        a, b, c = grid[4]
        j = np.exp(rng.uniform(-0.5, 0.5, size=3))
        grid.append((min(a * j[0], 0.999), b * j[1], c * j[2]))
    return grid


def fit_curve(series, min_points: int = MIN_POINTS) -> FitResult:
    """Least-squares fit of the saturating exponential to a training-IoU series.

    ``series`` is a :class:`ClassIoUSeries` or a pair ``(t, y)``; undefined
    entries are skipped.  When no start converges the best parameters found
    are still returned with ``converged=False``.
    """
    if isinstance(series, ClassIoUSeries):
        t, y = series.defined()
    else:
        t, y = (np.asarray(v, dtype=np.float64) for v in series)
    if len(t) < min_points:
        raise NotEnoughDataError(f"need at least {min_points} points, got {len(t)}")
    if np.any(t < 1):
        raise ValueError("series epochs must be >= 1")
    logt = np.log(t)

    # b = 0 is a boundary solution the logistic map cannot reach exactly
    best = (float(y @ y), (0.5, 0.0, 1.0), True)
    for a0, b0, c0 in starting_points(float(y.max())):
        theta, sse, ok = _levenberg_marquardt(_from_params(a0, b0, c0), t, y, logt)
        if sse < best[0]:
            params = tuple(float(v) for v in _to_params(theta)[0])
            best = (sse, params, ok)
    sse, (a, b, c), ok = best
    return FitResult(a, b, c, sse, ok, len(t))


def scan_trigger(series, r: float = 0.9, min_points: int = MIN_POINTS):
    """Causally refit at every epoch and return ``(epoch, fit)`` of the first trigger.

    Returns ``(None, last_fit)`` when the criterion is never met.
    """
    if not isinstance(series, ClassIoUSeries):
        t, y = series
        series = ClassIoUSeries(-1, [int(v) for v in t], [float(v) for v in y])
    fit = None
    for epoch in series.epochs:
        prefix = series.up_to(epoch)
        if len(prefix.defined()[0]) < min_points:
            continue
        fit = fit_curve(prefix, min_points)
        if check_trigger(fit, epoch, r).triggered:
            return epoch, fit
    return None, fit
