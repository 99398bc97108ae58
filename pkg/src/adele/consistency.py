"""Multiscale prediction averaging and the KL consistency regularizer.

Predictions ``p_k`` for rescaled copies of an input are pulled toward their
average ``q``.  The penalty is the mean over scales and confident pixels of
``KL(p_k || q)``, where a pixel counts as confident when ``max_c q_c >= rho``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .grid import output_size, resize_operators, apply_operators

EPS = 1e-8
DEFAULT_SCALES = (0.7, 1.0, 1.5)


@dataclass
class ConsistencyConfig:
    lam: float = 1.0
    rho: float = 0.8
    gate: str = "pixel"          # pixel | image
    stop_grad_q: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.gate not in ("pixel", "image"):
            raise ValueError(f"unknown gate mode {self.gate!r}")


def check_scales(scales: Sequence[float]) -> tuple:
    scales = tuple(float(s) for s in scales)
    if not scales or any(s <= 0 for s in scales):
        raise ValueError("scales must be a non-empty list of positive factors")
    if 1.0 not in scales:
        raise ValueError("the scale set must contain 1.0")
    return scales


# Reductions over the short class axis.  numpy's axis=-1 reductions are slow
# when that axis has only a handful of entries, so sum with a matrix-vector
# product and take the maximum slice by slice.

def channel_sum(x: np.ndarray) -> np.ndarray:
    return (x @ np.ones(x.shape[-1], dtype=x.dtype))[..., None]


def channel_max(x: np.ndarray) -> np.ndarray:
    m = x[..., 0].copy()
    for c in range(1, x.shape[-1]):
        np.maximum(m, x[..., c], out=m)
    return m


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - channel_max(z)[..., None])
    return e / channel_sum(e)


def softmax_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return p * (g - channel_sum(p * g))


class ScaledView:
    """Resampling operators for one scale of a batch of ``(H, W)`` inputs."""

    def __init__(self, hw: tuple[int, int], scale: float):
        self.hw = tuple(hw)
        self.scale = scale
        self.scaled_hw = (output_size(hw[0], scale), output_size(hw[1], scale))
        self.identity = self.scaled_hw == self.hw
        if not self.identity:
            self.down = resize_operators(self.hw, self.scaled_hw)
            self.up = resize_operators(self.scaled_hw, self.hw)

    def to_scaled(self, x):
        return x if self.identity else apply_operators(x, *self.down)

    def to_common(self, p_tilde):
        """Resample scaled probabilities back and renormalize; returns ``(p, sums)``."""
        if self.identity:
            return p_tilde, None
        u = apply_operators(p_tilde, *self.up)
        s = channel_sum(u)
        return u / s, s

    def to_common_backward(self, p, sums, g):
        """Pull a gradient w.r.t. the common-size map back onto the scaled map."""
        if self.identity:
            return g
        g = (g - channel_sum(p * g)) / sums
        Ry, Rx = self.up
        return apply_operators(g, Ry.T, Rx.T)


def multiscale_forward(model: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                       scales: Sequence[float] = DEFAULT_SCALES):
    """Run ``model`` on rescaled copies of ``x`` and average at the input size.

    ``model`` maps ``(N, h, w, C)`` inputs to ``(N, h, w, K)`` probabilities;
    ``x`` may be one ``(H, W, C)`` grid or a batch.  Returns ``(ps, q)``.
    """
    single = x.ndim == 3
    batch = x[None] if single else x
    ps = []
    for s in check_scales(scales):
        view = ScaledView(batch.shape[1:3], s)
        if min(view.scaled_hw) < 1:
            raise ValueError(f"scale {s} shrinks the input below one pixel")
        p, _ = view.to_common(model(view.to_scaled(batch)))
        ps.append(p[0] if single else p)
    q = sum(ps[1:], ps[0].copy()) / len(ps)
    return ps, q


def gate_mask(q: np.ndarray, rho: float, gate: str = "pixel") -> np.ndarray:
    conf = channel_max(q)
    if gate == "pixel":
        return conf >= rho
    # one decision per example from its mean confidence
    lead = conf.shape[:-2]
    per_example = conf.reshape(*lead, -1).mean(axis=-1) >= rho
    return np.broadcast_to(per_example[..., None, None], conf.shape).copy()


def _kl_terms(ps, q):
    lq = np.log(np.maximum(q, EPS))
    return [channel_sum(p * (np.log(np.maximum(p, EPS)) - lq))[..., 0] for p in ps]


def consistency_loss(ps: Sequence[np.ndarray], q: np.ndarray | None = None,
                     rho: float = 0.8, gate: str = "pixel"):
    """Mean ``KL(p_k || q)`` over scales and gated pixels; ``(loss, gate)``."""
    if q is None:
        q = sum(ps[1:], ps[0].copy()) / len(ps)
    for k, p in enumerate(ps):
        if p.shape != q.shape:
            raise ValueError(f"prediction {k} has shape {p.shape}, expected {q.shape}")
    mask = gate_mask(q, rho, gate)
    n = int(mask.sum())
    if n == 0:
        return 0.0, mask
    total = sum(float(kl[mask].sum()) for kl in _kl_terms(ps, q))
    return total / (len(ps) * n), mask


def consistency_grad_probs(ps: Sequence[np.ndarray], rho: float = 0.8, gate: str = "pixel",
                           stop_grad_q: bool = False):
    """Gradient of :func:`consistency_loss` w.r.t. each ``p_k`` (through ``q``)."""
    s = len(ps)
    q = sum(ps[1:], ps[0].copy()) / s
    mask = gate_mask(q, rho, gate)
    n = int(mask.sum())
    if n == 0:
        return [np.zeros_like(p) for p in ps]
    w = mask[..., None] / (s * n)
    lq = np.log(np.maximum(q, EPS))
    # the q-path contributes -sum_k p_k / (s q) = -1 wherever q > EPS
    q_term = 0.0 if stop_grad_q else (q > EPS)
    grads = []
    for p in ps:
        g = np.log(np.maximum(p, EPS)) - lq + (p > EPS) - q_term
        grads.append((g * w).astype(p.dtype, copy=False))
    return grads


def consistency_grad(logits: Sequence[np.ndarray], rho: float = 0.8, gate: str = "pixel",
                     stop_grad_q: bool = False):
    """Gradient w.r.t. the logits of each scale, where ``p_k = softmax(logits_k)``."""
    ps = [softmax(z) for z in logits]
    gp = consistency_grad_probs(ps, rho, gate, stop_grad_q)
    return [softmax_backward(p, g) for p, g in zip(ps, gp)]
