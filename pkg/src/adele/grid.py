"""Dense pixel grids, probability-map algebra and spatial resampling.

Grids are plain numpy arrays of shape ``(H, W, C)``; label masks are integer
arrays of shape ``(H, W)``.  Probability maps are grids whose channel axis
indexes classes and sums to one per pixel.

Resampling uses the align-corners-false convention with edge clamping.  An
output pixel ``d`` along an axis samples the source coordinate

    src = (d + 0.5) / scale - 0.5

clamped to ``[0, n_in - 1]``.  Output sizes are ``floor(scale * n + 0.5)``
floored at 1.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

PROB_ATOL = 1e-5


class ShapeMismatchError(ValueError):
    pass


def as_grid(g) -> np.ndarray:
    g = np.asarray(g)
    if g.ndim == 2:
        g = g[:, :, None]
    if g.ndim != 3 or min(g.shape) < 1:
        raise ValueError(f"grid must have shape (H, W, C) with positive dims, got {g.shape}")
    return g


def check_probmap(p: np.ndarray, atol: float = PROB_ATOL) -> None:
    """Raise ``ValueError`` unless ``p`` satisfies the probability-map invariants."""
    p = as_grid(p)
    if not np.all(np.isfinite(p)):
        raise ValueError("probability map contains non-finite values")
    if p.min() < -atol or p.max() > 1 + atol:
        raise ValueError("probability map values outside [0, 1]")
    dev = np.abs(p.sum(axis=-1) - 1.0).max()
    if dev > atol:
        raise ValueError(f"channel sums deviate from 1 by {dev:.3g}")


def check_labels(mask: np.ndarray, num_classes: int) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"label mask must be 2-D, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise ValueError(f"label ids must lie in [0, {num_classes - 1}]")


def average_probmaps(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise arithmetic mean of equally shaped probability maps."""
    if len(maps) == 0:
        raise ValueError("need at least one probability map")
    ref = np.shape(maps[0])
    total = np.array(maps[0], dtype=np.result_type(maps[0], np.float32), copy=True)
    for i, m in enumerate(maps[1:], start=1):
        if np.shape(m) != ref:
            raise ShapeMismatchError(f"map {i} has shape {np.shape(m)}, expected {ref}")
        total += m
    return total / len(maps)


def argmax_labels(p: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the smaller class id
    return np.argmax(p, axis=-1).astype(np.int64)


def output_size(n: int, scale: float) -> int:
    return max(1, int(math.floor(scale * n + 0.5)))


def interp_matrix(n_in: int, n_out: int, scale: float, mode: str = "bilinear") -> np.ndarray:
    """Dense ``(n_out, n_in)`` 1-D interpolation operator."""
    dst = np.arange(n_out, dtype=np.float64)
    R = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if mode == "bilinear":
        src = np.clip((dst + 0.5) / scale - 0.5, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w = src - i0
        np.add.at(R, (rows, i0), 1.0 - w)
        np.add.at(R, (rows, i1), w)
    elif mode == "nearest":
        idx = np.clip(np.floor((dst + 0.5) / scale).astype(np.int64), 0, n_in - 1)
        R[rows, idx] = 1.0
    else:
        raise ValueError(f"unknown resampling mode {mode!r}")
    return R


def apply_operators(x: np.ndarray, Ry: np.ndarray, Rx: np.ndarray) -> np.ndarray:
    """Apply separable row/column operators to ``(..., H, W, C)`` arrays."""
    Ry = Ry.astype(x.dtype, copy=False)
    Rx = Rx.astype(x.dtype, copy=False)
    *lead, h, w, c = x.shape
    t = Ry @ x.reshape(*lead, h, w * c)
    t = t.reshape(*lead, Ry.shape[0], w, c)
    out = np.swapaxes(np.swapaxes(t, -1, -2) @ Rx.T, -1, -2)
    return np.ascontiguousarray(out)


def resample(g: np.ndarray, scale: float, mode: str = "bilinear") -> np.ndarray:
    """Rescale a grid (or label mask, with ``mode='nearest'``) by ``scale``."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    arr = np.asarray(g)
    if scale == 1.0:
        return arr.copy()
    squeeze = arr.ndim == 2
    grid = as_grid(arr)
    h, w = grid.shape[:2]
    ho, wo = output_size(h, scale), output_size(w, scale)
    if mode == "nearest":
        iy = interp_matrix(h, ho, scale, "nearest").argmax(axis=1)
        ix = interp_matrix(w, wo, scale, "nearest").argmax(axis=1)
        out = grid[iy][:, ix]
    else:
        src = grid.astype(np.result_type(grid, np.float32), copy=False)
        out = apply_operators(src, interp_matrix(h, ho, scale), interp_matrix(w, wo, scale))
    return out[:, :, 0] if squeeze else out


def resize_operators(in_hw: tuple[int, int], out_hw: tuple[int, int]):
    """Bilinear row/column operators mapping ``in_hw`` onto exactly ``out_hw``."""
    (h, w), (ho, wo) = in_hw, out_hw
    return interp_matrix(h, ho, ho / h), interp_matrix(w, wo, wo / w)


def resize(g: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling to an exact target size (per-axis scale = out / in)."""
    grid = as_grid(g)
    if grid.shape[:2] == tuple(out_hw):
        return grid.copy()
    Ry, Rx = resize_operators(grid.shape[:2], out_hw)
    return apply_operators(grid.astype(np.result_type(grid, np.float32), copy=False), Ry, Rx)


def renormalize(p: np.ndarray) -> np.ndarray:
    p = as_grid(p)
    if np.any(p < 0):
        raise ValueError("renormalize needs non-negative values")
    s = p.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        bad = np.argwhere(s[..., 0] <= 0)[0]
        raise ValueError(f"pixel {tuple(bad)} has all-zero channels")
    return p / s
