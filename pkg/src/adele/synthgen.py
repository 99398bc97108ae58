"""Synthetic multi-class segmentation data with morphological annotation noise.

Each example is an image of random geometric shapes, one per present
foreground class, painted with a class-dependent intensity plus Gaussian
feature noise.  Training annotations are corrupted by dilating or eroding
each class mask (over- and under-annotation); validation and test masks stay
clean.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .grid import check_labels

SPLITS = ("train", "val", "test")
SHAPES = ("ellipse", "rectangle", "ring")


class PlacementError(RuntimeError):
    pass


@dataclass
class NoiseConfig:
    max_iterations: int = 3
    p_dilate: float = 0.5
    per_class: bool = True

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not 0.0 <= self.p_dilate <= 1.0:
            raise ValueError("p_dilate must lie in [0, 1]")


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    channels: int = 3
    num_train: int = 120
    num_val: int = 30
    num_test: int = 30
    # per foreground class (index 0 is class 1)
    shapes: list = field(default_factory=lambda: ["ellipse", "rectangle", "ring"])
    size_ranges: list = field(default_factory=lambda: [[10, 16], [6, 10], [5, 8]])
    frequencies: list = field(default_factory=lambda: [0.9, 0.7, 0.4])
    intensities: Optional[list] = None
    feature_sigma: float = 0.5
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        k = self.num_classes
        if k < 2:
            raise ValueError("num_classes must be >= 2")
        for name in ("shapes", "size_ranges", "frequencies"):
            if len(getattr(self, name)) != k - 1:
                raise ValueError(f"{name} needs one entry per foreground class ({k - 1})")
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")
        for lo, hi in self.size_ranges:
            if not 1 <= lo <= hi or 2 * hi + 1 > min(self.height, self.width):
                raise ValueError(f"size range {[lo, hi]} does not fit in the image")
        if any(not 0.0 <= f <= 1.0 for f in self.frequencies):
            raise ValueError("class frequencies must lie in [0, 1]")
        if self.feature_sigma < 0:
            raise ValueError("feature_sigma must be >= 0")
        if self.intensities is not None and np.shape(self.intensities) != (k, self.channels):
            raise ValueError("intensities must have shape (num_classes, channels)")

    @property
    def num_examples(self) -> int:
        return self.num_train + self.num_val + self.num_test

    def class_intensities(self) -> np.ndarray:
        if self.intensities is not None:
            return np.asarray(self.intensities, dtype=np.float64)
        # fixed, well separated class colours; background at the origin
        rng = np.random.default_rng(12345)
        base = np.zeros((self.num_classes, self.channels))
        for c in range(1, self.num_classes):
            v = rng.standard_normal(self.channels)
            base[c] = v / np.linalg.norm(v) * (1.0 + 0.25 * c)
        return base


@dataclass
class Dataset:
    images: np.ndarray        # (N, H, W, C) float32
    clean_masks: np.ndarray   # (N, H, W) uint8
    noisy_masks: np.ndarray   # (N, H, W) uint8
    split: np.ndarray         # (N,) uint8 index into SPLITS
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.clean_masks) == len(self.noisy_masks) == len(self.split) == n):
            raise ValueError("images, masks and split tags must have equal length")
        if n and (self.clean_masks.shape[1:] != self.images.shape[1:3]
                  or self.noisy_masks.shape != self.clean_masks.shape):
            raise ValueError("per-example shapes disagree")

    def subset(self, name: str) -> "Dataset":
        idx = np.flatnonzero(self.split == SPLITS.index(name))
        return Dataset(self.images[idx], self.clean_masks[idx], self.noisy_masks[idx],
                       self.split[idx], self.num_classes, dict(self.meta))

    def __len__(self):
        return len(self.images)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.num_classes == other.num_classes and self.meta == other.meta
                and all(a.dtype == b.dtype and np.array_equal(a, b) for a, b in (
                    (self.images, other.images), (self.clean_masks, other.clean_masks),
                    (self.noisy_masks, other.noisy_masks), (self.split, other.split))))


# ---------------------------------------------------------------- morphology

def _neighbourhood(mask: np.ndarray, reduce) -> np.ndarray:
    h, w = mask.shape
    padded = np.pad(mask, 1)
    views = [padded[i:i + h, j:j + w] for i in range(3) for j in range(3)]
    return reduce.reduce(views)


def dilate(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Binary dilation by the full 3x3 square; the border is zero padded."""
    out = np.asarray(mask, dtype=bool)
    for _ in range(iterations):
        out = _neighbourhood(out, np.logical_or)
    return out.astype(np.uint8)


def erode(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    out = np.asarray(mask, dtype=bool)
    for _ in range(iterations):
        out = _neighbourhood(out, np.logical_and)
    return out.astype(np.uint8)


def _grow_labels(labels: np.ndarray) -> np.ndarray:
    # one step of label dilation into background: take the largest neighbouring id
    h, w = labels.shape
    padded = np.pad(labels, 1)
    neigh = np.max([padded[i:i + h, j:j + w] for i in range(3) for j in range(3)], axis=0)
    return np.where(labels == 0, neigh, labels)


def corrupt_mask(clean: np.ndarray, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Simulate over/under-annotation of a label mask.

    For every foreground class (or the union of them when ``per_class`` is
    off) a type is drawn (dilation with probability ``p_dilate``) and an
    iteration count uniformly from ``0..max_iterations``.  Classes are
    processed in ascending id order, so later dilations overwrite earlier
    ones; eroded pixels become background.
    """
    clean = np.asarray(clean)
    noisy = clean.copy()
    m = cfg.max_iterations
    if not cfg.per_class:
        grow = rng.random() < cfg.p_dilate
        n_it = min(int(rng.random() * (m + 1)), m)
        fg = clean > 0
        if grow:
            for _ in range(n_it):
                noisy = _grow_labels(noisy)
        else:
            noisy[fg & ~erode(fg, n_it).astype(bool)] = 0
        return noisy
    for c in np.unique(clean):
        if c == 0:
            continue
        grow = rng.random() < cfg.p_dilate
        n_it = min(int(rng.random() * (m + 1)), m)
        region = clean == c
        if grow:
            noisy[dilate(region, n_it).astype(bool)] = c
        else:
            removed = region & ~erode(region, n_it).astype(bool)
            noisy[removed & (noisy == c)] = 0
    return noisy


# ---------------------------------------------------------------- shapes

def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float,
                ry: float, rx: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dx + sa * dy) / rx
    v = (-sa * dx + ca * dy) / ry
    if kind == "ellipse":
        return u * u + v * v <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    r2 = u * u + v * v
    return (r2 <= 1.0) & (r2 >= 0.3)


def _place_example(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    mask = np.zeros((h, w), dtype=np.uint8)
    present = [c for c in range(1, cfg.num_classes) if rng.random() < cfg.frequencies[c - 1]]
    for c in present:
        lo, hi = cfg.size_ranges[c - 1]
        for _ in range(cfg.max_retries):
            ry, rx = rng.uniform(lo, hi, size=2)
            angle = rng.uniform(0, np.pi)
            reach = max(ry, rx) + 1
            if 2 * reach > min(h, w) - 1:
                continue
            cy = rng.uniform(reach, h - 1 - reach)
            cx = rng.uniform(reach, w - 1 - reach)
            shape = _shape_mask(cfg.shapes[c - 1], h, w, cy, cx, ry, rx, angle)
            # keep a one-pixel gap between objects
            if shape.any() and not (dilate(shape, 1).astype(bool) & (mask > 0)).any():
                mask[shape] = c
                break
        else:
            raise PlacementError(f"could not place class {c} after {cfg.max_retries} tries")
    return mask


def generate_dataset(cfg: SynthConfig, noise: NoiseConfig) -> Dataset:
    """Deterministically build train/val/test examples from ``cfg.seed``."""
    n = cfg.num_examples
    streams = np.random.SeedSequence(cfg.seed).spawn(n)
    colours = cfg.class_intensities()
    images = np.empty((n, cfg.height, cfg.width, cfg.channels), dtype=np.float32)
    clean = np.empty((n, cfg.height, cfg.width), dtype=np.uint8)
    noisy = np.empty_like(clean)
    split = np.repeat(np.arange(3, dtype=np.uint8), [cfg.num_train, cfg.num_val, cfg.num_test])
    for i, ss in enumerate(streams):
        shape_ss, noise_ss = ss.spawn(2)
        rng = np.random.default_rng(shape_ss)
        mask = _place_example(cfg, rng)
        img = colours[mask] + cfg.feature_sigma * rng.standard_normal(images.shape[1:])
        images[i] = img
        clean[i] = mask
        if split[i] == 0:
            noisy[i] = corrupt_mask(mask, noise, np.random.default_rng(noise_ss))
        else:
            noisy[i] = mask
    check_labels(clean.reshape(-1, cfg.width), cfg.num_classes)
    meta = {
        "class_names": ["background"] + [f"{s}_{c}" for c, s in enumerate(cfg.shapes, start=1)],
        "synth": asdict(cfg),
        "noise": asdict(noise),
        "seed": cfg.seed,
    }
    return Dataset(images, clean, noisy, split, cfg.num_classes, meta)
