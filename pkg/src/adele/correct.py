"""Class-adaptive annotation correction.

Each class carries a trigger flag.  Once the fitted training-IoU curve of a
class shows the slope drop that marks the end of early learning, the class is
triggered for the rest of the run.  From then on, in every example whose
current annotation contains the class, pixels where the averaged prediction
assigns that class probability at least ``tau`` are relabelled with the
predicted (argmax) class.  Corrections accumulate in the working masks, while
the original noisy masks are kept frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .earlycurve import FitResult, TriggerDecision, check_trigger
from .metrics import confusion_matrix, report_from_confusion


@dataclass
class CorrectionState:
    num_classes: int
    triggered: list = field(default=None)
    trigger_epoch: list = field(default=None)
    corrected: list = field(default=None)

    def __post_init__(self):
        k = self.num_classes
        self.triggered = list(self.triggered or [False] * k)
        self.trigger_epoch = list(self.trigger_epoch or [None] * k)
        self.corrected = list(self.corrected or [0] * k)

    def any_triggered(self) -> bool:
        return any(self.triggered)

    def trigger(self, c: int, epoch: int) -> None:
        if not self.triggered[c]:
            self.triggered[c] = True
            self.trigger_epoch[c] = epoch


class AnnotationStore:
    """Frozen original annotations plus the working copy that gets corrected."""

    def __init__(self, noisy_masks: np.ndarray):
        self._original = np.array(noisy_masks, copy=True)
        self._original.flags.writeable = False
        self.working = np.array(noisy_masks, copy=True)

    @property
    def original(self) -> np.ndarray:
        return self._original

    def contains(self, c: int, indices=None) -> np.ndarray:
        masks = self.working if indices is None else self.working[indices]
        return (masks == c).reshape(len(masks), -1).any(axis=1)

    def __len__(self):
        return len(self.working)


def update_state(state: CorrectionState, fits: Mapping[int, FitResult], epoch: int,
                 r: float = 0.9) -> dict:
    """Evaluate the trigger for every untriggered class that has a fit.

    Mutates ``state`` and returns the per-class :class:`TriggerDecision`.
    """
    decisions = {}
    for c, fit in sorted(fits.items()):
        if state.triggered[c] or fit is None:
            continue
        d = check_trigger(fit, epoch, r, class_id=c)
        decisions[c] = d
        if d.triggered:
            state.trigger(c, epoch)
    return decisions


def update_state_global(state: CorrectionState, mean_fit: Optional[FitResult], epoch: int,
                        r: float = 0.9) -> Optional[TriggerDecision]:
    """Non-adaptive variant: one decision, from the class-averaged curve, for all classes."""
    if mean_fit is None or state.any_triggered():
        return None
    d = check_trigger(mean_fit, epoch, r)
    if d.triggered:
        for c in range(state.num_classes):
            state.trigger(c, epoch)
    return d


def correct_labels(store: AnnotationStore, state: CorrectionState, q: np.ndarray,
                   tau: float = 0.8, indices: Optional[Sequence[int]] = None) -> list:
    """Relabel confident pixels of triggered classes; returns changed-pixel counts per class.

    ``q`` holds averaged probabilities for the examples ``indices`` (all
    examples when omitted).
    """
    idx = np.arange(len(store)) if indices is None else np.asarray(indices)
    if q.shape[:3] != (len(idx),) + store.working.shape[1:]:
        raise ValueError(f"predictions of shape {q.shape[:3]} do not match the masks")
    counts = [0] * state.num_classes
    if not state.any_triggered():
        return counts
    hard = np.argmax(q, axis=-1).astype(store.working.dtype)
    for c in range(state.num_classes):
        if not state.triggered[c]:
            continue
        has_c = store.contains(c, idx)
        for j in np.flatnonzero(has_c):
            i = idx[j]
            sel = q[j, :, :, c] >= tau
            if not sel.any():
                continue
            before = store.working[i][sel]
            after = hard[j][sel]
            counts[c] += int(np.count_nonzero(before != after))
            store.working[i][sel] = after
    for c, n in enumerate(counts):
        state.corrected[c] += n
    return counts


def label_quality(store: AnnotationStore, clean_masks: np.ndarray, num_classes: int):
    """Pooled IoU report of the working annotations against the ground truth."""
    cm = confusion_matrix(store.working, clean_masks, num_classes)
    return report_from_confusion(cm)
