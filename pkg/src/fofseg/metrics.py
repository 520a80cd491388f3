"""Background-label precision, recall and F-measure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonBinaryMaskError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class FrameScore:
    precision: float
    recall: float
    f_measure: float
    tp: int
    fp: int
    fn: int


def _check_binary(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D")
    if not np.isin(mask, (0, 1)).all():
        raise NonBinaryMaskError(f"{name} must contain only 0 (background) and 1")
    return mask.astype(np.int8)


def score_frame(pred, gt) -> FrameScore:
    """Score one binarized frame with background (label 0) as the positive class.

    A metric whose denominator is zero counts as 1 when the ground truth
    side is also empty (both masks agree the class is absent), else 0.
    """
    pred = _check_binary(pred, "pred")
    gt = _check_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise DimensionMismatchError("pred/gt dimensions differ")
    tp = int(np.count_nonzero((pred == 0) & (gt == 0)))
    fp = int(np.count_nonzero((pred == 0) & (gt == 1)))
    fn = int(np.count_nonzero((pred == 1) & (gt == 0)))

    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 1.0 if fn == 0 else 0.0
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 1.0 if fp == 0 else 0.0
    f = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return FrameScore(precision=precision, recall=recall, f_measure=f, tp=tp, fp=fp, fn=fn)


def score_video(scores) -> float:
    """Arithmetic mean of per-frame F-measures."""
    scores = list(scores)
    if not scores:
        raise ValueError("no scored frames")
    return float(np.mean([s.f_measure for s in scores]))
