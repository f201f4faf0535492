"""Evaluation metrics: IoU family, F-measure and J&F."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

BETA2 = 0.3
_SQUARE = np.ones((3, 3), dtype=bool)


def _pair(pred, target):
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def counts(pred, target) -> tuple[int, int]:
    """(|intersection|, |union|) in pixels."""
    pred, target = _pair(pred, target)
    return int((pred & target).sum()), int((pred | target).sum())


def iou(pred, target) -> float:
    inter, union = counts(pred, target)
    return 1.0 if union == 0 else inter / union


def oiou(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    """Dataset-pooled intersection over dataset-pooled union."""
    inter = union = 0
    for pred, target in pairs:
        i, u = counts(pred, target)
        inter += i
        union += u
    return 1.0 if union == 0 else inter / union


def miou(items: Iterable[tuple[str, np.ndarray, np.ndarray]]) -> float:
    """Mean over classes of each class's pooled IoU; ``items`` are
    (class, pred, target) triples."""
    grouped: dict[str, list] = defaultdict(list)
    for cls, pred, target in items:
        grouped[cls].append((pred, target))
    if not grouped:
        raise ValueError("miou needs at least one sample")
    return float(np.mean([oiou(v) for v in grouped.values()]))


def _f(precision: float, recall: float, beta2: float) -> float:
    denom = beta2 * precision + recall
    return 0.0 if denom == 0 else (1 + beta2) * precision * recall / denom


def f_measure(pred_prob, target, beta2: float = BETA2) -> float:
    """F-measure at the adaptive threshold ``min(2 * mean(prob), 1)``."""
    prob = np.asarray(pred_prob, dtype=np.float64)
    target = np.asarray(target).astype(bool)
    if prob.shape != target.shape:
        raise ValueError(f"shape mismatch: {prob.shape} vs {target.shape}")
    thr = min(2.0 * float(prob.mean()), 1.0)
    pred = prob >= thr
    tp = int((pred & target).sum())
    npred, ntarget = int(pred.sum()), int(target.sum())
    if npred == 0 or ntarget == 0:
        return 0.0
    return _f(tp / npred, tp / ntarget, beta2)


def boundary(mask) -> np.ndarray:
    """One-pixel inner edge: foreground pixels with a background (or
    out-of-image) 8-neighbour."""
    mask = np.asarray(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SQUARE, border_value=0)


def boundary_f(pred, target, tolerance: int = 1) -> float:
    """Contour F1 with matches allowed within ``tolerance`` pixels
    (Chebyshev distance)."""
    pred, target = _pair(pred, target)
    bp, bt = boundary(pred), boundary(target)
    if not bp.any() and not bt.any():
        return 1.0
    if not bp.any() or not bt.any():
        return 0.0
    size = 2 * tolerance + 1
    struct = np.ones((size, size), dtype=bool)
    near_t = ndimage.binary_dilation(bt, structure=struct)
    near_p = ndimage.binary_dilation(bp, structure=struct)
    precision = (bp & near_t).sum() / bp.sum()
    recall = (bt & near_p).sum() / bt.sum()
    return _f(float(precision), float(recall), 1.0)


def j_and_f(pred_frames: Sequence, target_frames: Sequence) -> tuple[float, float, float]:
    if len(pred_frames) != len(target_frames):
        raise ValueError(f"{len(pred_frames)} predicted frames vs {len(target_frames)} targets")
    if not pred_frames:
        raise ValueError("j_and_f needs at least one frame")
    j = float(np.mean([iou(p, t) for p, t in zip(pred_frames, target_frames)]))
    f = float(np.mean([boundary_f(p, t) for p, t in zip(pred_frames, target_frames)]))
    return j, f, (j + f) / 2


@dataclass
class MetricReport:
    task: str
    ious: list[float] = field(default_factory=list)
    aggregates: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "task": self.task,
            "n": len(self.ious),
            "mean_iou": float(np.mean(self.ious)) if self.ious else None,
            **self.aggregates,
        }

    def to_text(self) -> str:
        """Flat ``key=value`` lines, metrics scaled by 100 for display."""
        d = self.as_dict()
        lines = [f"task={d['task']}", f"n={d['n']}"]
        for k, v in d.items():
            if k in ("task", "n") or v is None:
                continue
            lines.append(f"{k}={100 * v:.2f}")
        return "\n".join(lines) + "\n"
