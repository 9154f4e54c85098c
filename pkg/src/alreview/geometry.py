"""Axis-aligned box arithmetic, NMS and prediction-to-label matching.

Everything here is a pure function over immutable inputs, so calls are safe
to fan out across images.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

if TYPE_CHECKING:  # pragma: no cover
    from .datamodel import LabelRecord
    from .detector import Prediction


@dataclass(frozen=True)
class BBox:
    """Rectangle given as (left, top, width, height) in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"BBox.{name} must be finite, got {v!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"BBox needs w > 0 and h > 0, got w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    if iw <= 0:
        return 0.0
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def score_filter(preds: Sequence["Prediction"], s_eps: float) -> list["Prediction"]:
    """Keep predictions with objectness >= s_eps, preserving input order."""
    return [p for p in preds if p.score >= s_eps]


def nms(preds: Sequence["Prediction"], iou_thr: float) -> list["Prediction"]:
    """Greedy per-class non-maximum suppression.

    Predictions are visited in descending score order (ties broken by
    ascending input index).  A prediction is kept iff its IoU with every
    already-kept prediction of the same argmax class is below iou_thr.
    The result is in descending score order.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    kept: list[Prediction] = []
    for i in order:
        p = preds[i]
        suppressed = any(
            k.argmax_class == p.argmax_class and iou(k.box, p.box) >= iou_thr
            for k in kept
        )
        if not suppressed:
            kept.append(p)
    return kept


def match_class_agnostic(
    pred: "Prediction", labels: Sequence["LabelRecord"], iou_thr: float
) -> Optional[int]:
    """Id of the label overlapping pred the most, or None below iou_thr.

    Matching ignores classes on purpose: a dropped annotation has no class to
    compare against, and for a suspect class assignment the class is exactly
    what we do not trust.  Ties on IoU go to the smallest label id.  Callers
    are expected to pass present (non-dropped) labels only.
    """
    best_key: Optional[tuple[float, int]] = None
    for lab in labels:
        v = iou(pred.box, lab.box)
        if v < iou_thr:
            continue
        key = (-v, lab.id)
        if best_key is None or key < best_key:
            best_key = key
    return None if best_key is None else best_key[1]
