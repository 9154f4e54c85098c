"""Detection quality (VOC-style mAP), review precision and metrics output."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .datamodel import ImageRecord
from .detector import Prediction
from .geometry import iou
from .review import ProposalKind, ReviewOutcome

METRICS_COLUMNS = (
    "cycle",
    "budget_total",
    "boxes_labeled",
    "reviews_miss",
    "reviews_flip",
    "map",
    "precision_miss",
    "precision_flip",
    "active_images",
    "active_boxes",
    "active_error_fraction",
)


@dataclass
class APResult:
    per_class: dict[int, float]
    mean: float
    curves: dict[int, tuple[np.ndarray, np.ndarray]]


@dataclass
class CycleMetrics:
    cycle: int
    budget_total: int
    boxes_labeled: int
    reviews_miss: int
    reviews_flip: int
    mean_ap: float
    precision_miss: Optional[float]
    precision_flip: Optional[float]
    active_images: int
    active_boxes: int
    active_error_fraction: float
    # diagnostics, not part of the CSV schema
    skill: float = 0.0
    base_rate_miss: Optional[float] = None
    base_rate_flip: Optional[float] = None


def average_precision(
    preds_by_image: Mapping[int, Sequence[Prediction]],
    truth_images: Sequence[ImageRecord],
    iou_thr: float,
    class_id: int,
) -> Optional[tuple[float, np.ndarray, np.ndarray]]:
    """All-point interpolated AP for one class, or None without ground truth.

    Predictions of the class (by argmax) are pooled over images and walked in
    descending score order (ties by image id, then prediction index).  Each
    is a true positive iff its best-IoU unmatched ground-truth box of the
    class in its image reaches ``iou_thr``, consuming that box; otherwise a
    false positive.
    """
    gt_boxes: dict[int, list] = {}
    npos = 0
    for img in truth_images:
        boxes = [lab.box for lab in img.labels if lab.true_class == class_id]
        if boxes:
            gt_boxes[img.id] = boxes
            npos += len(boxes)
    if npos == 0:
        return None

    pool = []
    for image_id in sorted(preds_by_image):
        for idx, pred in enumerate(preds_by_image[image_id]):
            if pred.argmax_class == class_id:
                pool.append((-pred.score, image_id, idx, pred))
    pool.sort(key=lambda t: t[:3])

    matched: dict[int, list[bool]] = {i: [False] * len(b) for i, b in gt_boxes.items()}
    tp = np.zeros(len(pool))
    for rank, (_, image_id, _, pred) in enumerate(pool):
        best_iou, best_j = 0.0, -1
        for j, box in enumerate(gt_boxes.get(image_id, ())):
            if matched.get(image_id, [True])[j]:
                continue
            v = iou(pred.box, box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thr:
            matched[image_id][best_j] = True
            tp[rank] = 1.0

    if len(pool) == 0:
        return 0.0, np.array([0.0]), np.array([0.0])
    cum_tp = np.cumsum(tp)
    recall = cum_tp / npos
    precision = cum_tp / np.arange(1, len(pool) + 1)
    return _all_point_ap(recall, precision), recall, precision


def _all_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    ap = 0.0
    for i in range(1, mrec.size):
        if mrec[i] != mrec[i - 1]:
            ap += (mrec[i] - mrec[i - 1]) * mpre[i]
    return float(ap)


def mean_average_precision(
    preds_by_image: Mapping[int, Sequence[Prediction]],
    truth_images: Sequence[ImageRecord],
    num_classes: int,
    iou_thr: float = 0.5,
) -> APResult:
    """Mean AP over the classes that have at least one ground-truth box."""
    per_class: dict[int, float] = {}
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for c in range(1, num_classes + 1):
        res = average_precision(preds_by_image, truth_images, iou_thr, c)
        if res is None:
            continue
        ap, recall, precision = res
        per_class[c] = ap
        curves[c] = (recall, precision)
    if not per_class:
        raise ValueError("no class has ground-truth boxes; mAP undefined")
    return APResult(
        per_class=per_class,
        mean=float(np.mean(list(per_class.values()))),
        curves=curves,
    )


def review_precision(
    outcomes: Sequence[ReviewOutcome], kind: ProposalKind
) -> Optional[float]:
    """Fraction of consumed proposals of a kind that were real errors.

    Returns None (undefined, not zero) when nothing of that kind was
    reviewed.
    """
    of_kind = [o for o in outcomes if o.proposal.kind == kind]
    if not of_kind:
        return None
    return sum(1 for o in of_kind if o.was_true_error) / len(of_kind)


# ---------------------------------------------------------------------------
# Metrics emission
# ---------------------------------------------------------------------------

def _fmt(value, decimals: int = 6) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return f"{value:.{decimals}f}"
    return str(value)


def metrics_row(m: CycleMetrics) -> list[str]:
    return [
        str(m.cycle),
        str(m.budget_total),
        str(m.boxes_labeled),
        str(m.reviews_miss),
        str(m.reviews_flip),
        _fmt(m.mean_ap),
        _fmt(m.precision_miss),
        _fmt(m.precision_flip),
        str(m.active_images),
        str(m.active_boxes),
        _fmt(m.active_error_fraction),
    ]


def metrics_csv_text(history: Sequence[CycleMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for m in history:
        writer.writerow(metrics_row(m))
    return buf.getvalue()


def write_metrics_csv(history: Sequence[CycleMetrics], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(metrics_csv_text(history))


_AGG_FIELDS = (
    "budget_total",
    "boxes_labeled",
    "reviews_miss",
    "reviews_flip",
    "mean_ap",
    "precision_miss",
    "precision_flip",
    "active_images",
    "active_boxes",
    "active_error_fraction",
)

_CSV_NAME = {"mean_ap": "map"}


def aggregate_csv_text(histories: Sequence[Sequence[CycleMetrics]]) -> str:
    """Per-cycle mean and sample standard deviation across seeds.

    Undefined values (for example a cycle with no reviews of a kind) are
    skipped in the statistics; a single seed yields std 0.
    """
    if not histories:
        raise ValueError("no histories to aggregate")
    n_cycles = {len(h) for h in histories}
    if len(n_cycles) != 1:
        raise ValueError("seed histories differ in cycle count")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["cycle", "seeds"]
    for name in _AGG_FIELDS:
        col = _CSV_NAME.get(name, name)
        header += [f"{col}_mean", f"{col}_std"]
    writer.writerow(header)
    for i in range(n_cycles.pop()):
        row = [str(histories[0][i].cycle), str(len(histories))]
        for name in _AGG_FIELDS:
            values = [getattr(h[i], name) for h in histories]
            values = [v for v in values if v is not None]
            if not values:
                row += ["", ""]
                continue
            mean = float(np.mean(values))
            std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            row += [_fmt(mean), _fmt(std)]
        writer.writerow(row)
    return buf.getvalue()


def write_aggregate_csv(histories: Sequence[Sequence[CycleMetrics]], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(aggregate_csv_text(histories))


def plot_curves(csv_path: str, out_path: str, title: str = "") -> None:
    """Render detection quality against cumulative budget as a vector graphic.

    Accepts either a per-run metrics file (map column) or an aggregate file
    (map_mean and map_std columns, drawn with a band).  Output is
    deterministic for identical input.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{csv_path}: no data rows")

    def col(name):
        return np.array([float(r[name]) for r in rows if r.get(name)])

    plt.rcParams["svg.hashsalt"] = "alreview"
    fig, ax = plt.subplots(figsize=(6, 4))
    if "map_mean" in rows[0]:
        budget = col("budget_total_mean")
        mean = col("map_mean")
        std = col("map_std")
        ax.plot(budget, mean, marker="o", markersize=3)
        ax.fill_between(budget, mean - std, mean + std, alpha=0.25)
    else:
        ax.plot(col("budget_total"), col("map"), marker="o", markersize=3)
    ax.set_xlabel("cumulative annotation budget (boxes)")
    ax.set_ylabel("mAP")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, metadata=_stable_metadata(out_path))
    plt.close(fig)


def _stable_metadata(out_path: str) -> dict:
    if out_path.endswith(".svg"):
        return {"Date": None}
    if out_path.endswith(".pdf"):
        return {"CreationDate": None}
    return {}
