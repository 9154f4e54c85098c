"""Surrogate detector and external prediction ingestion.

The surrogate stands in for an object detector retrained at the start of
each cycle.  Rather than fitting anything, it draws predictions around the
clean annotations of an image with a quality that scales with the size and
cleanliness of the active training set:

* A single global skill value drives detection-head behavior: box recall,
  localization jitter, objectness calibration and the background
  false-positive rate.  Objectness is class-agnostic on purpose, mirroring
  region-proposal heads.
* Optionally, per-class skill values refine recall, localization and the
  classification confidence placed on the true class.  A class the active
  set has little data for is detected less reliably and classified less
  confidently, which is what gives uncertainty-based querying something to
  find.

Because predictions derive from clean annotations (a trained model
generalizes past sparse label noise), two diagnostic signals emerge
naturally: a confident detection with no matching annotation where a label
was dropped, and a confident disagreement with the recorded class where a
label was flipped.  Label noise still hurts: the skill formula discounts
training data by the error fraction of the active set.

Nothing here is calibrated to any real detector; every functional form is a
modeling choice and every constant is overridable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datamodel import DataError, DatasetStore, ImageRecord
from .geometry import BBox, nms, score_filter


@dataclass
class Prediction:
    """One detection: box, objectness score and a class probability vector."""

    box: BBox
    score: float
    probs: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=float)
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if np.any(self.probs < 0):
            raise ValueError("class probabilities must be nonnegative")
        if abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ValueError(f"class probabilities must sum to 1, got {self.probs.sum()!r}")

    @property
    def argmax_class(self) -> int:
        """1-based most likely class; ties go to the lowest class id."""
        return int(np.argmax(self.probs)) + 1

    def prob_of(self, class_id: int) -> float:
        return float(self.probs[class_id - 1])


@dataclass
class SurrogateParams:
    """Knobs of the surrogate detector.

    n_half           boxes at which skill reaches half saturation
    noise_penalty    skill multiplier is (1 - noise_penalty * error_fraction)
    min_skill        skill floor for an untrained detector
    jitter_frac      box jitter std is (1 - skill) * jitter_frac * min(w, h)
    fp_rate          background false positives per image ~ Poisson(fp_rate * (1 - skill))
    det_base/gain    detection probability per annotation: det_base + det_gain * skill
    obj_base/gain    objectness mean for real detections: obj_base + obj_gain * skill
    objectness_std   objectness spread for real detections
    conf_base/gain   probability mass on the true class: conf_base + conf_gain * skill
    prob_jitter      multiplicative jitter applied to probability vectors
    fp_obj_beta      Beta(a, b) objectness for background false positives
    fp_box_frac      background box side as a fraction of min(image side)
    class_n_half     per-class boxes at half saturation for class-level skill
    """

    n_half: float = 500.0
    noise_penalty: float = 0.5
    min_skill: float = 0.05
    jitter_frac: float = 0.15
    fp_rate: float = 3.0
    det_base: float = 0.5
    det_gain: float = 0.5
    obj_base: float = 0.55
    obj_gain: float = 0.4
    objectness_std: float = 0.1
    conf_base: float = 0.5
    conf_gain: float = 0.45
    prob_jitter: float = 0.05
    fp_obj_beta: tuple[float, float] = (1.0, 2.5)
    fp_box_frac: tuple[float, float] = (0.08, 0.25)
    class_n_half: float = 50.0


@dataclass
class ActiveStats:
    """What the surrogate gets to know about the active training set."""

    n_boxes: float
    error_fraction: float
    class_counts: Optional[np.ndarray] = None


def skill_from_training(stats: ActiveStats, params: SurrogateParams) -> float:
    """Global detector skill in [min_skill, 1) from active-set size and noise.

    skill = clamp((1 - noise_penalty * error_fraction) * n / (n + n_half)).
    Monotone nondecreasing in n, nonincreasing in the error fraction.
    """
    if stats.n_boxes < 0:
        raise ValueError("n_boxes must be nonnegative")
    raw = (1.0 - params.noise_penalty * stats.error_fraction) * (
        stats.n_boxes / (stats.n_boxes + params.n_half)
    )
    return float(min(max(raw, params.min_skill), 1.0 - 1e-6))


def class_skills(stats: ActiveStats, params: SurrogateParams) -> np.ndarray:
    """Per-class skill from per-class active box counts, same functional form.

    Classes the active set holds little data for stay near the floor; the
    global noise penalty applies across the board.
    """
    counts = np.asarray(stats.class_counts, dtype=float)
    raw = (1.0 - params.noise_penalty * stats.error_fraction) * (
        counts / (counts + params.class_n_half)
    )
    return np.clip(raw, params.min_skill, 1.0 - 1e-6)


def predict_surrogate(
    image: ImageRecord,
    skill: float,
    num_classes: int,
    params: SurrogateParams,
    *,
    seed: int,
    cycle: int,
    per_class_skill: Optional[np.ndarray] = None,
) -> list[Prediction]:
    """Draw raw predictions for one image, deterministic in (seed, image id, cycle).

    Each annotation (clean view: true box and class, dropped or not) yields a
    detection with probability det_base + det_gain * skill; the detection's
    box is jittered, its objectness is drawn around obj_base + obj_gain *
    skill, and its probability vector puts conf_base + conf_gain * skill on
    the true class with the rest spread evenly, then multiplicatively
    jittered and renormalized.  On top, Poisson(fp_rate * (1 - skill))
    background false positives appear with low objectness and near-uniform
    class probabilities.  When ``per_class_skill`` is given, recall, jitter
    and confidence use the skill of the annotation's class while objectness
    and the false-positive rate stay global.
    """
    if not (0.0 <= skill < 1.0):
        raise ValueError(f"skill must be in [0, 1), got {skill}")
    rng = np.random.default_rng([seed, image.id, cycle])
    k = num_classes
    labels = image.labels
    n = len(labels)

    preds: list[Prediction] = []
    if n > 0:
        if per_class_skill is None:
            s_box = np.full(n, skill)
        else:
            s_box = np.asarray(
                [per_class_skill[lab.true_class - 1] for lab in labels], dtype=float
            )
        u_det = rng.random(n)
        jitter = rng.normal(size=(n, 4))
        obj = rng.normal(size=n) * params.objectness_std + (
            params.obj_base + params.obj_gain * skill
        )
        pjit = rng.uniform(1.0 - params.prob_jitter, 1.0 + params.prob_jitter, size=(n, k))
        detected = u_det < params.det_base + params.det_gain * s_box
        for i, lab in enumerate(labels):
            if not detected[i]:
                continue
            b = lab.box
            std = (1.0 - s_box[i]) * params.jitter_frac * min(b.w, b.h)
            x = b.x + jitter[i, 0] * std
            y = b.y + jitter[i, 1] * std
            w = max(b.w + jitter[i, 2] * std, 1e-3)
            h = max(b.h + jitter[i, 3] * std, 1e-3)
            mu = params.conf_base + params.conf_gain * s_box[i]
            probs = np.full(k, (1.0 - mu) / (k - 1))
            probs[lab.true_class - 1] = mu
            probs = probs * pjit[i]
            probs /= probs.sum()
            preds.append(
                Prediction(
                    box=BBox(x, y, w, h),
                    score=float(np.clip(obj[i], 0.0, 1.0)),
                    probs=probs,
                )
            )

    n_fp = int(rng.poisson(params.fp_rate * (1.0 - skill)))
    if n_fp > 0:
        lo, hi = params.fp_box_frac
        side = min(image.width, image.height)
        sizes = rng.uniform(lo * side, hi * side, size=(n_fp, 2))
        pos = rng.random(size=(n_fp, 2))
        obj_fp = rng.beta(*params.fp_obj_beta, size=n_fp)
        pjit_fp = rng.uniform(
            1.0 - params.prob_jitter, 1.0 + params.prob_jitter, size=(n_fp, k)
        )
        for j in range(n_fp):
            w, h = sizes[j]
            x = pos[j, 0] * (image.width - w)
            y = pos[j, 1] * (image.height - h)
            probs = pjit_fp[j] / pjit_fp[j].sum()
            preds.append(
                Prediction(
                    box=BBox(x, y, w, h),
                    score=float(np.clip(obj_fp[j], 0.0, 1.0)),
                    probs=probs,
                )
            )
    return preds


def postprocess(
    preds: Sequence[Prediction], score_threshold: float, nms_iou: float
) -> list[Prediction]:
    """Score-threshold then per-class NMS; feeds querying and review alike."""
    return nms(score_filter(preds, score_threshold), nms_iou)


def load_predictions(
    path: str, store: DatasetStore, *, renormalize: bool = False
) -> dict[int, list[Prediction]]:
    """Read a predictions file and validate it against a dataset.

    File schema: {"images": [{"id": 1, "predictions": [{"bbox": [x, y, w, h],
    "score": s, "probs": [p1..pK]}]}]}.  Probability vectors must have
    length K and sum to 1 within 1e-6 unless ``renormalize`` is set, in
    which case any positive vector is rescaled.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(raw, dict) or "images" not in raw:
        raise DataError(f"{path}: top level must be an object with 'images'")
    known = store.image_ids()
    k = store.num_classes
    result: dict[int, list[Prediction]] = {}
    for entry in raw["images"]:
        if not isinstance(entry, dict) or "id" not in entry or "predictions" not in entry:
            raise DataError(f"{path}: each image needs 'id' and 'predictions'")
        img_id = entry["id"]
        if img_id not in known:
            raise DataError(f"{path}: unknown image id {img_id}")
        if img_id in result:
            raise DataError(f"{path}: duplicate image id {img_id}")
        preds = []
        for j, p in enumerate(entry["predictions"]):
            where = f"image {img_id}, prediction {j}"
            if not isinstance(p, dict) or any(key not in p for key in ("bbox", "score", "probs")):
                raise DataError(f"{path}: {where}: needs 'bbox', 'score' and 'probs'")
            probs = np.asarray(p["probs"], dtype=float)
            if probs.shape != (k,):
                raise DataError(
                    f"{path}: {where}: probs has length {probs.size}, expected {k}"
                )
            if np.any(probs < 0):
                raise DataError(f"{path}: {where}: negative probability")
            total = float(probs.sum())
            if abs(total - 1.0) > 1e-6 and not renormalize:
                raise DataError(
                    f"{path}: {where}: probs sum to {total:.6f}, not 1 "
                    "(pass renormalize=True to rescale)"
                )
            if total <= 0:
                raise DataError(f"{path}: {where}: probs sum to zero")
            probs = probs / total
            bbox = p["bbox"]
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise DataError(f"{path}: {where}: bbox must be [x, y, w, h]")
            try:
                box = BBox(*(float(v) for v in bbox))
            except (TypeError, ValueError) as e:
                raise DataError(f"{path}: {where}: {e}") from e
            score = p["score"]
            if not isinstance(score, (int, float)) or not (0.0 <= score <= 1.0):
                raise DataError(f"{path}: {where}: score must be in [0, 1]")
            preds.append(Prediction(box=box, score=float(score), probs=probs))
        result[img_id] = preds
    return result
