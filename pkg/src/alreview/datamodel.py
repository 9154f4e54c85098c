"""Dataset storage with hidden ground truth, noise injection and file IO.

A dataset is a set of images, each carrying annotation records.  Every
record keeps the true class next to the class an annotator would actually
report (``observed_class``) plus a ``present`` flag: a dropped annotation
stays in the store with ``present=False`` so that review adjudication and
evaluation can still see it, while the labeling interface
(:func:`reveal_labels`) exposes only what a real annotation round would
return.  Consumers on the observable side of that barrier must never read
``true_class`` or ``provenance``.

Dataset files persist the clean annotations; the deviations introduced by
noise (drops and wrong classes) live in a separate sidecar file so the
clean dataset remains canonical.  Review history (restored / corrupted
provenance) is run state, not dataset state, and is persisted through run
checkpoints instead.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import BBox, iou


class DataError(Exception):
    """Malformed or inconsistent dataset / predictions input."""


class GenerationError(Exception):
    """Synthetic dataset generation could not satisfy its constraints."""


class Provenance(str, Enum):
    CLEAN = "clean"
    FLIPPED = "flipped"
    MISSED = "missed"
    RESTORED = "restored"
    REVIEW_CORRUPTED = "review_corrupted"


class PoolState(str, Enum):
    UNLABELED = "unlabeled"
    ACTIVE = "active"


@dataclass
class ClassCatalog:
    names: list[str]

    def __post_init__(self) -> None:
        if len(self.names) < 2:
            raise ValueError("need at least 2 classes")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")

    @property
    def num_classes(self) -> int:
        return len(self.names)


@dataclass
class LabelRecord:
    """One annotation; class ids are 1-based in {1..K}."""

    id: int
    box: BBox
    true_class: int
    observed_class: int
    present: bool = True
    provenance: Provenance = Provenance.CLEAN

    def validate(self, num_classes: int) -> None:
        if not (1 <= self.true_class <= num_classes):
            raise DataError(f"label {self.id}: class {self.true_class} out of range 1..{num_classes}")
        if not (1 <= self.observed_class <= num_classes):
            raise DataError(f"label {self.id}: observed class {self.observed_class} out of range")
        if self.provenance == Provenance.CLEAN and (
            self.observed_class != self.true_class or not self.present
        ):
            raise DataError(f"label {self.id}: clean label must be present with its true class")
        if self.provenance == Provenance.MISSED and self.present:
            raise DataError(f"label {self.id}: missed label cannot be present")
        if self.provenance == Provenance.FLIPPED and self.observed_class == self.true_class:
            raise DataError(f"label {self.id}: flipped label must carry a wrong class")

    @property
    def is_class_error(self) -> bool:
        return self.present and self.observed_class != self.true_class


@dataclass
class ImageRecord:
    id: int
    width: int
    height: int
    labels: list[LabelRecord] = field(default_factory=list)
    pool_state: PoolState = PoolState.UNLABELED

    def present_labels(self) -> list[LabelRecord]:
        return [lab for lab in self.labels if lab.present]


@dataclass
class DatasetStore:
    catalog: ClassCatalog
    train: list[ImageRecord] = field(default_factory=list)
    test: list[ImageRecord] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.catalog.num_classes

    def train_label_count(self) -> int:
        return sum(len(img.labels) for img in self.train)

    def find_image(self, image_id: int) -> ImageRecord:
        for img in self.train:
            if img.id == image_id:
                return img
        for img in self.test:
            if img.id == image_id:
                return img
        raise KeyError(f"unknown image id {image_id}")

    def image_ids(self) -> set[int]:
        return {img.id for img in self.train} | {img.id for img in self.test}

    def active_train_images(self) -> list[ImageRecord]:
        return [img for img in self.train if img.pool_state == PoolState.ACTIVE]

    def unlabeled_train_ids(self) -> list[int]:
        return sorted(img.id for img in self.train if img.pool_state == PoolState.UNLABELED)


def _floor_exact(x: float) -> int:
    # Guard against decimal fractions landing a hair below an integer
    # (0.3 * 30 == 8.999999999999998) before flooring.
    return int(math.floor(x + 1e-9))


def inject_label_noise(
    store: DatasetStore, label_noise: float, rng: np.random.Generator
) -> DatasetStore:
    """Drop and flip training annotations in place.

    Exactly ``m = floor(label_noise/2 * G)`` uniformly chosen labels become
    drops (present=False) and, from the remaining ``G - m``, exactly ``m``
    uniformly chosen labels get their observed class flipped to one of the
    ``K - 1`` wrong classes, drawn uniformly.  The two sets are disjoint: no
    label suffers more than one error type.  The test split is never touched.
    """
    if not (0.0 <= label_noise <= 1.0):
        raise ValueError(f"label_noise must be in [0, 1], got {label_noise}")
    all_labels = [lab for img in store.train for lab in img.labels]
    if any(lab.provenance != Provenance.CLEAN for lab in all_labels):
        raise ValueError("noise already injected: train labels are not all clean")
    g = len(all_labels)
    m = _floor_exact(label_noise / 2.0 * g)
    if 2 * m > g:
        raise ValueError(f"cannot inject {m} drops and {m} flips into {g} labels")
    if m == 0:
        return store
    perm = rng.permutation(g)
    k = store.num_classes
    for idx in perm[:m]:
        lab = all_labels[idx]
        lab.present = False
        lab.provenance = Provenance.MISSED
    for idx in perm[m : 2 * m]:
        lab = all_labels[idx]
        wrong = [c for c in range(1, k + 1) if c != lab.true_class]
        lab.observed_class = wrong[int(rng.integers(0, k - 1))]
        lab.provenance = Provenance.FLIPPED
    return store


def reveal_labels(store: DatasetStore, image_id: int) -> list[tuple[BBox, int]]:
    """Answer a labeling query for one pool image.

    Marks the image active and returns (box, observed_class) pairs for the
    present annotations only.  Hidden truth never crosses this call; dropped
    annotations are simply absent from the answer.  Labeling cost is one per
    returned pair and is accounted by the caller.
    """
    img = next((im for im in store.train if im.id == image_id), None)
    if img is None:
        raise KeyError(f"image {image_id} is not in the train split")
    if img.pool_state == PoolState.ACTIVE:
        raise ValueError(f"image {image_id} is already labeled")
    img.pool_state = PoolState.ACTIVE
    return [(lab.box, lab.observed_class) for lab in img.labels if lab.present]


@dataclass
class DatasetSpec:
    """Parameters for synthetic dataset generation."""

    n_train: int
    n_test: int
    num_classes: int
    boxes_per_image: tuple[int, int] = (2, 6)
    image_size: tuple[int, int] = (256, 256)
    box_size: tuple[int, int] = (16, 64)
    class_weights: Optional[Sequence[float]] = None
    max_overlap: float = 0.3
    max_attempts: int = 200

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        lo, hi = self.boxes_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"bad boxes_per_image range {self.boxes_per_image}")
        blo, bhi = self.box_size
        if blo <= 0 or bhi < blo:
            raise ValueError(f"bad box_size range {self.box_size}")
        w, h = self.image_size
        if bhi > w or bhi > h:
            raise ValueError("box_size exceeds image_size")
        if self.class_weights is not None and len(self.class_weights) != self.num_classes:
            raise ValueError("class_weights length must equal num_classes")


def generate_dataset(spec: DatasetSpec, rng: np.random.Generator) -> DatasetStore:
    """Generate a synthetic detection dataset, deterministic given the rng seed.

    Boxes are placed uniformly at random and kept only if their IoU with every
    box already on the image stays at or below ``spec.max_overlap``, so the
    low-overlap matching regime holds by construction.  Classes default to
    uniform; an optional weight vector skews the class mix.
    """
    catalog = ClassCatalog([f"class_{c}" for c in range(1, spec.num_classes + 1)])
    weights = None
    if spec.class_weights is not None:
        w = np.asarray(spec.class_weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("class_weights must be nonnegative with positive sum")
        weights = w / w.sum()

    width, height = spec.image_size
    blo, bhi = spec.box_size
    nlo, nhi = spec.boxes_per_image
    label_id = 1

    def make_image(image_id: int, image_index: int) -> ImageRecord:
        nonlocal label_id
        n_boxes = int(rng.integers(nlo, nhi + 1))
        boxes: list[BBox] = []
        for _ in range(n_boxes):
            placed = False
            for _ in range(spec.max_attempts):
                bw = int(rng.integers(blo, bhi + 1))
                bh = int(rng.integers(blo, bhi + 1))
                bx = int(rng.integers(0, width - bw + 1))
                by = int(rng.integers(0, height - bh + 1))
                cand = BBox(float(bx), float(by), float(bw), float(bh))
                if all(iou(cand, other) <= spec.max_overlap for other in boxes):
                    boxes.append(cand)
                    placed = True
                    break
            if not placed:
                raise GenerationError(
                    f"could not place {n_boxes} boxes on image index {image_index} "
                    f"within {spec.max_attempts} attempts"
                )
        labels = []
        for box in boxes:
            cls = int(rng.choice(spec.num_classes, p=weights)) + 1
            labels.append(LabelRecord(id=label_id, box=box, true_class=cls, observed_class=cls))
            label_id += 1
        return ImageRecord(id=image_id, width=width, height=height, labels=labels)

    train = [make_image(i + 1, i) for i in range(spec.n_train)]
    test = [make_image(spec.n_train + i + 1, spec.n_train + i) for i in range(spec.n_test)]
    return DatasetStore(catalog=catalog, train=train, test=test)


# ---------------------------------------------------------------------------
# File IO
#
# Dataset file:
#   {"classes": ["a", ...],
#    "images": [{"id": 1, "width": W, "height": H, "split": "train"|"test",
#                "labels": [{"id": 7, "bbox": [x, y, w, h], "class": 3}]}]}
# Noise sidecar:
#   {"missed": [ids...], "flips": [{"id": 7, "observed": 5}]}
# ---------------------------------------------------------------------------

def store_to_dict(store: DatasetStore) -> dict:
    images = []
    for split, records in (("train", store.train), ("test", store.test)):
        for img in records:
            images.append(
                {
                    "id": img.id,
                    "width": img.width,
                    "height": img.height,
                    "split": split,
                    "labels": [
                        {"id": lab.id, "bbox": lab.box.as_list(), "class": lab.true_class}
                        for lab in img.labels
                    ],
                }
            )
    return {"classes": list(store.catalog.names), "images": images}


def noise_to_dict(store: DatasetStore) -> dict:
    missed = sorted(
        lab.id for img in store.train for lab in img.labels if not lab.present
    )
    flips = [
        {"id": lab.id, "observed": lab.observed_class}
        for img in store.train
        for lab in sorted(img.labels, key=lambda l: l.id)
        if lab.present and lab.observed_class != lab.true_class
    ]
    flips.sort(key=lambda d: d["id"])
    return {"missed": missed, "flips": flips}


def save_dataset(store: DatasetStore, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(store_to_dict(store), f, separators=(",", ":"))
        f.write("\n")


def save_noise(store: DatasetStore, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(noise_to_dict(store), f, separators=(",", ":"))
        f.write("\n")


def _read_json(path: str) -> object:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise DataError(f"{path}: {msg}")


def load_dataset(path: str, noise_path: Optional[str] = None) -> DatasetStore:
    """Load a dataset file, optionally applying a noise sidecar.

    Validation failures raise :class:`DataError` naming the offending
    element (image or label id).
    """
    raw = _read_json(path)
    _require(isinstance(raw, dict), path, "top level must be an object")
    _require("classes" in raw and "images" in raw, path, "missing 'classes' or 'images'")
    names = raw["classes"]
    _require(isinstance(names, list) and all(isinstance(n, str) for n in names),
             path, "'classes' must be a list of strings")
    try:
        catalog = ClassCatalog(list(names))
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e
    k = catalog.num_classes

    train: list[ImageRecord] = []
    test: list[ImageRecord] = []
    seen_images: set[int] = set()
    seen_labels: set[int] = set()
    for i, entry in enumerate(raw["images"]):
        where = f"images[{i}]"
        _require(isinstance(entry, dict), path, f"{where} must be an object")
        for key in ("id", "width", "height", "split", "labels"):
            _require(key in entry, path, f"{where} missing '{key}'")
        img_id = entry["id"]
        _require(isinstance(img_id, int), path, f"{where} id must be an integer")
        _require(img_id not in seen_images, path, f"duplicate image id {img_id}")
        seen_images.add(img_id)
        split = entry["split"]
        _require(split in ("train", "test"), path, f"image {img_id}: bad split {split!r}")
        width, height = entry["width"], entry["height"]
        labels = []
        for lab_entry in entry["labels"]:
            _require(isinstance(lab_entry, dict), path, f"image {img_id}: label must be an object")
            for key in ("id", "bbox", "class"):
                _require(key in lab_entry, path, f"image {img_id}: label missing '{key}'")
            lab_id = lab_entry["id"]
            _require(lab_id not in seen_labels, path, f"duplicate label id {lab_id}")
            seen_labels.add(lab_id)
            bbox = lab_entry["bbox"]
            _require(isinstance(bbox, list) and len(bbox) == 4, path,
                     f"label {lab_id}: bbox must be [x, y, w, h]")
            try:
                box = BBox(*(float(v) for v in bbox))
            except (TypeError, ValueError) as e:
                raise DataError(f"{path}: label {lab_id}: {e}") from e
            _require(box.x >= 0 and box.y >= 0 and box.x2 <= width and box.y2 <= height,
                     path, f"label {lab_id}: box exceeds image bounds")
            cls = lab_entry["class"]
            _require(isinstance(cls, int) and 1 <= cls <= k, path,
                     f"label {lab_id}: class id {cls} out of range 1..{k}")
            labels.append(LabelRecord(id=lab_id, box=box, true_class=cls, observed_class=cls))
        record = ImageRecord(id=img_id, width=width, height=height, labels=labels)
        (train if split == "train" else test).append(record)

    store = DatasetStore(catalog=catalog, train=train, test=test)
    if noise_path is not None:
        _apply_noise_file(store, noise_path)
    return store


def _apply_noise_file(store: DatasetStore, path: str) -> None:
    raw = _read_json(path)
    _require(isinstance(raw, dict), path, "top level must be an object")
    by_id: dict[int, LabelRecord] = {
        lab.id: lab for img in store.train for lab in img.labels
    }
    test_ids = {lab.id for img in store.test for lab in img.labels}
    for lab_id in raw.get("missed", []):
        _require(lab_id not in test_ids, path, f"label {lab_id}: test labels cannot carry noise")
        _require(lab_id in by_id, path, f"unknown label id {lab_id} in 'missed'")
        lab = by_id[lab_id]
        lab.present = False
        lab.provenance = Provenance.MISSED
    for entry in raw.get("flips", []):
        _require(isinstance(entry, dict) and "id" in entry and "observed" in entry,
                 path, "each flip needs 'id' and 'observed'")
        lab_id, observed = entry["id"], entry["observed"]
        _require(lab_id not in test_ids, path, f"label {lab_id}: test labels cannot carry noise")
        _require(lab_id in by_id, path, f"unknown label id {lab_id} in 'flips'")
        lab = by_id[lab_id]
        _require(lab.present, path, f"label {lab_id}: cannot flip a missed label")
        _require(isinstance(observed, int) and 1 <= observed <= store.num_classes,
                 path, f"label {lab_id}: observed class {observed} out of range")
        _require(observed != lab.true_class, path,
                 f"label {lab_id}: flip target equals the true class")
        lab.observed_class = observed
        lab.provenance = Provenance.FLIPPED


def noise_counts(store: DatasetStore) -> tuple[int, int]:
    """(dropped, class-flipped) counts over the train split."""
    missed = sum(1 for img in store.train for lab in img.labels if not lab.present)
    flipped = sum(
        1 for img in store.train for lab in img.labels if lab.is_class_error
    )
    return missed, flipped
