from __future__ import annotations

import copy

import numpy as np
import pytest

from alreview.datamodel import (
    ClassCatalog,
    DatasetStore,
    ImageRecord,
    LabelRecord,
    Provenance,
)
from alreview.detector import Prediction
from alreview.geometry import BBox


def make_pred(x, y, w, h, score, probs) -> Prediction:
    p = np.asarray(probs, dtype=float)
    return Prediction(box=BBox(x, y, w, h), score=score, probs=p / p.sum())


def onehotish(k: int, class_id: int, mass: float = 0.9) -> list[float]:
    rest = (1.0 - mass) / (k - 1)
    probs = [rest] * k
    probs[class_id - 1] = mass
    return probs


def make_label(lab_id, x, y, w, h, cls, observed=None, present=True,
               provenance=Provenance.CLEAN) -> LabelRecord:
    return LabelRecord(
        id=lab_id,
        box=BBox(x, y, w, h),
        true_class=cls,
        observed_class=observed if observed is not None else cls,
        present=present,
        provenance=provenance,
    )


def make_store(train_images, test_images=(), k=10) -> DatasetStore:
    return DatasetStore(
        catalog=ClassCatalog([f"class_{c}" for c in range(1, k + 1)]),
        train=list(train_images),
        test=list(test_images),
    )


def scrub_hidden(store: DatasetStore) -> DatasetStore:
    """Twin store holding only what an annotator-facing consumer may see.

    Dropped labels vanish, recorded classes become the only classes, and
    review history is erased.  Anything computed on the observable side must
    be identical between a store and its scrubbed twin.
    """
    twin = copy.deepcopy(store)
    for img in twin.train:
        kept = []
        for lab in img.labels:
            if not lab.present:
                continue
            lab.true_class = lab.observed_class
            lab.provenance = Provenance.CLEAN
            kept.append(lab)
        img.labels = kept
    return twin


def preds_equal(a, b) -> bool:
    if len(a) != len(b):
        return False
    for pa, pb in zip(a, b):
        if pa.box != pb.box or pa.score != pb.score:
            return False
        if not np.array_equal(pa.probs, pb.probs):
            return False
    return True


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
