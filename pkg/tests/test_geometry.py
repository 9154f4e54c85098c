from __future__ import annotations

import math

import numpy as np
import pytest

from alreview.geometry import BBox, iou, match_class_agnostic, nms, score_filter

from conftest import make_label, make_pred, onehotish


def random_box(rng, span=20.0):
    return BBox(
        x=float(rng.uniform(0, span)),
        y=float(rng.uniform(0, span)),
        w=float(rng.uniform(0.5, span / 2)),
        h=float(rng.uniform(0.5, span / 2)),
    )


class TestBBox:
    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            BBox(0, 0, 0, 1)
        with pytest.raises(ValueError):
            BBox(0, 0, 1, -2)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            BBox(math.nan, 0, 1, 1)
        with pytest.raises(ValueError):
            BBox(0, math.inf, 1, 1)


class TestIoU:
    def test_identical_boxes(self):
        b = BBox(0, 0, 1, 1)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0, 0, 1, 1), BBox(5, 5, 1, 1)) == 0.0

    def test_partial_overlap_by_hand(self):
        # intersection 1x1, union 4 + 4 - 1 = 7
        a = BBox(0, 0, 2, 2)
        b = BBox(1, 1, 2, 2)
        assert iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-12)

    def test_symmetry_and_range(self, rng):
        for _ in range(500):
            a, b = random_box(rng), random_box(rng)
            v = iou(a, b)
            assert v == iou(b, a)
            assert 0.0 <= v <= 1.0
            assert iou(a, a) == pytest.approx(1.0)

    def test_touching_edges_are_disjoint(self):
        assert iou(BBox(0, 0, 1, 1), BBox(1, 0, 1, 1)) == 0.0


class TestScoreFilter:
    def test_threshold(self):
        preds = [make_pred(0, 0, 1, 1, s, onehotish(3, 1)) for s in (0.9, 0.6, 0.71)]
        kept = score_filter(preds, 0.7)
        assert [p.score for p in kept] == [0.9, 0.71]

    def test_zero_threshold_keeps_all(self):
        preds = [make_pred(0, 0, 1, 1, s, onehotish(3, 1)) for s in (0.3, 0.1)]
        assert score_filter(preds, 0.0) == preds

    def test_full_threshold_drops_all(self):
        preds = [make_pred(0, 0, 1, 1, s, onehotish(3, 1)) for s in (0.3, 0.99)]
        assert score_filter(preds, 1.0) == []


def reference_nms(preds, iou_thr):
    """Independent restatement: repeatedly take the best remaining prediction
    and discard same-class overlaps."""
    remaining = list(range(len(preds)))
    kept = []
    while remaining:
        best = min(remaining, key=lambda i: (-preds[i].score, i))
        kept.append(best)
        remaining = [
            i
            for i in remaining
            if i != best
            and not (
                preds[i].argmax_class == preds[best].argmax_class
                and iou(preds[i].box, preds[best].box) >= iou_thr
            )
        ]
    return [preds[i] for i in kept]


def random_preds(rng, n, k=4, span=6.0):
    out = []
    for _ in range(n):
        cls = int(rng.integers(1, k + 1))
        out.append(
            make_pred(
                float(rng.uniform(0, span)),
                float(rng.uniform(0, span)),
                float(rng.uniform(0.5, 3)),
                float(rng.uniform(0.5, 3)),
                float(rng.uniform(0, 1)),
                onehotish(k, cls),
            )
        )
    return out


class TestNMS:
    def test_duplicate_same_class_suppressed(self):
        a = make_pred(0, 0, 2, 2, 0.9, onehotish(3, 1))
        b = make_pred(0, 0, 2, 2, 0.8, onehotish(3, 1))
        assert nms([b, a], 0.5) == [a]

    def test_duplicate_different_class_kept(self):
        a = make_pred(0, 0, 2, 2, 0.9, onehotish(3, 1))
        b = make_pred(0, 0, 2, 2, 0.8, onehotish(3, 2))
        assert nms([b, a], 0.5) == [a, b]

    def test_three_box_case(self):
        a = make_pred(0, 0, 2, 2, 0.9, onehotish(3, 1))
        b = make_pred(1, 1, 2, 2, 0.8, onehotish(3, 1))
        c = make_pred(10, 10, 2, 2, 0.7, onehotish(3, 1))
        # IoU(a, b) = 1/7 > 0.1 so b is suppressed by a
        assert iou(a.box, b.box) > 0.1
        assert nms([a, b, c], 0.1) == [a, c]

    def test_matches_reference_on_random_instances(self, rng):
        for _ in range(200):
            preds = random_preds(rng, int(rng.integers(0, 50)))
            thr = float(rng.uniform(0.05, 0.95))
            assert nms(preds, thr) == reference_nms(preds, thr)

    def test_subset_idempotent_and_separated(self, rng):
        for _ in range(100):
            preds = random_preds(rng, 30)
            thr = 0.4
            kept = nms(preds, thr)
            assert all(p in preds for p in kept)
            assert nms(kept, thr) == kept
            for i, p in enumerate(kept):
                for q in kept[i + 1 :]:
                    if p.argmax_class == q.argmax_class:
                        assert iou(p.box, q.box) < thr

    def test_ties_broken_by_input_index(self):
        a = make_pred(0, 0, 2, 2, 0.8, onehotish(3, 1))
        b = make_pred(0.2, 0, 2, 2, 0.8, onehotish(3, 1))
        assert nms([a, b], 0.3) == [a]
        assert nms([b, a], 0.3) == [b]


class TestMatchClassAgnostic:
    def test_exact_overlap(self):
        pred = make_pred(3, 4, 2, 2, 0.9, onehotish(3, 1))
        labels = [make_label(7, 3, 4, 2, 2, cls=2)]
        assert match_class_agnostic(pred, labels, 0.3) == 7

    def test_no_overlap(self):
        pred = make_pred(0, 0, 1, 1, 0.9, onehotish(3, 1))
        labels = [make_label(7, 50, 50, 2, 2, cls=2)]
        assert match_class_agnostic(pred, labels, 0.3) is None

    def test_prefers_larger_overlap(self):
        # pred (0,0,2,4): label 1 has IoU 0.5, label 2 has IoU 0.6
        pred = make_pred(0, 0, 2, 4, 0.9, onehotish(3, 1))
        l1 = make_label(1, 0, 0, 2, 2, cls=1)
        l2 = make_label(2, 0, 1, 2, 4, cls=1)
        assert iou(pred.box, l1.box) == pytest.approx(0.5)
        assert iou(pred.box, l2.box) == pytest.approx(0.6)
        assert match_class_agnostic(pred, [l1, l2], 0.3) == 2

    def test_ignores_class(self):
        pred = make_pred(0, 0, 2, 2, 0.9, onehotish(3, 1))
        labels = [make_label(5, 0, 0, 2, 2, cls=3)]
        assert match_class_agnostic(pred, labels, 0.3) == 5

    def test_tie_goes_to_smaller_id(self):
        pred = make_pred(0, 0, 2, 2, 0.9, onehotish(3, 1))
        l9 = make_label(9, 0, 0, 2, 2, cls=1)
        l4 = make_label(4, 0, 0, 2, 2, cls=2)
        assert match_class_agnostic(pred, [l9, l4], 0.3) == 4

    def test_threshold_is_inclusive(self):
        # engineered IoU exactly 0.5
        pred = make_pred(0, 0, 2, 4, 0.9, onehotish(3, 1))
        lab = make_label(1, 0, 0, 2, 2, cls=1)
        assert iou(pred.box, lab.box) == 0.5
        assert match_class_agnostic(pred, [lab], 0.5) == 1
        assert match_class_agnostic(pred, [lab], 0.5 + 1e-9) is None
