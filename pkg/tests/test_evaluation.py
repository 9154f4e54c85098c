from __future__ import annotations

import numpy as np
import pytest

from alreview.datamodel import ImageRecord
from alreview.evaluation import (
    METRICS_COLUMNS,
    CycleMetrics,
    aggregate_csv_text,
    average_precision,
    mean_average_precision,
    metrics_csv_text,
    review_precision,
)
from alreview.review import ProposalKind, ReviewAction, ReviewOutcome, ReviewProposal

from conftest import make_label, make_pred, onehotish


# ---------------------------------------------------------------------------
# Independent reference: plain-loop matching and pointwise area computation.
# ---------------------------------------------------------------------------

def ref_iou(a, b):
    ax1, ay1, ax2, ay2 = a[0], a[1], a[0] + a[2], a[1] + a[3]
    bx1, by1, bx2, by2 = b[0], b[1], b[0] + b[2], b[1] + b[3]
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def ref_average_precision(preds_by_image, truth_images, iou_thr, class_id):
    """Reference AP: explicit matching walk plus direct evaluation of
    sum over recall steps of (max precision at recall >= r)."""
    gts = {}
    npos = 0
    for img in truth_images:
        boxes = []
        for lab in img.labels:
            if lab.true_class == class_id:
                boxes.append([lab.box.x, lab.box.y, lab.box.w, lab.box.h, False])
                npos += 1
        gts[img.id] = boxes
    if npos == 0:
        return None

    rows = []
    for image_id in preds_by_image:
        for idx, p in enumerate(preds_by_image[image_id]):
            probs = list(p.probs)
            if probs.index(max(probs)) + 1 == class_id:
                rows.append((p.score, image_id, idx, [p.box.x, p.box.y, p.box.w, p.box.h]))
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))

    flags = []
    for _, image_id, _, box in rows:
        best, best_j = 0.0, -1
        for j, g in enumerate(gts.get(image_id, [])):
            if g[4]:
                continue
            v = ref_iou(box, g[:4])
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_thr:
            gts[image_id][best_j][4] = True
            flags.append(True)
        else:
            flags.append(False)

    precisions, recalls = [], []
    tp = 0
    for i, hit in enumerate(flags):
        tp += 1 if hit else 0
        precisions.append(tp / (i + 1))
        recalls.append(tp / npos)

    ap = 0.0
    prev_r = 0.0
    for i in range(len(flags)):
        r = recalls[i]
        if r > prev_r:
            ap += (r - prev_r) * max(precisions[i:])
            prev_r = r
    return ap


def random_instance(rng, n_images=3, max_preds=5, max_gt_per_class=3, k=3):
    truth = []
    preds_by_image = {}
    for i in range(1, n_images + 1):
        labels = []
        lab_id = i * 100
        for c in range(1, k + 1):
            for _ in range(int(rng.integers(0, max_gt_per_class + 1))):
                lab_id += 1
                labels.append(
                    make_label(lab_id, float(rng.uniform(0, 20)), float(rng.uniform(0, 20)),
                               float(rng.uniform(1, 6)), float(rng.uniform(1, 6)), cls=c)
                )
        truth.append(ImageRecord(id=i, width=40, height=40, labels=labels))
        preds = []
        for _ in range(int(rng.integers(0, max_preds + 1))):
            cls = int(rng.integers(1, k + 1))
            preds.append(
                make_pred(float(rng.uniform(0, 20)), float(rng.uniform(0, 20)),
                          float(rng.uniform(1, 6)), float(rng.uniform(1, 6)),
                          float(rng.uniform(0, 1)), onehotish(k, cls))
            )
        preds_by_image[i] = preds
    return preds_by_image, truth


def perfect_case(k=2):
    labels = [make_label(1, 0, 0, 4, 4, cls=1), make_label(2, 10, 10, 4, 4, cls=2)]
    truth = [ImageRecord(id=1, width=32, height=32, labels=labels)]
    preds = {1: [
        make_pred(0, 0, 4, 4, 0.9, onehotish(k, 1)),
        make_pred(10, 10, 4, 4, 0.8, onehotish(k, 2)),
    ]}
    return preds, truth


class TestAveragePrecision:
    def test_single_exact_hit(self):
        labels = [make_label(1, 5, 5, 4, 4, cls=1)]
        truth = [ImageRecord(id=1, width=32, height=32, labels=labels)]
        preds = {1: [make_pred(5, 5, 4, 4, 0.9, onehotish(2, 1))]}
        ap, _, _ = average_precision(preds, truth, 0.5, 1)
        assert ap == 1.0

    def test_single_total_miss(self):
        labels = [make_label(1, 5, 5, 4, 4, cls=1)]
        truth = [ImageRecord(id=1, width=32, height=32, labels=labels)]
        preds = {1: [make_pred(20, 20, 4, 4, 0.9, onehotish(2, 1))]}
        ap, _, _ = average_precision(preds, truth, 0.5, 1)
        assert ap == 0.0

    def test_tp_fp_tp_curve(self):
        # two boxes, predictions land TP, FP, TP in score order:
        # precision at recall 0.5 is 1.0, at recall 1.0 it is 2/3
        labels = [make_label(1, 0, 0, 4, 4, cls=1), make_label(2, 20, 20, 4, 4, cls=1)]
        truth = [ImageRecord(id=1, width=64, height=64, labels=labels)]
        preds = {1: [
            make_pred(0, 0, 4, 4, 0.9, onehotish(2, 1)),
            make_pred(40, 40, 4, 4, 0.8, onehotish(2, 1)),
            make_pred(20, 20, 4, 4, 0.7, onehotish(2, 1)),
        ]}
        ap, _, _ = average_precision(preds, truth, 0.5, 1)
        assert ap == pytest.approx(0.5 * 1.0 + 0.5 * (2.0 / 3.0), abs=1e-9)
        assert ap == pytest.approx(0.8333, abs=1e-4)

    def test_no_ground_truth_is_undefined(self):
        truth = [ImageRecord(id=1, width=32, height=32, labels=[])]
        preds = {1: [make_pred(0, 0, 4, 4, 0.9, onehotish(2, 1))]}
        assert average_precision(preds, truth, 0.5, 1) is None

    def test_matches_reference_on_random_instances(self):
        rng = np.random.default_rng(2024)
        checked = 0
        for _ in range(300):
            preds, truth = random_instance(rng)
            for c in (1, 2, 3):
                ref = ref_average_precision(preds, truth, 0.5, c)
                got = average_precision(preds, truth, 0.5, c)
                if ref is None:
                    assert got is None
                    continue
                assert got[0] == pytest.approx(ref, abs=1e-9)
                checked += 1
        assert checked > 300

    def test_score_rank_invariance(self):
        rng = np.random.default_rng(7)
        preds, truth = random_instance(rng, n_images=2)
        base = average_precision(preds, truth, 0.5, 1)
        # strictly monotone transform of all scores preserves ranking
        transformed = {
            i: [make_pred(p.box.x, p.box.y, p.box.w, p.box.h, p.score ** 3, p.probs)
                for p in preds[i]]
            for i in preds
        }
        new = average_precision(transformed, truth, 0.5, 1)
        if base is None:
            assert new is None
        else:
            assert new[0] == pytest.approx(base[0], abs=1e-12)

    def test_lower_score_duplicate_never_helps(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            preds, truth = random_instance(rng, n_images=2)
            res = average_precision(preds, truth, 0.5, 1)
            if res is None or not preds[1]:
                continue
            base_ap = res[0]
            dup = preds[1][0]
            worse = make_pred(dup.box.x, dup.box.y, dup.box.w, dup.box.h,
                              dup.score * 0.5, dup.probs)
            preds2 = {i: list(preds[i]) for i in preds}
            preds2[1] = preds2[1] + [worse]
            assert average_precision(preds2, truth, 0.5, 1)[0] <= base_ap + 1e-12


class TestMeanAveragePrecision:
    def test_all_classes_perfect(self):
        preds, truth = perfect_case()
        res = mean_average_precision(preds, truth, num_classes=2)
        assert res.mean == 1.0

    def test_absent_classes_excluded(self):
        # class 1 perfect, class 2 hopeless, classes 3..5 absent from truth
        labels = [make_label(1, 0, 0, 4, 4, cls=1), make_label(2, 20, 20, 4, 4, cls=2)]
        truth = [ImageRecord(id=1, width=64, height=64, labels=labels)]
        preds = {1: [
            make_pred(0, 0, 4, 4, 0.9, onehotish(5, 1)),
            make_pred(40, 40, 4, 4, 0.9, onehotish(5, 2)),
        ]}
        res = mean_average_precision(preds, truth, num_classes=5)
        assert set(res.per_class) == {1, 2}
        assert res.mean == pytest.approx(0.5)

    def test_no_ground_truth_at_all(self):
        truth = [ImageRecord(id=1, width=32, height=32, labels=[])]
        with pytest.raises(ValueError, match="mAP undefined"):
            mean_average_precision({1: []}, truth, num_classes=3)

    def test_matches_reference(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            preds, truth = random_instance(rng)
            refs = [ref_average_precision(preds, truth, 0.5, c) for c in (1, 2, 3)]
            defined = [r for r in refs if r is not None]
            if not defined:
                continue
            res = mean_average_precision(preds, truth, num_classes=3)
            assert res.mean == pytest.approx(float(np.mean(defined)), abs=1e-9)


def outcome(kind, true_error):
    return ReviewOutcome(
        proposal=ReviewProposal(kind, 1, 0, 0.5),
        was_true_error=true_error,
        action=ReviewAction.CORRECTED,
    )


class TestReviewPrecision:
    def test_all_true(self):
        outs = [outcome(ProposalKind.MISS, True)] * 4
        assert review_precision(outs, ProposalKind.MISS) == 1.0

    def test_none_true(self):
        outs = [outcome(ProposalKind.FLIP, False)] * 4
        assert review_precision(outs, ProposalKind.FLIP) == 0.0

    def test_ratio(self):
        outs = [outcome(ProposalKind.MISS, True)] * 17 + [outcome(ProposalKind.MISS, False)] * 3
        assert review_precision(outs, ProposalKind.MISS) == pytest.approx(0.85)

    def test_undefined_is_none(self):
        outs = [outcome(ProposalKind.MISS, True)]
        assert review_precision(outs, ProposalKind.FLIP) is None


def metrics(cycle, ap=0.5, pm=None, pf=None):
    return CycleMetrics(
        cycle=cycle,
        budget_total=100 * cycle,
        boxes_labeled=80,
        reviews_miss=10,
        reviews_flip=10,
        mean_ap=ap,
        precision_miss=pm,
        precision_flip=pf,
        active_images=5,
        active_boxes=20,
        active_error_fraction=0.2,
    )


class TestMetricsEmission:
    def test_header_schema_is_pinned(self):
        text = metrics_csv_text([])
        assert text.splitlines()[0] == (
            "cycle,budget_total,boxes_labeled,reviews_miss,reviews_flip,map,"
            "precision_miss,precision_flip,active_images,active_boxes,"
            "active_error_fraction"
        )
        assert tuple(text.splitlines()[0].split(",")) == METRICS_COLUMNS

    def test_single_row(self):
        text = metrics_csv_text([metrics(1, ap=0.25, pm=0.9)])
        lines = text.splitlines()
        assert len(lines) == 2
        assert lines[1] == "1,100,80,10,10,0.250000,0.900000,,5,20,0.200000"

    def test_undefined_precision_is_empty_not_zero(self):
        text = metrics_csv_text([metrics(1)])
        row = text.splitlines()[1].split(",")
        assert row[6] == "" and row[7] == ""

    def test_aggregate_mean_std(self):
        h1 = [metrics(1, ap=0.4), metrics(2, ap=0.6)]
        h2 = [metrics(1, ap=0.6), metrics(2, ap=0.8)]
        text = aggregate_csv_text([h1, h2])
        lines = text.splitlines()
        header = lines[0].split(",")
        i = header.index("map_mean")
        row1 = lines[1].split(",")
        assert float(row1[i]) == pytest.approx(0.5)
        assert float(row1[i + 1]) == pytest.approx(np.std([0.4, 0.6], ddof=1))

    def test_aggregate_single_seed_std_zero(self):
        text = aggregate_csv_text([[metrics(1, ap=0.4)]])
        header = text.splitlines()[0].split(",")
        row = text.splitlines()[1].split(",")
        assert float(row[header.index("map_std")]) == 0.0
        assert float(row[header.index("map_mean")]) == pytest.approx(0.4)

    def test_aggregate_identical_runs_std_zero(self):
        h = [metrics(1, ap=0.55)]
        text = aggregate_csv_text([h, h, h, h])
        header = text.splitlines()[0].split(",")
        row = text.splitlines()[1].split(",")
        assert float(row[header.index("map_std")]) == 0.0
        assert row[header.index("seeds")] == "4"
