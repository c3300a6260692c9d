"""COCO-style metrics against hand-worked cases and a brute-force oracle."""

import random

import numpy as np
import pytest

from rgbt_metrics import (
    GtBox,
    average_precision,
    evaluate_detections,
    iou_matrix,
    match_detections,
    mean_ap,
    operating_point,
    pr_curve,
)
from rgbt_model import Detection


def _det(c, s, box):
    return Detection(c, s, tuple(float(v) for v in box))


class TestCurves:
    def test_worked_average_precision(self):
        curve = pr_curve([1, 0, 1], 2)
        np.testing.assert_allclose(curve.precision, [1.0, 0.5, 2 / 3])
        np.testing.assert_allclose(curve.recall, [0.5, 0.5, 1.0])
        assert average_precision(curve.precision, curve.recall) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-9)
        assert average_precision(curve.precision, curve.recall) == pytest.approx(0.8333, abs=1e-4)

    def test_class_without_ground_truth_is_skipped(self):
        assert pr_curve([0, 0], 0).skipped

    def test_no_detections(self):
        curve = pr_curve([], 3)
        assert average_precision(curve.precision, curve.recall) == 0.0

    def test_mean_ap_ignores_missing(self):
        assert mean_ap([None, 0.5, 1.0]) == 0.75
        assert mean_ap([None, None]) is None

    def test_operating_point_max_f1(self):
        p, r = operating_point(pr_curve([1, 0, 1, 0], 2))
        assert (p, r) == pytest.approx((2 / 3, 1.0))


class TestMatching:
    def test_greedy_single_use(self):
        gts = [GtBox(0, (0, 0, 10, 10))]
        dets = [_det(0, 0.9, (0, 0, 10, 10)), _det(0, 0.8, (0, 0, 10, 10)), _det(1, 0.7, (0, 0, 10, 10))]
        flags = match_detections(dets, gts, 0.5)
        assert flags.tp.tolist() == [1, 0, 0]
        assert flags.n_gt == {0: 1}

    def test_takes_highest_iou(self):
        gts = [GtBox(0, (0, 0, 10, 10)), GtBox(0, (1, 0, 11, 10))]
        dets = [_det(0, 0.9, (1, 0, 11, 10)), _det(0, 0.8, (0, 0, 10, 10))]
        assert match_detections(dets, gts, 0.5).tp.tolist() == [1, 1]

    def test_iou_matrix(self):
        iou = iou_matrix([(0, 0, 2, 2)], [(1, 1, 3, 3), (5, 5, 6, 6)])
        np.testing.assert_allclose(iou, [[1 / 7, 0.0]])


def _oracle_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _oracle_ap50(dets, gts, num_classes):
    """Explicit score-ordered greedy matching, then AP as the envelope value at each true positive."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    used = [False] * len(gts)
    tp = {}
    for i in order:
        d = dets[i]
        best, best_iou = None, 0.5
        for j, g in enumerate(gts):
            if used[j] or g.class_id != d.class_id:
                continue
            v = _oracle_iou(d.box, g.box)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = j, v
        if best is not None:
            used[best] = True
        tp.setdefault(d.class_id, []).append(1 if best is not None else 0)

    aps = []
    for c in range(num_classes):
        n_gt = sum(1 for g in gts if g.class_id == c)
        if n_gt == 0:
            continue
        flags = tp.get(c, [])
        precisions = [sum(flags[:k + 1]) / (k + 1) for k in range(len(flags))]
        ap = 0.0
        for k, hit in enumerate(flags):
            if hit:
                ap += max(precisions[k:]) / n_gt
        aps.append(ap)
    return sum(aps) / len(aps) if aps else None


def _random_instance(rng):
    num_classes = rng.randint(1, 3)
    gts, dets = [], []
    for _ in range(rng.randint(0, 5)):
        x, y, w, h = rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(4, 15), rng.uniform(4, 15)
        gts.append(GtBox(rng.randrange(num_classes), (x, y, x + w, y + h)))
    for _ in range(rng.randint(0, 8)):
        if gts and rng.random() < 0.6:
            g = rng.choice(gts)
            j = [rng.uniform(-3, 3) for _ in range(4)]
            box = (g.box[0] + j[0], g.box[1] + j[1], g.box[2] + j[2] + 3.5, g.box[3] + j[3] + 3.5)
            c = g.class_id if rng.random() < 0.8 else rng.randrange(num_classes)
        else:
            x, y = rng.uniform(0, 40), rng.uniform(0, 40)
            box = (x, y, x + rng.uniform(2, 15), y + rng.uniform(2, 15))
            c = rng.randrange(num_classes)
        dets.append(_det(c, rng.random(), box))
    return dets, gts, num_classes


class TestOracle:
    def test_random_instances(self):
        rng = random.Random(0)
        for _ in range(100):
            dets, gts, num_classes = _random_instance(rng)
            report = evaluate_detections([dets], [gts], num_classes)
            expected = _oracle_ap50(dets, gts, num_classes)
            if expected is None:
                assert report.map50 is None
            else:
                assert report.map50 == pytest.approx(expected, abs=1e-9)

    def test_detection_order_does_not_matter(self):
        rng = random.Random(1)
        for _ in range(20):
            dets, gts, num_classes = _random_instance(rng)
            shuffled = list(dets)
            rng.shuffle(shuffled)
            a = evaluate_detections([dets], [gts], num_classes)
            b = evaluate_detections([shuffled], [gts], num_classes)
            assert a.map50 == b.map50
            assert a.map == b.map

    def test_monotone_score_rescaling(self):
        rng = random.Random(2)
        for _ in range(30):
            dets, gts, num_classes = _random_instance(rng)
            rescaled = [_det(d.class_id, 0.1 + 0.5 * d.score ** 3, d.box) for d in dets]
            a = evaluate_detections([dets], [gts], num_classes)
            b = evaluate_detections([rescaled], [gts], num_classes)
            assert a.map50 == b.map50
            assert a.map == b.map

    def test_stricter_iou_never_raises_ap(self):
        rng = random.Random(3)
        for _ in range(50):
            dets, gts, num_classes = _random_instance(rng)
            if not gts:
                continue
            aps = [evaluate_detections([dets], [gts], num_classes, iou_thresholds=(thr,)).map50
                   for thr in (0.5, 0.75, 0.95)]
            assert aps[1] <= aps[0] + 1e-12
            assert aps[2] <= aps[1] + 1e-12

    def test_class_without_ground_truth_does_not_change_map(self):
        gts = [GtBox(0, (0, 0, 10, 10))]
        dets = [_det(0, 0.9, (0, 0, 10, 10))]
        base = evaluate_detections([dets], [gts], 2)
        extra = evaluate_detections([dets + [_det(1, 0.95, (20, 20, 30, 30))]], [gts], 2)
        assert base.map50 == extra.map50 == 1.0

    def test_split_across_images(self):
        gts = [[GtBox(0, (0, 0, 10, 10))], [GtBox(0, (0, 0, 10, 10))]]
        dets = [[_det(0, 0.9, (0, 0, 10, 10))], [_det(0, 0.8, (20, 20, 30, 30))]]
        report = evaluate_detections(dets, gts, 1)
        assert report.map50 == pytest.approx(0.5)
        assert report.classes[0].n_gt == 2


class TestReport:
    def test_perfect_detections(self):
        gts = [GtBox(0, (0, 0, 10, 10)), GtBox(1, (20, 20, 40, 40))]
        dets = [_det(0, 0.9, (0, 0, 10, 10)), _det(1, 0.8, (20, 20, 40, 40))]
        report = evaluate_detections([dets], [gts], 3, names=['car', 'person', 'bike'])
        assert report.map50 == 1.0
        assert report.map == 1.0
        assert [c.name for c in report.classes] == ['car', 'person', 'bike']
        text = report.to_text()
        assert 'mAP50: 1.0000' in text
        assert 'n/a' in text.splitlines()[3]
        data = report.to_dict()
        assert data['classes'][2]['AP50'] is None

    def test_no_ground_truth_at_all(self):
        report = evaluate_detections([[_det(0, 0.5, (0, 0, 1, 1))]], [[]], 1)
        assert report.map50 is None
        assert 'mAP50: n/a' in report.to_text()
