"""
COCO-style detection metrics: greedy matching, cumulative P/R, envelope AP,
mAP50 and mAP50:95 with per-class reporting.
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torchvision

logger = logging.getLogger('rgbt.metrics')

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class GtBox:
    class_id: int
    box: tuple


def iou_matrix(a, b):
    """Pairwise IoU of xyxy boxes, (N, 4) x (M, 4) -> (N, M), float64."""
    a = torch.as_tensor(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = torch.as_tensor(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    return torchvision.ops.box_iou(a, b).nan_to_num(0.0).numpy()


@dataclass
class MatchFlags:
    """tp flag per detection (input order); ground-truth counts per class."""

    tp: np.ndarray
    scores: np.ndarray
    classes: np.ndarray
    n_gt: dict = field(default_factory=dict)

    def for_class(self, class_id):
        mask = self.classes == class_id
        return self.tp[mask], self.scores[mask]


def match_detections(dets, gts, iou_thresh=0.5):
    """
    Greedy matching of score-sorted detections to single-use ground truths.

    Each detection takes the unmatched same-class GT with the highest IoU at
    or above `iou_thresh` (lowest GT index on ties); otherwise it is a false
    positive.
    """
    tp = np.zeros(len(dets), dtype=np.int64)
    n_gt = {}
    for g in gts:
        n_gt[g.class_id] = n_gt.get(g.class_id, 0) + 1
    if dets and gts:
        ious = iou_matrix([d.box for d in dets], [g.box for g in gts])
        used = np.zeros(len(gts), dtype=bool)
        gt_classes = np.array([g.class_id for g in gts])
        for i, d in enumerate(dets):
            valid = (~used) & (gt_classes == d.class_id) & (ious[i] >= iou_thresh)
            if not valid.any():
                continue
            j = int(np.argmax(np.where(valid, ious[i], -1.0)))
            used[j] = True
            tp[i] = 1
    return MatchFlags(
        tp,
        np.array([d.score for d in dets], dtype=np.float64),
        np.array([d.class_id for d in dets], dtype=np.int64),
        n_gt,
    )


class PrCurve(NamedTuple):
    precision: np.ndarray
    recall: np.ndarray
    n_gt: int

    @property
    def skipped(self):
        return self.n_gt == 0


def pr_curve(tp, n_gt):
    """Cumulative precision/recall over score-sorted tp flags; classes with no GT are skipped."""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0:
        return PrCurve(np.zeros(0), np.zeros(0), 0)
    ctp = np.cumsum(tp)
    k = np.arange(1, len(tp) + 1, dtype=np.float64)
    return PrCurve(ctp / k, ctp / n_gt, int(n_gt))


def average_precision(precision, recall):
    """Area under the right-running-max precision envelope, summed over recall steps."""
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    if precision.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    delta = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(envelope * delta))


def mean_ap(per_class_ap):
    """Mean over classes that have ground truth (None entries); None when no class qualifies."""
    values = [v for v in per_class_ap if v is not None]
    if not values:
        return None
    return float(np.mean(values))


def operating_point(curve):
    """(precision, recall) at the max-F1 point of the curve."""
    if curve.skipped or curve.precision.size == 0:
        return 0.0, 0.0
    p, r = curve.precision, curve.recall
    f1 = np.divide(2 * p * r, p + r, out=np.zeros_like(p), where=(p + r) > 0)
    i = int(np.argmax(f1))
    return float(p[i]), float(r[i])


@dataclass
class ClassMetrics:
    class_id: int
    name: str
    n_gt: int
    precision: float
    recall: float
    ap50: float
    ap: float


@dataclass
class MetricsReport:
    classes: list
    map50: float
    map: float

    def to_text(self):
        lines = [f"{'class':<16}{'gt':>8}{'P':>10}{'R':>10}{'AP50':>10}{'AP':>10}"]
        for c in self.classes:
            if c.n_gt == 0:
                lines.append(f"{c.name:<16}{0:>8}{'n/a':>10}{'n/a':>10}{'n/a':>10}{'n/a':>10}")
                continue
            lines.append(f"{c.name:<16}{c.n_gt:>8}{c.precision:>10.4f}{c.recall:>10.4f}{c.ap50:>10.4f}{c.ap:>10.4f}")
        lines.append(f"mAP50: {_fmt(self.map50)}")
        lines.append(f"mAP50:95: {_fmt(self.map)}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {
            'mAP50': self.map50,
            'mAP': self.map,
            'classes': [
                {
                    'class_id': c.class_id,
                    'name': c.name,
                    'n_gt': c.n_gt,
                    'precision': c.precision,
                    'recall': c.recall,
                    'AP50': c.ap50 if c.n_gt else None,
                    'AP': c.ap if c.n_gt else None,
                }
                for c in self.classes
            ],
        }


def _fmt(value):
    return 'n/a' if value is None else f"{value:.4f}"


def _sorted_dets(dets):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in order]


def evaluate_detections(per_image_dets, per_image_gts, num_classes, names=None, iou_thresholds=IOU_THRESHOLDS):
    """
    Dataset-level metrics. Detections are matched per image, then pooled and
    sorted by score (stable, in image order) for every class.
    """
    names = list(names) if names else [str(i) for i in range(num_classes)]
    per_image_dets = [_sorted_dets(d) for d in per_image_dets]
    n_gt = np.zeros(num_classes, dtype=np.int64)
    for gts in per_image_gts:
        for g in gts:
            n_gt[g.class_id] += 1

    ap_table = np.zeros((len(iou_thresholds), num_classes))
    curves50 = [None] * num_classes
    for t, thr in enumerate(iou_thresholds):
        flags = [match_detections(d, g, thr) for d, g in zip(per_image_dets, per_image_gts)]
        tp = np.concatenate([f.tp for f in flags]) if flags else np.zeros(0, dtype=np.int64)
        scores = np.concatenate([f.scores for f in flags]) if flags else np.zeros(0)
        classes = np.concatenate([f.classes for f in flags]) if flags else np.zeros(0, dtype=np.int64)
        order = np.argsort(-scores, kind='stable')
        tp, classes = tp[order], classes[order]
        for c in range(num_classes):
            curve = pr_curve(tp[classes == c], int(n_gt[c]))
            ap_table[t, c] = average_precision(curve.precision, curve.recall)
            if t == 0:
                curves50[c] = curve

    rows = []
    for c in range(num_classes):
        p, r = operating_point(curves50[c])
        rows.append(ClassMetrics(c, names[c] if c < len(names) else str(c), int(n_gt[c]), p, r,
                                 float(ap_table[0, c]), float(ap_table[:, c].mean())))
    has_gt = [c for c in range(num_classes) if n_gt[c] > 0]
    report = MetricsReport(
        rows,
        mean_ap([rows[c].ap50 for c in has_gt]),
        mean_ap([rows[c].ap for c in has_gt]),
    )
    logger.debug(f"Evaluated {len(per_image_dets)} images: mAP50={_fmt(report.map50)} mAP={_fmt(report.map)}")
    return report
