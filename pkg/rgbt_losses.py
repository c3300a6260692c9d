"""
Detection loss stack: BCE classification, CIoU localization, distribution
focal loss, their weighted total, and the center-prior target assigner.
"""

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from rgbt_core import ConfigError, DomainError
from rgbt_model import bbox2dist, dist2bbox, distribution_expectation, make_anchors

logger = logging.getLogger('rgbt.losses')

CENTER_RADIUS = 2.5


@dataclass(frozen=True)
class LossWeights:
    lambda_dfl: float = 1.0
    lambda_cls: float = 0.5
    lambda_loc: float = 0.05

    def __post_init__(self):
        for name in ('lambda_dfl', 'lambda_cls', 'lambda_loc'):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")

    def scaled(self, k):
        return LossWeights(self.lambda_dfl * k, self.lambda_cls * k, self.lambda_loc * k)


@dataclass
class AssignmentResult:
    """Per anchor point: positive mask, matched class/box/GT index and ltrb targets in stride units."""

    fg_mask: torch.Tensor
    classes: torch.Tensor
    boxes: torch.Tensor
    gt_index: torch.Tensor
    distance_targets: torch.Tensor

    @property
    def num_positive(self):
        return int(self.fg_mask.sum())

    def cls_targets(self, num_classes, dtype=torch.float32):
        t = torch.zeros(self.fg_mask.shape[0], num_classes, dtype=dtype, device=self.fg_mask.device)
        idx = self.fg_mask.nonzero(as_tuple=True)[0]
        t[idx, self.classes[idx]] = 1.0
        return t


@dataclass
class CiouTerms:
    iou: torch.Tensor
    rho2: torch.Tensor
    c2: torch.Tensor
    v: torch.Tensor
    alpha: torch.Tensor

    @property
    def loss(self):
        return 1.0 - self.iou + self.rho2 / self.c2 + self.alpha * self.v


@dataclass
class LossParts:
    dfl: torch.Tensor
    cls: torch.Tensor
    loc: torch.Tensor
    total: torch.Tensor

    def as_dict(self):
        return {'l_dfl': self.dfl, 'l_cls': self.cls, 'l_loc': self.loc, 'l_all': self.total}

    def __add__(self, other):
        return LossParts(self.dfl + other.dfl, self.cls + other.cls, self.loc + other.loc, self.total + other.total)


def assign_targets(gt_boxes, gt_classes, anchor_points, strides, reg_max=16):
    """
    Center-prior assignment.

    An anchor is positive iff its point lies strictly inside a GT box and
    within CENTER_RADIUS strides of the box center on both axes. Several
    candidates resolve to the smallest-area box, then the lowest GT index.
    """
    a = anchor_points.shape[0]
    dtype, device = anchor_points.dtype, anchor_points.device
    if gt_boxes.numel() == 0:
        return AssignmentResult(
            torch.zeros(a, dtype=torch.bool, device=device),
            torch.zeros(a, dtype=torch.long, device=device),
            torch.zeros(a, 4, dtype=dtype, device=device),
            torch.full((a,), -1, dtype=torch.long, device=device),
            torch.zeros(a, 4, dtype=dtype, device=device),
        )
    gt_boxes = gt_boxes.to(dtype)
    px, py = anchor_points[:, None, 0], anchor_points[:, None, 1]
    x1, y1, x2, y2 = (gt_boxes[None, :, i] for i in range(4))
    inside = (px > x1) & (px < x2) & (py > y1) & (py < y2)
    radius = CENTER_RADIUS * strides[:, None]
    near = ((px - (x1 + x2) / 2).abs() < radius) & ((py - (y1 + y2) / 2).abs() < radius)
    candidate = inside & near

    area = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
    cost = area[None, :].expand(a, -1).masked_fill(~candidate, math.inf)
    # argmin returns the first minimum, so equal areas fall to the lowest index
    gt_index = cost.argmin(1)
    fg = candidate.any(1)
    boxes = gt_boxes[gt_index]
    targets = bbox2dist(anchor_points, boxes, strides).clamp(0, reg_max - 1.01)
    fg_f = fg[:, None].to(dtype)
    return AssignmentResult(
        fg,
        torch.where(fg, gt_classes.long()[gt_index], torch.zeros_like(gt_index)),
        boxes * fg_f,
        torch.where(fg, gt_index, torch.full_like(gt_index, -1)),
        targets * fg_f,
    )


def bce_cls_loss(cls_logits, targets, reduction='mean', num_positive=None):
    """
    Binary cross-entropy over anchors x classes in logit form.

    `targets` is a 0/1 tensor shaped like the logits or an AssignmentResult.
    reduction `mean` averages every element; `positive` divides the sum by
    max(1, number of positive anchors).
    """
    if isinstance(targets, AssignmentResult):
        num_positive = targets.num_positive if num_positive is None else num_positive
        targets = targets.cls_targets(cls_logits.shape[-1], cls_logits.dtype)
    loss = F.binary_cross_entropy_with_logits(cls_logits, targets.to(cls_logits.dtype), reduction='none')
    if reduction == 'mean':
        return loss.mean()
    if reduction == 'positive':
        if num_positive is None:
            num_positive = int((targets > 0).any(-1).sum())
        return loss.sum() / max(1, num_positive)
    raise ConfigError(f"unknown BCE reduction '{reduction}'")


def _check_positive_area(boxes, which):
    if bool(((boxes[..., 2] <= boxes[..., 0]) | (boxes[..., 3] <= boxes[..., 1])).any()):
        raise DomainError(f"{which} box has zero or negative area")


def ciou_terms(pred_box, gt_box):
    """Overlap, center-distance and aspect terms of CIoU for (..., 4) xyxy boxes."""
    _check_positive_area(pred_box, 'predicted')
    _check_positive_area(gt_box, 'ground-truth')
    px1, py1, px2, py2 = pred_box.unbind(-1)
    gx1, gy1, gx2, gy2 = gt_box.unbind(-1)
    w, h = px2 - px1, py2 - py1
    wg, hg = gx2 - gx1, gy2 - gy1

    inter = (torch.min(px2, gx2) - torch.max(px1, gx1)).clamp(min=0) * \
            (torch.min(py2, gy2) - torch.max(py1, gy1)).clamp(min=0)
    union = w * h + wg * hg - inter
    iou = inter / union

    rho2 = ((px1 + px2 - gx1 - gx2) ** 2 + (py1 + py2 - gy1 - gy2) ** 2) / 4
    cw = torch.max(px2, gx2) - torch.min(px1, gx1)
    ch = torch.max(py2, gy2) - torch.min(py1, gy1)
    c2 = cw ** 2 + ch ** 2

    v = (4 / math.pi ** 2) * (torch.atan(wg / hg) - torch.atan(w / h)) ** 2
    denom = 1 - iou + v
    # identical boxes: v = 0 and 1 - iou = 0, alpha taken as 0
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    alpha = torch.where(denom > 0, v / safe, torch.zeros_like(v))
    return CiouTerms(iou, rho2, c2, v, alpha)


def ciou_loss(pred_box, gt_box):
    """1 - IoU + rho^2/c^2 + alpha*v per box pair; a 0-d tensor for single boxes."""
    return ciou_terms(pred_box, gt_box).loss


def dfl_loss(box_dist_logits, distance_targets):
    """
    Distribution focal loss, averaged over all targets.

    -[(y_r - y) log S_l + (y - y_l) log S_r] with y_l = floor(y), y_r = y_l + 1
    and the right bin clamped to the last one.
    """
    reg_max = box_dist_logits.shape[-1]
    if distance_targets.numel() == 0:
        return box_dist_logits.sum() * 0.0
    lo, hi = float(distance_targets.min()), float(distance_targets.max())
    if lo < 0 or hi > reg_max - 1:
        raise DomainError(f"distance target outside [0, {reg_max - 1}]: range [{lo}, {hi}]")
    y = distance_targets.to(box_dist_logits.dtype)
    tl = y.floor().long()
    tr = (tl + 1).clamp(max=reg_max - 1)
    wl = (tl + 1).to(y.dtype) - y
    wr = y - tl.to(y.dtype)
    logp = box_dist_logits.log_softmax(-1)
    lp_l = logp.gather(-1, tl[..., None]).squeeze(-1)
    lp_r = logp.gather(-1, tr[..., None]).squeeze(-1)
    # zero-weight bins drop out even when their probability is 0
    left = torch.where(wl > 0, wl * lp_l, torch.zeros_like(wl))
    right = torch.where(wr > 0, wr * lp_r, torch.zeros_like(wr))
    return -(left + right).mean()


def total_loss(l_dfl, l_cls, l_loc, weights=None):
    weights = weights or LossWeights()
    return weights.lambda_dfl * l_dfl + weights.lambda_cls * l_cls + weights.lambda_loc * l_loc


class DetectionLoss:
    """Assign targets per image and evaluate the weighted loss for one or more heads."""

    def __init__(self, weights=None, reduction='positive'):
        self.weights = weights or LossWeights()
        self.reduction = reduction

    def __call__(self, heads, targets):
        parts = [self.single(h, targets) for h in heads]
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out

    def assign(self, head_out, targets):
        points, strides = make_anchors(head_out)
        return points, strides, [
            assign_targets(t[:, 1:5].to(points), t[:, 0], points, strides, head_out.reg_max)
            for t in targets
        ]

    def single(self, head_out, targets):
        cls, box = head_out.flat()
        points, strides, assignments = self.assign(head_out, targets)
        fg = torch.stack([a.fg_mask for a in assignments])
        cls_t = torch.stack([a.cls_targets(cls.shape[-1], cls.dtype) for a in assignments])
        num_pos = int(fg.sum())
        l_cls = bce_cls_loss(cls, cls_t, self.reduction, num_positive=num_pos)

        if num_pos == 0:
            zero = box.sum() * 0.0
            l_dfl, l_loc = zero, zero
        else:
            dist_t = torch.stack([a.distance_targets for a in assignments])[fg]
            gt_boxes = torch.stack([a.boxes for a in assignments])[fg]
            pos_logits = box[fg]
            l_dfl = dfl_loss(pos_logits, dist_t)
            pos_strides = strides[None].expand(fg.shape[0], -1)[fg]
            pos_points = points[None].expand(fg.shape[0], -1, -1)[fg]
            pred = dist2bbox(distribution_expectation(pos_logits) * pos_strides[:, None], pos_points)
            l_loc = ciou_loss(pred, gt_boxes).mean()
        return LossParts(l_dfl, l_cls, l_loc, total_loss(l_dfl, l_cls, l_loc, self.weights))
