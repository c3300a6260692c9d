"""
Single-modality anchor-free detector (YOLOv11-style) and its post-processing.

Backbone (Conv / C3k2 / SPPF, stages P1..P5) -> PAN neck -> decoupled head
with per-scale classification logits and box-distribution logits. Boxes are
decoded as the expectation of a softmax over `reg_max` distance bins.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn as nn
import torchvision

from rgbt_core import ConfigError, DomainError, ShapeError

logger = logging.getLogger('rgbt.model')

# (depth multiple, width multiple)
SCALES = {
    'n': (1 / 3, 1 / 4),
    's': (1 / 3, 1 / 2),
    'm': (2 / 3, 3 / 4),
}
BASE_WIDTHS = (64, 128, 256, 512, 1024)
BASE_DEPTHS = (3, 6, 6, 3)
NECK_DEPTH = 3
STAGES = ('P2', 'P3', 'P4', 'P5')

# Post-processing defaults
EVAL_CONF = 0.001
EVAL_IOU = 0.60
PREDICT_CONF = 0.25
MAX_DET = 300
MAX_CANDIDATES = 3000


class FusionMode(str, Enum):
    SINGLE = 'single'
    EARLY = 'early'
    MID = 'mid'
    MID_P3 = 'midp3'
    MID_TO_LATE = 'midtolate'
    LATE = 'late'
    SCORE = 'score'
    SHARE_WEIGHT = 'shareweight'
    MCF = 'mcf'

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace('-', '').replace('_', '')
        for mode in cls:
            if mode.value == key:
                return mode
        names = ', '.join(m.value for m in cls)
        raise ConfigError(f"unknown fusion mode '{value}' (expected one of: {names})")

    @property
    def is_fused(self):
        return self is not FusionMode.SINGLE

    @property
    def is_dual_stream(self):
        return self not in (FusionMode.SINGLE, FusionMode.EARLY)


@dataclass(frozen=True)
class ModelSpec:
    scale: str = 'n'
    num_classes: int = 3
    reg_max: int = 16
    strides: tuple = (8, 16, 32)
    fusion: FusionMode = FusionMode.SINGLE
    modality: str = 'rgb'
    ir_channels: int = 1
    combiner: str = 'concat'

    def __post_init__(self):
        object.__setattr__(self, 'fusion', FusionMode.parse(self.fusion))
        object.__setattr__(self, 'strides', tuple(int(s) for s in self.strides))
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.reg_max < 2:
            raise ConfigError(f"reg_max must be >= 2, got {self.reg_max}")
        if len(self.strides) != 3 or any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ConfigError(f"strides must be three strictly increasing values, got {self.strides}")
        if self.modality not in ('rgb', 'ir'):
            raise ConfigError(f"modality must be 'rgb' or 'ir', got {self.modality}")
        if self.ir_channels not in (1, 3):
            raise ConfigError(f"ir_channels must be 1 or 3, got {self.ir_channels}")
        if self.combiner not in ('concat', 'add'):
            raise ConfigError(f"combiner must be 'concat' or 'add', got {self.combiner}")
        if self.in_channels not in (1, 3, 4, 6):
            raise ConfigError(f"in_channels {self.in_channels} not in (1, 3, 4, 6)")

    @property
    def in_channels(self):
        """Channels consumed by the first convolution of the primary stream."""
        if self.fusion is FusionMode.EARLY:
            return 3 + self.ir_channels
        if self.fusion in (FusionMode.SINGLE, FusionMode.MCF):
            return self.channels_for(self.modality)
        return 3

    def channels_for(self, modality):
        return 3 if modality == 'rgb' else self.ir_channels

    def single(self, modality=None):
        """Single-modality spec with the same scale/classes/head settings."""
        modality = modality or self.modality
        return ModelSpec(self.scale, self.num_classes, self.reg_max, self.strides,
                         FusionMode.SINGLE, modality, self.ir_channels, self.combiner)

    def to_dict(self):
        return {
            'scale': self.scale,
            'num_classes': self.num_classes,
            'reg_max': self.reg_max,
            'strides': list(self.strides),
            'fusion': self.fusion.value,
            'modality': self.modality,
            'ir_channels': self.ir_channels,
            'combiner': self.combiner,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if 'strides' in data:
            data['strides'] = tuple(data['strides'])
        return cls(**data)


def make_divisible(x, divisor=8):
    return int(math.ceil(x / divisor) * divisor)


def scale_widths(scale):
    if scale not in SCALES:
        raise ConfigError(f"unsupported scale '{scale}' (expected one of: {', '.join(SCALES)})")
    _, width = SCALES[scale]
    return tuple(max(8, make_divisible(c * width)) for c in BASE_WIDTHS)


def scale_depths(scale):
    if scale not in SCALES:
        raise ConfigError(f"unsupported scale '{scale}' (expected one of: {', '.join(SCALES)})")
    depth, _ = SCALES[scale]
    return tuple(max(round(n * depth), 1) for n in BASE_DEPTHS), max(round(NECK_DEPTH * depth), 1)


def autopad(k):
    return k // 2


class Conv(nn.Module):
    """Conv2d + BatchNorm + SiLU."""

    def __init__(self, c1, c2, k=1, s=1, g=1):
        super().__init__()
        self.conv = nn.Conv2d(c1, c2, k, s, autopad(k), groups=g, bias=False)
        self.bn = nn.BatchNorm2d(c2, eps=1e-3, momentum=0.03)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, c1, c2, shortcut=True, e=1.0):
        super().__init__()
        c_ = int(c2 * e)
        self.cv1 = Conv(c1, c_, 3, 1)
        self.cv2 = Conv(c_, c2, 3, 1)
        self.add = shortcut and c1 == c2

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class C3k2(nn.Module):
    """Split-bottleneck block: 1x1 split, n chained bottlenecks, 1x1 merge of all partials."""

    def __init__(self, c1, c2, n=1, shortcut=True, e=0.5):
        super().__init__()
        self.c = int(c2 * e)
        self.cv1 = Conv(c1, 2 * self.c, 1, 1)
        self.cv2 = Conv((2 + n) * self.c, c2, 1)
        self.m = nn.ModuleList(Bottleneck(self.c, self.c, shortcut) for _ in range(n))

    def forward(self, x):
        y = list(self.cv1(x).chunk(2, 1))
        for m in self.m:
            y.append(m(y[-1]))
        return self.cv2(torch.cat(y, 1))


class SPPF(nn.Module):
    def __init__(self, c1, c2, k=5):
        super().__init__()
        c_ = c1 // 2
        self.cv1 = Conv(c1, c_, 1, 1)
        self.cv2 = Conv(c_ * 4, c2, 1, 1)
        self.m = nn.MaxPool2d(kernel_size=k, stride=1, padding=k // 2)

    def forward(self, x):
        y = [self.cv1(x)]
        y.extend(self.m(y[-1]) for _ in range(3))
        return self.cv2(torch.cat(y, 1))


@dataclass
class FeaturePyramid:
    p2: torch.Tensor
    p3: torch.Tensor
    p4: torch.Tensor
    p5: torch.Tensor

    def stage(self, name):
        if name not in STAGES:
            raise ConfigError(f"unknown stage '{name}' (expected one of: {', '.join(STAGES)})")
        return getattr(self, name.lower())


class Backbone(nn.Module):
    """Stem (P1) and stages P2..P5 at strides 2, 4, 8, 16, 32."""

    def __init__(self, in_channels, scale, through='P5'):
        super().__init__()
        if through not in ('P3', 'P5'):
            raise ConfigError(f"backbone can stop at P3 or P5, got {through}")
        w = scale_widths(scale)
        (n2, n3, n4, n5), _ = scale_depths(scale)
        self.in_channels = in_channels
        self.channels = w
        self.stem = Conv(in_channels, w[0], 3, 2)
        self.stage2 = nn.Sequential(Conv(w[0], w[1], 3, 2), C3k2(w[1], w[1], n2))
        self.stage3 = nn.Sequential(Conv(w[1], w[2], 3, 2), C3k2(w[2], w[2], n3))
        if through == 'P3':
            return
        self.stage4 = nn.Sequential(Conv(w[2], w[3], 3, 2), C3k2(w[3], w[3], n4))
        self.stage5 = nn.Sequential(Conv(w[3], w[4], 3, 2), C3k2(w[4], w[4], n5), SPPF(w[4], w[4]))

    def check_input(self, x):
        if x.ndim != 4:
            raise ShapeError('input', f"expected a 4-D batch, got shape {tuple(x.shape)}")
        if x.shape[1] != self.in_channels:
            raise ShapeError('stem', f"expected {self.in_channels} input channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError('input', f"spatial size {h}x{w} is not divisible by 32")

    def to_p3(self, x):
        self.check_input(x)
        p2 = self.stage2(self.stem(x))
        return p2, self.stage3(p2)

    def from_p3(self, p3):
        p4 = self.stage4(p3)
        return p4, self.stage5(p4)

    def forward(self, x):
        p2, p3 = self.to_p3(x)
        p4, p5 = self.from_p3(p3)
        return FeaturePyramid(p2, p3, p4, p5)


class Neck(nn.Module):
    """PAN neck: top-down then bottom-up path; outputs at strides 8, 16, 32."""

    def __init__(self, scale):
        super().__init__()
        w = scale_widths(scale)
        _, n = scale_depths(scale)
        c3, c4, c5 = w[2], w[3], w[4]
        self.channels = (c3, c4, c5)
        self.up = nn.Upsample(scale_factor=2, mode='nearest')
        self.top4 = C3k2(c5 + c4, c4, n, shortcut=False)
        self.top3 = C3k2(c4 + c3, c3, n, shortcut=False)
        self.down3 = Conv(c3, c3, 3, 2)
        self.bottom4 = C3k2(c3 + c4, c4, n, shortcut=False)
        self.down4 = Conv(c4, c4, 3, 2)
        self.bottom5 = C3k2(c4 + c5, c5, n, shortcut=False)

    def forward(self, p3, p4, p5):
        h4 = self.top4(torch.cat([self.up(p5), p4], 1))
        n3 = self.top3(torch.cat([self.up(h4), p3], 1))
        n4 = self.bottom4(torch.cat([self.down3(n3), h4], 1))
        n5 = self.bottom5(torch.cat([self.down4(n4), p5], 1))
        return [n3, n4, n5]


@dataclass
class HeadOutput:
    """Per-scale logits, NCHW: cls (B, nc, K, K) and box (B, 4*reg_max, K, K)."""

    cls_logits: list
    box_dist_logits: list
    strides: tuple
    reg_max: int

    @property
    def num_classes(self):
        return self.cls_logits[0].shape[1]

    @property
    def batch_size(self):
        return self.cls_logits[0].shape[0]

    def grid_sizes(self):
        return [tuple(t.shape[-2:]) for t in self.cls_logits]

    def flat(self):
        """(B, A, nc) class logits and (B, A, 4, reg_max) distance logits, levels in stride order."""
        b = self.batch_size
        cls = torch.cat([t.flatten(2) for t in self.cls_logits], 2).transpose(1, 2)
        box = torch.cat([t.flatten(2) for t in self.box_dist_logits], 2).transpose(1, 2)
        return cls, box.reshape(b, -1, 4, self.reg_max)

    @staticmethod
    def average(a, b):
        return HeadOutput(
            [(x + y) / 2 for x, y in zip(a.cls_logits, b.cls_logits)],
            [(x + y) / 2 for x, y in zip(a.box_dist_logits, b.box_dist_logits)],
            a.strides,
            a.reg_max,
        )


class DetectHead(nn.Module):
    """Decoupled head: separate box-distribution and classification towers per scale."""

    def __init__(self, channels, num_classes, reg_max=16, strides=(8, 16, 32)):
        super().__init__()
        self.num_classes = num_classes
        self.reg_max = reg_max
        self.strides = tuple(strides)
        c2 = max(16, channels[0] // 4, reg_max * 4)
        c3 = max(channels[0], min(num_classes, 100))
        self.box = nn.ModuleList(
            nn.Sequential(Conv(c, c2, 3), Conv(c2, c2, 3), nn.Conv2d(c2, 4 * reg_max, 1)) for c in channels
        )
        self.cls = nn.ModuleList(
            nn.Sequential(Conv(c, c3, 3), Conv(c3, c3, 3), nn.Conv2d(c3, num_classes, 1)) for c in channels
        )
        self.reset_bias()

    def reset_bias(self, img_size=640):
        for box, cls, s in zip(self.box, self.cls, self.strides):
            nn.init.constant_(box[-1].bias, 1.0)
            # prior of ~5 objects per image spread over the grid
            nn.init.constant_(cls[-1].bias, math.log(5 / self.num_classes / (img_size / s) ** 2))

    def forward(self, feats):
        return HeadOutput(
            [m(x) for m, x in zip(self.cls, feats)],
            [m(x) for m, x in zip(self.box, feats)],
            self.strides,
            self.reg_max,
        )


class DetectionModel(nn.Module):
    """Common surface of every detector topology; subclasses set `spec` and implement forward."""

    def head_outputs(self, *inputs):
        return [self(*inputs)[1]]

    def postprocess(self, heads, conf_thresh, iou_thresh, max_det=MAX_DET):
        return [nms(d, iou_thresh)[:max_det] for d in decode(heads[0], conf_thresh)]


class Detector(DetectionModel):
    """Single-modality detector: backbone -> neck -> head."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.backbone = Backbone(spec.in_channels, spec.scale)
        self.neck = Neck(spec.scale)
        self.head = DetectHead(self.neck.channels, spec.num_classes, spec.reg_max, spec.strides)

    def forward(self, x):
        pyramid = self.backbone(x)
        return pyramid, self.head(self.neck(pyramid.p3, pyramid.p4, pyramid.p5))


def build_detector(spec, seed=0):
    """Build a single-modality detector with deterministic initialization."""
    scale_widths(spec.scale)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Detector(spec)
    logger.debug(f"Built detector scale={spec.scale} in={spec.in_channels} classes={spec.num_classes}")
    return model


def model_inputs(spec, batch):
    """Tensors a model built from `spec` consumes, taken from a collated batch."""
    try:
        if spec.fusion is FusionMode.SINGLE:
            return (batch[spec.modality],)
        return batch['rgb'], batch['ir']
    except KeyError as exc:
        raise ConfigError(f"batch has no '{exc.args[0]}' images for fusion mode {spec.fusion.value}") from None


def make_anchors(head_out):
    """Anchor points (A, 2) at cell centers in input pixels and per-anchor strides (A,)."""
    points, strides = [], []
    ref = head_out.cls_logits[0]
    for t, s in zip(head_out.cls_logits, head_out.strides):
        h, w = t.shape[-2:]
        sy, sx = torch.meshgrid(
            torch.arange(h, dtype=ref.dtype, device=ref.device),
            torch.arange(w, dtype=ref.dtype, device=ref.device),
            indexing='ij',
        )
        points.append(torch.stack([(sx + 0.5) * s, (sy + 0.5) * s], -1).reshape(-1, 2))
        strides.append(torch.full((h * w,), float(s), dtype=ref.dtype, device=ref.device))
    return torch.cat(points), torch.cat(strides)


def distribution_expectation(dist_logits):
    """Expected bin index of softmax(dist_logits) over the last axis (bins 0..reg_max-1)."""
    reg_max = dist_logits.shape[-1]
    project = torch.arange(reg_max, dtype=dist_logits.dtype, device=dist_logits.device)
    return dist_logits.softmax(-1) @ project


def dist2bbox(distances, points):
    """(…, 4) ltrb distances in pixels + (…, 2) points -> xyxy."""
    lt, rb = distances.chunk(2, -1)
    return torch.cat([points - lt, points + rb], -1)


def bbox2dist(points, boxes, strides):
    """xyxy boxes -> ltrb distances in stride units."""
    x1y1, x2y2 = boxes.chunk(2, -1)
    return torch.cat([points - x1y1, x2y2 - points], -1) / strides[..., None]


def decode_tensors(head_out):
    """Boxes (B, A, 4) xyxy pixels and class logits (B, A, nc) for every anchor point."""
    cls, box = head_out.flat()
    points, strides = make_anchors(head_out)
    distances = distribution_expectation(box) * strides[None, :, None]
    return dist2bbox(distances, points[None]), cls


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise DomainError(f"degenerate detection box {self.box}")


def score_logit(conf_thresh):
    """Logit of a confidence threshold; 1.0 maps to +inf so no finite logit passes."""
    if conf_thresh >= 1.0:
        return math.inf
    return math.log(conf_thresh / (1.0 - conf_thresh))


def decode(head_out, conf_thresh, max_candidates=MAX_CANDIDATES):
    """Per image: every (anchor, class) pair whose score reaches `conf_thresh`."""
    if not 0.0 < conf_thresh <= 1.0:
        raise ConfigError(f"conf_thresh must be in (0, 1], got {conf_thresh}")
    threshold = score_logit(conf_thresh)
    with torch.no_grad():
        boxes, logits = decode_tensors(head_out)
    results = []
    for b in range(boxes.shape[0]):
        # thresholded in logit space: sigmoid saturates to 1.0 in float32
        anchor_idx, class_idx = torch.nonzero(logits[b].double() >= threshold, as_tuple=True)
        s = logits[b, anchor_idx, class_idx].sigmoid()
        bx = boxes[b, anchor_idx]
        valid = (bx[:, 2] > bx[:, 0]) & (bx[:, 3] > bx[:, 1])
        s, bx, class_idx = s[valid], bx[valid], class_idx[valid]
        if s.numel() > max_candidates:
            order = torch.sort(s, descending=True, stable=True).indices[:max_candidates]
            s, bx, class_idx = s[order], bx[order], class_idx[order]
        results.append([
            Detection(int(c), float(v), tuple(float(t) for t in xyxy))
            for c, v, xyxy in zip(class_idx.tolist(), s.tolist(), bx.tolist())
        ])
    return results


def box_iou(a, b):
    """Pairwise IoU of xyxy boxes: (N, 4) x (M, 4) -> (N, M); zero-area pairs give 0."""
    return torchvision.ops.box_iou(a, b).nan_to_num(0.0)


def nms(dets, iou_thresh):
    """Class-wise greedy NMS over Detection objects; output sorted by descending score."""
    if not 0.0 < iou_thresh < 1.0:
        raise ConfigError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    if not dets:
        return []
    boxes = torch.tensor([d.box for d in dets], dtype=torch.float64)
    scores = torch.tensor([d.score for d in dets], dtype=torch.float64)
    classes = torch.tensor([d.class_id for d in dets])
    # equal scores: the earlier detection ranks first
    order = torch.sort(scores, descending=True, stable=True).indices
    ranks = torch.arange(len(order), 0, -1, dtype=torch.float64)
    keep = torchvision.ops.batched_nms(boxes[order], ranks, classes[order], iou_thresh)
    kept = sorted(order[keep].tolist(), key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in kept]


def predict(model, batch, conf_thresh=PREDICT_CONF, iou_thresh=EVAL_IOU, max_det=MAX_DET):
    """Decode -> NMS (-> score merge) for a collated batch; one Detection list per image."""
    model.eval()
    with torch.no_grad():
        heads = model.head_outputs(*model_inputs(model.spec, batch))
    return model.postprocess(heads, conf_thresh, iou_thresh, max_det)


def extract_stage_features(model, inputs, stage):
    """
    Channel-mean activation of one pyramid stage as an 8-bit grayscale image.

    `inputs` is the tuple from `model_inputs` for a single image. A constant
    activation map comes out uniform mid-gray.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage '{stage}' (expected one of: {', '.join(STAGES)})")
    model.eval()
    with torch.no_grad():
        pyramid, _ = model(*inputs)
    fmap = pyramid.stage(stage)[0].double().mean(0).cpu().numpy()
    lo, hi = float(fmap.min()), float(fmap.max())
    if hi - lo <= 1e-12:
        return np.full(fmap.shape, 128, dtype=np.uint8)
    return np.round((fmap - lo) / (hi - lo) * 255.0).astype(np.uint8)


def save_stage_image(out_dir, image_id, stage, image):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{image_id}_{stage}.png"
    cv2.imwrite(str(path), image)
    return path


def draw_detections(image_rgb, dets, names=None):
    """Copy of an RGB uint8 image with detections drawn (BGR out, ready for imwrite)."""
    canvas = cv2.cvtColor(np.ascontiguousarray(image_rgb), cv2.COLOR_RGB2BGR) if image_rgb.shape[2] == 3 \
        else cv2.cvtColor(np.ascontiguousarray(image_rgb[..., 0]), cv2.COLOR_GRAY2BGR)
    for d in dets:
        x1, y1, x2, y2 = (int(round(v)) for v in d.box)
        label = names[d.class_id] if names and d.class_id < len(names) else str(d.class_id)
        cv2.rectangle(canvas, (x1, y1), (x2, y2), (0, 255, 0), 2)
        cv2.putText(canvas, f"{label} {d.score:.2f}", (x1, max(0, y1 - 4)),
                    cv2.FONT_HERSHEY_SIMPLEX, 0.5, (0, 255, 0), 1, cv2.LINE_AA)
    return canvas
