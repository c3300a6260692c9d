"""
Multispectral fusion topologies built from the single-modality detector parts.

Every dual-stream mode takes `(rgb, ir)` batches. Junctions keep the
single-modality channel count at their stage, so the neck and head graphs are
reused unchanged.
"""

import logging

import torch
import torch.nn as nn

from rgbt_core import ConfigError, ShapeError
from rgbt_model import (
    MAX_DET,
    Backbone,
    Conv,
    DetectHead,
    DetectionModel,
    Detector,
    Detection,
    FeaturePyramid,
    FusionMode,
    HeadOutput,
    Neck,
    box_iou,
    build_detector,
    decode,
    nms,
)

logger = logging.getLogger('rgbt.fusion')

SCORE_MERGE_IOU = 0.65
BACKBONE_STAGES = ('P3', 'P4', 'P5')
NECK_STAGES = ('N3', 'N4', 'N5')


class Junction(nn.Module):
    """
    Two same-shaped feature maps -> one map with the same channel count.

    `concat`: channels interleaved as (rgb_0, ir_0, rgb_1, ir_1, ...) and
    reduced by a channel-paired 1x1 convolution (groups=C) + BN + SiLU.
    `add`: elementwise sum, no parameters.
    """

    def __init__(self, stage, channels, combiner='concat'):
        super().__init__()
        self.stage = stage
        self.channels = channels
        self.combiner = combiner
        if combiner == 'concat':
            self.reduce = Conv(2 * channels, channels, 1, 1, g=channels)
        elif combiner != 'add':
            raise ConfigError(f"unknown junction combiner '{combiner}'")

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(self.stage, f"junction inputs differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        if self.combiner == 'add':
            return a + b
        n, c, h, w = a.shape
        return self.reduce(torch.stack([a, b], 2).reshape(n, 2 * c, h, w))


def _junctions(stages, channels, combiner):
    return nn.ModuleDict({s: Junction(s, c, combiner) for s, c in zip(stages, channels)})


def _as_three_channels(x):
    return x.expand(-1, 3, -1, -1) if x.shape[1] == 1 else x


class EarlyFusion(Detector):
    """Single detector over the channel-concatenated (rgb, ir) input."""

    def forward(self, rgb, ir):
        return super().forward(torch.cat([rgb, ir], 1))


class MidFusion(DetectionModel):
    """Two backbones, junctions at P3/P4/P5, one neck and head."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.rgb_backbone = Backbone(3, spec.scale)
        self.ir_backbone = Backbone(spec.ir_channels, spec.scale)
        self.junctions = _junctions(BACKBONE_STAGES, self.rgb_backbone.channels[2:], spec.combiner)
        self.neck = Neck(spec.scale)
        self.head = DetectHead(self.neck.channels, spec.num_classes, spec.reg_max, spec.strides)

    def extract_branches(self, rgb, ir):
        return self.rgb_backbone(rgb), self.ir_backbone(ir)

    def fuse(self, pr, pi):
        j = self.junctions
        # P2 is not fused; the visible branch's map is reported
        return FeaturePyramid(pr.p2, j['P3'](pr.p3, pi.p3), j['P4'](pr.p4, pi.p4), j['P5'](pr.p5, pi.p5))

    def forward(self, rgb, ir):
        fused = self.fuse(*self.extract_branches(rgb, ir))
        return fused, self.head(self.neck(fused.p3, fused.p4, fused.p5))


class ShareWeightFusion(MidFusion):
    """Mid topology with one backbone applied to both modalities."""

    def __init__(self, spec):
        DetectionModel.__init__(self)
        self.spec = spec
        self.backbone = Backbone(3, spec.scale)
        self.junctions = _junctions(BACKBONE_STAGES, self.backbone.channels[2:], spec.combiner)
        self.neck = Neck(spec.scale)
        self.head = DetectHead(self.neck.channels, spec.num_classes, spec.reg_max, spec.strides)

    def extract_branches(self, rgb, ir):
        return self.backbone(rgb), self.backbone(_as_three_channels(ir))


class MidP3Fusion(DetectionModel):
    """Two stems through P3, one junction at P3, shared trunk P4/P5 onward."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.rgb_backbone = Backbone(3, spec.scale)
        self.ir_backbone = Backbone(spec.ir_channels, spec.scale, through='P3')
        self.junctions = _junctions(('P3',), self.rgb_backbone.channels[2:3], spec.combiner)
        self.neck = Neck(spec.scale)
        self.head = DetectHead(self.neck.channels, spec.num_classes, spec.reg_max, spec.strides)

    def forward(self, rgb, ir):
        p2, p3_rgb = self.rgb_backbone.to_p3(rgb)
        _, p3_ir = self.ir_backbone.to_p3(ir)
        p3 = self.junctions['P3'](p3_rgb, p3_ir)
        p4, p5 = self.rgb_backbone.from_p3(p3)
        fused = FeaturePyramid(p2, p3, p4, p5)
        return fused, self.head(self.neck(p3, p4, p5))


class MidToLateFusion(DetectionModel):
    """Two backbone+neck stacks, junctions on the three neck outputs, one head."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.rgb_backbone = Backbone(3, spec.scale)
        self.ir_backbone = Backbone(spec.ir_channels, spec.scale)
        self.rgb_neck = Neck(spec.scale)
        self.ir_neck = Neck(spec.scale)
        self.junctions = _junctions(NECK_STAGES, self.rgb_neck.channels, spec.combiner)
        self.head = DetectHead(self.rgb_neck.channels, spec.num_classes, spec.reg_max, spec.strides)

    def forward(self, rgb, ir):
        pr, pi = self.rgb_backbone(rgb), self.ir_backbone(ir)
        nr = self.rgb_neck(pr.p3, pr.p4, pr.p5)
        ni = self.ir_neck(pi.p3, pi.p4, pi.p5)
        fused = [self.junctions[s](a, b) for s, a, b in zip(NECK_STAGES, nr, ni)]
        return pr, self.head(fused)


class LateFusion(DetectionModel):
    """Two full stacks with their own head towers; logits averaged before decode."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.rgb_backbone = Backbone(3, spec.scale)
        self.ir_backbone = Backbone(spec.ir_channels, spec.scale)
        self.rgb_neck = Neck(spec.scale)
        self.ir_neck = Neck(spec.scale)
        self.rgb_head = DetectHead(self.rgb_neck.channels, spec.num_classes, spec.reg_max, spec.strides)
        self.ir_head = DetectHead(self.ir_neck.channels, spec.num_classes, spec.reg_max, spec.strides)

    def forward(self, rgb, ir):
        pr, pi = self.rgb_backbone(rgb), self.ir_backbone(ir)
        hr = self.rgb_head(self.rgb_neck(pr.p3, pr.p4, pr.p5))
        hi = self.ir_head(self.ir_neck(pi.p3, pi.p4, pi.p5))
        return pr, HeadOutput.average(hr, hi)


class ScoreFusion(DetectionModel):
    """Two complete detectors; detection lists merged after decoding."""

    def __init__(self, spec, iou_merge=SCORE_MERGE_IOU):
        super().__init__()
        self.spec = spec
        self.iou_merge = iou_merge
        self.rgb_detector = Detector(spec.single('rgb'))
        self.ir_detector = Detector(spec.single('ir'))

    def forward(self, rgb, ir):
        # the visible detector's outputs; both heads come from head_outputs
        return self.rgb_detector(rgb)

    def head_outputs(self, rgb, ir):
        return [self.rgb_detector(rgb)[1], self.ir_detector(ir)[1]]

    def postprocess(self, heads, conf_thresh, iou_thresh, max_det=MAX_DET):
        per_rgb = decode(heads[0], conf_thresh)
        per_ir = decode(heads[1], conf_thresh)
        return [
            merge_scores(nms(a, iou_thresh), nms(b, iou_thresh), self.iou_merge, iou_thresh)[:max_det]
            for a, b in zip(per_rgb, per_ir)
        ]


MODEL_TYPES = {
    FusionMode.EARLY: EarlyFusion,
    FusionMode.MID: MidFusion,
    FusionMode.MID_P3: MidP3Fusion,
    FusionMode.MID_TO_LATE: MidToLateFusion,
    FusionMode.LATE: LateFusion,
    FusionMode.SCORE: ScoreFusion,
    FusionMode.SHARE_WEIGHT: ShareWeightFusion,
}


def build_fused_model(spec, seed=0, modality_policy='both'):
    """Build the topology named by `spec.fusion` (single-modality specs give a plain Detector)."""
    if spec.fusion is FusionMode.SINGLE:
        return build_detector(spec, seed)
    if spec.fusion is FusionMode.MCF:
        raise ConfigError("MCF models are built from a base checkpoint (finetune-mcf)")
    if modality_policy != 'both':
        raise ConfigError(f"fusion mode {spec.fusion.value} needs modality_policy 'both', got '{modality_policy}'")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MODEL_TYPES[spec.fusion](spec)
    logger.debug(f"Built {spec.fusion.value} fusion model, {parameter_count(model)} parameters")
    return model


def parameter_count(model):
    """Number of scalars over all (trainable and frozen) parameters; shared tensors count once."""
    return sum(p.numel() for p in model.parameters())


def dummy_inputs(spec, img_size=640, batch=1, dtype=torch.float32):
    def zeros(c):
        return torch.zeros(batch, c, img_size, img_size, dtype=dtype)

    if spec.fusion is FusionMode.SINGLE:
        return (zeros(spec.in_channels),)
    return zeros(3), zeros(spec.ir_channels)


def flop_count(model, img_size=640):
    """GFLOPs (2 x multiply-accumulates of every convolution) for one image."""
    macs = []

    def hook(module, inputs, output):
        k = module.kernel_size[0] * module.kernel_size[1]
        macs.append(output.numel() // output.shape[0] * (module.in_channels // module.groups) * k)

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, nn.Conv2d)]
    was_training = model.training
    try:
        model.eval()
        with torch.no_grad():
            model.head_outputs(*dummy_inputs(model.spec, img_size))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return 2 * sum(macs) / 1e9


def junction_table(model):
    """Rows (stage, combiner, channels, params) describing where the two streams meet."""
    mode = model.spec.fusion
    rows = []
    if mode is FusionMode.EARLY:
        rows.append(('input', 'channel-concat', model.spec.in_channels, 0))
    for m in model.modules():
        if isinstance(m, Junction):
            rows.append((m.stage, m.combiner, m.channels, parameter_count(m)))
    if mode is FusionMode.LATE:
        rows.append(('head-out', 'average', model.spec.num_classes, 0))
    if mode is FusionMode.SCORE:
        rows.append(('detections', 'score-merge', model.spec.num_classes, 0))
    zero_convs = getattr(model, 'zero_convs', None)
    if zero_convs is not None:
        for stage, m in zero_convs.items():
            rows.append((stage, 'zero-conv add', m.conv.in_channels, parameter_count(m)))
    return rows


def merge_scores(dets_rgb, dets_ir, iou_merge=SCORE_MERGE_IOU, iou_thresh=0.60):
    """
    Merge two per-image detection lists.

    Visible detections are visited by descending score; each pairs with the
    unpaired infrared detection of the same class with the highest IoU above
    `iou_merge` (lowest index wins ties). A pair becomes one detection with
    the max score and the score-weighted average box. Unpaired detections pass
    through, then class-wise NMS runs over the pooled list.
    """
    order_rgb = sorted(range(len(dets_rgb)), key=lambda i: (-dets_rgb[i].score, i))
    order_ir = sorted(range(len(dets_ir)), key=lambda i: (-dets_ir[i].score, i))
    rgb = [dets_rgb[i] for i in order_rgb]
    ir = [dets_ir[i] for i in order_ir]
    if rgb and ir:
        ious = box_iou(torch.tensor([d.box for d in rgb], dtype=torch.float64),
                       torch.tensor([d.box for d in ir], dtype=torch.float64))
    paired = [False] * len(ir)
    pool = []
    for i, a in enumerate(rgb):
        best, best_iou = None, iou_merge
        for j, b in enumerate(ir):
            if paired[j] or b.class_id != a.class_id:
                continue
            v = float(ious[i, j])
            if v > best_iou:
                best, best_iou = j, v
        if best is None:
            pool.append(a)
            continue
        b = ir[best]
        paired[best] = True
        total = a.score + b.score
        box = tuple((a.score * u + b.score * v) / total for u, v in zip(a.box, b.box))
        pool.append(Detection(a.class_id, max(a.score, b.score), box))
    pool.extend(b for j, b in enumerate(ir) if not paired[j])
    return nms(pool, iou_thresh)
