"""
Controllable fine-tuning: a frozen single-modality detector plus a trainable
auxiliary-modality backbone grafted in through zero-initialized 1x1 convs.
"""

import copy
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn

from rgbt_core import ConfigError, TrainingError
from rgbt_model import Backbone, DetectionModel, FeaturePyramid, FusionMode, ModelSpec, build_detector, model_inputs
from rgbt_transfer import adapt_input_channels, load_exact

logger = logging.getLogger('rgbt.mcf')

JUNCTION_STAGES = ('P3', 'P4', 'P5')
AUX_INITS = ('transfer', 'random')


class ZeroConv(nn.Module):
    """1x1 convolution whose weight and bias start at exactly zero."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        return self.conv(x)


class McfModel(DetectionModel):
    frozen_prefixes = ('base',)

    def __init__(self, spec, base, aux_backbone):
        super().__init__()
        self.spec = spec
        self.primary = spec.modality
        self.base = base
        self.aux_backbone = aux_backbone
        channels = base.backbone.channels[2:]
        self.zero_convs = nn.ModuleDict({s: ZeroConv(c) for s, c in zip(JUNCTION_STAGES, channels)})
        self.manifest_extra = {'primary': self.primary}
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.base.eval()

    def train(self, mode=True):
        super().train(mode)
        # normalization statistics of the frozen detector never update
        self.base.eval()
        return self

    def _split(self, rgb, ir):
        return (rgb, ir) if self.primary == 'rgb' else (ir, rgb)

    def forward(self, rgb, ir):
        x, aux_x = self._split(rgb, ir)
        bb = self.base.backbone
        aux = self.aux_backbone(aux_x)
        p2, p3 = bb.to_p3(x)
        p3 = p3 + self.zero_convs['P3'](aux.p3)
        p4 = bb.stage4(p3) + self.zero_convs['P4'](aux.p4)
        p5 = bb.stage5(p4) + self.zero_convs['P5'](aux.p5)
        pyramid = FeaturePyramid(p2, p3, p4, p5)
        return pyramid, self.base.head(self.base.neck(p3, p4, p5))


@dataclass
class FreezeReport:
    frozen_names: list
    trainable_names: list

    @property
    def frozen_count(self):
        return len(self.frozen_names)

    @property
    def trainable_count(self):
        return len(self.trainable_names)

    def to_dict(self):
        return {
            'frozen_count': self.frozen_count,
            'trainable_count': self.trainable_count,
            'frozen_names': list(self.frozen_names),
            'trainable_names': list(self.trainable_names),
        }


def freeze_report(model):
    frozen, trainable = [], []
    for name, p in model.named_parameters():
        (trainable if p.requires_grad else frozen).append(name)
    return FreezeReport(frozen, trainable)


def build_mcf_model(base_ckpt, spec, primary='rgb', aux_init='transfer', strategy='copy_scaled', seed=0):
    """
    Frozen detector for `primary` loaded exactly from `base_ckpt`, plus an
    auxiliary backbone for the other modality and three zero convs.
    """
    if primary not in ('rgb', 'ir'):
        raise ConfigError(f"primary modality must be 'rgb' or 'ir', got '{primary}'")
    if aux_init not in AUX_INITS:
        raise ConfigError(f"aux_init must be one of {AUX_INITS}, got '{aux_init}'")
    base_spec = spec.single(primary)
    base = load_exact(base_ckpt, build_detector(base_spec, seed))
    aux_modality = 'ir' if primary == 'rgb' else 'rgb'
    aux_channels = spec.channels_for(aux_modality)

    if aux_init == 'transfer':
        aux = Backbone(aux_channels, spec.scale)
        state = copy.deepcopy(base.backbone.state_dict())
        stem = 'stem.conv.weight'
        if state[stem].shape[1] != aux_channels:
            use = 'average' if aux_channels < state[stem].shape[1] else strategy
            state[stem] = adapt_input_channels(state[stem], aux_channels, use)
            logger.info(f"Auxiliary stem adapted {base_spec.in_channels}->{aux_channels} channels ({use})")
        aux.load_state_dict(state)
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            aux = Backbone(aux_channels, spec.scale)

    mcf_spec = ModelSpec(spec.scale, spec.num_classes, spec.reg_max, spec.strides, FusionMode.MCF,
                         primary, spec.ir_channels, spec.combiner)
    model = McfModel(mcf_spec, base, aux)
    logger.info(f"Built MCF model: primary={primary}, aux_init={aux_init}, "
                f"trainable={sum(p.numel() for p in model.parameters() if p.requires_grad)}")
    return model


def mcf_from_checkpoint(ckpt):
    """Rebuild an MCF model (structure only, then exact load) from its own checkpoint."""
    spec = ckpt.spec
    if spec.fusion is not FusionMode.MCF:
        raise ConfigError(f"checkpoint holds a {spec.fusion.value} model, not mcf")
    base = build_detector(spec.single(spec.modality))
    aux_modality = 'ir' if spec.modality == 'rgb' else 'rgb'
    model = McfModel(spec, base, Backbone(spec.channels_for(aux_modality), spec.scale))
    return load_exact(ckpt, model)


def check_optimizer(model, optimizer):
    """Every optimized tensor must be trainable."""
    frozen = {id(p): name for name, p in model.named_parameters() if not p.requires_grad}
    for group in optimizer.param_groups:
        for p in group['params']:
            if id(p) in frozen:
                raise ConfigError(f"optimizer covers frozen parameter '{frozen[id(p)]}'")


def finetune_step(model, batch, optimizer, loss_fn):
    """One optimizer step over the trainable tensors; returns the loss parts."""
    check_optimizer(model, optimizer)
    model.train()
    heads = model.head_outputs(*model_inputs(model.spec, batch))
    parts = loss_fn(heads, batch['targets'])
    for key, value in parts.as_dict().items():
        if not torch.isfinite(value):
            raise TrainingError(key, f"non-finite value {float(value)}")
    optimizer.zero_grad()
    parts.total.backward()
    optimizer.step()
    return parts, optimizer
