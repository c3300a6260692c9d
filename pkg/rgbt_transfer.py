"""
Checkpoint container and single-to-multispectral weight transfer.

A checkpoint is one safetensors file: tensors under their hierarchical
module names, plus a YAML manifest stored in the file metadata.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import yaml
from packaging.version import Version
from safetensors import safe_open
from safetensors.torch import save_file

from rgbt_core import CheckpointError, ConfigError, ShapeError
from rgbt_model import FusionMode, ModelSpec

logger = logging.getLogger('rgbt.transfer')

FORMAT_VERSION = '1.0'
STRATEGIES = ('average', 'copy_scaled')
STEM_WEIGHT = 'backbone.stem.conv.weight'


@dataclass(frozen=True)
class Checkpoint:
    tensors: dict
    manifest: dict

    @property
    def spec(self):
        return ModelSpec.from_dict(self.manifest['spec'])

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = {k: v.detach().cpu().clone().contiguous() for k, v in self.tensors.items()}
        save_file(tensors, str(path), metadata={'manifest': yaml.safe_dump(self.manifest, sort_keys=True)})
        logger.debug(f"Saved checkpoint {path} ({len(tensors)} tensors)")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"checkpoint not found: {path}")
        try:
            with safe_open(str(path), framework='pt') as f:
                metadata = f.metadata() or {}
                tensors = {k: f.get_tensor(k) for k in f.keys()}
        except (OSError, ValueError, RuntimeError) as exc:
            raise CheckpointError('<file>', f"cannot read {path}: {exc}") from exc
        if 'manifest' not in metadata:
            raise CheckpointError('<manifest>', f"{path} carries no manifest")
        manifest = yaml.safe_load(metadata['manifest'])
        version = Version(str(manifest.get('format_version', '0')))
        if version.major != Version(FORMAT_VERSION).major:
            raise CheckpointError('<manifest>', f"format_version {version} not understood (loader {FORMAT_VERSION})")
        return cls(tensors, manifest)


def make_manifest(spec, freeze_flags=(), **extra):
    manifest = {
        'fusion_mode': spec.fusion.value,
        'scale': spec.scale,
        'num_classes': spec.num_classes,
        'in_channels': spec.in_channels,
        'freeze_flags': sorted(freeze_flags),
        'format_version': FORMAT_VERSION,
        'spec': spec.to_dict(),
    }
    manifest.update(extra)
    return manifest


def checkpoint_from_model(model, freeze_flags=None, **extra):
    """Snapshot of the model's parameters and buffers; `freeze_flags` lists frozen module prefixes."""
    if freeze_flags is None:
        freeze_flags = getattr(model, 'frozen_prefixes', ())
    extra = {**getattr(model, 'manifest_extra', {}), **extra}
    tensors = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    return Checkpoint(tensors, make_manifest(model.spec, freeze_flags, **extra))


def adapt_input_channels(weights, new_in, strategy='copy_scaled'):
    """
    Map conv weights [out, in, k, k] to `new_in` input channels.

    copy_scaled tiles the input block ceil(new_in/in) times, truncates and
    scales by in/new_in. average takes the mean over the input axis, tiles it
    to new_in and scales by in/new_in. Both preserve the response to inputs
    whose channels repeat the original block (copy_scaled) or are all equal
    (average).
    """
    if weights.ndim != 4:
        raise ShapeError('stem', f"conv kernel must have rank 4, got shape {tuple(weights.shape)}")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown channel strategy '{strategy}' (expected one of: {', '.join(STRATEGIES)})")
    c_in = weights.shape[1]
    if new_in == c_in:
        return weights.clone()
    if strategy == 'average':
        block = weights.mean(1, keepdim=True)
    else:
        block = weights
    reps = math.ceil(new_in / block.shape[1])
    tiled = block.repeat(1, reps, 1, 1)[:, :new_in]
    return tiled * (c_in / new_in)


def _branch_layout(mode):
    """(backbone namespaces, neck namespaces, head namespaces) of a target topology."""
    if mode in (FusionMode.SINGLE, FusionMode.EARLY, FusionMode.SHARE_WEIGHT):
        return ('backbone',), ('neck',), ('head',)
    if mode in (FusionMode.MID, FusionMode.MID_P3):
        return ('rgb_backbone', 'ir_backbone'), ('neck',), ('head',)
    if mode is FusionMode.MID_TO_LATE:
        return ('rgb_backbone', 'ir_backbone'), ('rgb_neck', 'ir_neck'), ('head',)
    if mode is FusionMode.LATE:
        return ('rgb_backbone', 'ir_backbone'), ('rgb_neck', 'ir_neck'), ('rgb_head', 'ir_head')
    if mode is FusionMode.SCORE:
        return (('rgb_detector.backbone', 'ir_detector.backbone'),
                ('rgb_detector.neck', 'ir_detector.neck'),
                ('rgb_detector.head', 'ir_detector.head'))
    raise ConfigError(f"no transfer layout for fusion mode {mode.value}")


def _stem_channels(namespace, target):
    if target.fusion is FusionMode.EARLY:
        return target.in_channels
    if namespace.startswith('ir_'):
        return target.ir_channels
    return 3


def duplicate_backbone(src, target_mode, ir_channels=None, strategy='copy_scaled'):
    """
    Re-key a single-modality checkpoint for a fused topology.

    Backbone tensors go to every branch namespace (each stem channel-adapted
    to its modality), neck/head tensors are copied once or per branch. Early
    targets only get the input adaptation. The manifest records which target
    names were duplicated and which were channel-adapted.
    """
    target_mode = FusionMode.parse(target_mode)
    src_spec = src.spec
    if src_spec.fusion is not FusionMode.SINGLE:
        raise ConfigError(f"duplicate_backbone needs a single-modality checkpoint, got {src_spec.fusion.value}")
    target = ModelSpec(src_spec.scale, src_spec.num_classes, src_spec.reg_max, src_spec.strides, target_mode,
                       'rgb', ir_channels or src_spec.ir_channels, src_spec.combiner)
    backbones, necks, heads = _branch_layout(target_mode)
    tensors, duplicated, adapted = {}, [], {}
    for name, tensor in src.tensors.items():
        root, _, rest = name.partition('.')
        spaces = {'backbone': backbones, 'neck': necks, 'head': heads}.get(root)
        if spaces is None:
            continue
        for space in spaces:
            new_name = f"{space}.{rest}"
            value = tensor.clone()
            if name == STEM_WEIGHT:
                need = _stem_channels(space, target)
                if need != value.shape[1]:
                    use = 'average' if need < value.shape[1] else strategy
                    value = adapt_input_channels(value, need, use)
                    adapted[new_name] = use
            tensors[new_name] = value
            if len(spaces) > 1:
                duplicated.append(new_name)
    manifest = make_manifest(target, (), duplicated=sorted(duplicated), channel_adapted=adapted)
    logger.info(f"Duplicated checkpoint for {target_mode.value}: {len(duplicated)} duplicated, {len(adapted)} adapted")
    return Checkpoint(tensors, manifest)


@dataclass
class TransferReport:
    copied: list = field(default_factory=list)
    channel_adapted: dict = field(default_factory=dict)
    duplicated: list = field(default_factory=list)
    unmatched: list = field(default_factory=list)

    def names(self):
        return set(self.copied) | set(self.channel_adapted) | set(self.duplicated) | set(self.unmatched)

    def to_dict(self):
        return {
            'copied': list(self.copied),
            'channel_adapted': dict(self.channel_adapted),
            'duplicated': list(self.duplicated),
            'unmatched': list(self.unmatched),
        }

    def summary(self):
        return (f"copied={len(self.copied)} channel_adapted={len(self.channel_adapted)} "
                f"duplicated={len(self.duplicated)} unmatched={len(self.unmatched)}")


def load_with_transfer(ckpt, model, strategy='copy_scaled'):
    """
    Load every tensor the model can take from `ckpt`.

    Input-channel mismatches of 4-D kernels are adapted with `strategy`;
    names absent from the checkpoint keep their fresh initialization. Any
    other shape mismatch is an error naming the tensor.
    """
    state = model.state_dict()
    pre_duplicated = set(ckpt.manifest.get('duplicated', ()))
    pre_adapted = dict(ckpt.manifest.get('channel_adapted', {}))
    report = TransferReport()
    new_state = {}
    for name, target in state.items():
        if name not in ckpt.tensors:
            report.unmatched.append(name)
            new_state[name] = target
            continue
        src = ckpt.tensors[name]
        if src.shape != target.shape:
            channel_only = (src.ndim == 4 and target.ndim == 4 and src.shape[0] == target.shape[0]
                            and src.shape[2:] == target.shape[2:])
            if not channel_only:
                raise CheckpointError(name, f"shape {tuple(src.shape)} cannot map to {tuple(target.shape)}")
            use = 'average' if target.shape[1] < src.shape[1] else strategy
            src = adapt_input_channels(src, target.shape[1], use)
            report.channel_adapted[name] = use
        elif name in pre_adapted:
            report.channel_adapted[name] = pre_adapted[name]
        elif name in pre_duplicated:
            report.duplicated.append(name)
        else:
            report.copied.append(name)
        new_state[name] = src.to(dtype=target.dtype)
    model.load_state_dict(new_state, strict=True)
    logger.info(f"Transfer into {model.spec.fusion.value}: {report.summary()}")
    return model, report


def load_exact(ckpt, model):
    """Strict load; the first missing, unexpected or mis-shaped tensor is reported."""
    state = model.state_dict()
    for name in sorted(set(state) | set(ckpt.tensors)):
        if name not in ckpt.tensors:
            raise CheckpointError(name, "missing from checkpoint")
        if name not in state:
            raise CheckpointError(name, "not present in the model")
        if ckpt.tensors[name].shape != state[name].shape:
            raise CheckpointError(
                name, f"shape {tuple(ckpt.tensors[name].shape)} does not match model {tuple(state[name].shape)}")
    model.load_state_dict({k: v.to(dtype=state[k].dtype) for k, v in ckpt.tensors.items()}, strict=True)
    return model
