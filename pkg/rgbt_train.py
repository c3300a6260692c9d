"""
RGBT Detection - Training Loop
==============================
Optimizer presets with linear warmup, parameter groups, the epoch loop with
CSV run logs and safetensors checkpoints, and validation.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import psutil
import torch
import torch.nn as nn
from torch.utils.data import DataLoader

from rgbt_core import CSVLogger, ConfigError, DatasetError, TrainingError, set_deterministic
from rgbt_data import AugmentConfig, PairedDataset, collate_pairs
from rgbt_losses import DetectionLoss, LossWeights
from rgbt_mcf import check_optimizer
from rgbt_metrics import GtBox, evaluate_detections
from rgbt_model import EVAL_CONF, EVAL_IOU, MAX_DET, FusionMode, model_inputs, predict
from rgbt_transfer import checkpoint_from_model

logger = logging.getLogger('rgbt.train')

NOMINAL_MOMENTUM = 0.937
WEIGHT_DECAY = 5e-4
FINAL_LR_FACTOR = 0.01

ITERATION_COLUMNS = ['iter', 'lr', 'momentum', 'l_dfl', 'l_cls', 'l_loc', 'l_all']
EPOCH_COLUMNS = ['epoch', 'mAP50', 'mAP']
RESOURCE_COLUMNS = ['epoch', 'rss_mb']


@dataclass(frozen=True)
class OptimizerPreset:
    name: str
    lr0: float
    warmup_epochs: float
    warmup_momentum: float
    warmup_bias_lr: float
    momentum: float = NOMINAL_MOMENTUM
    optimizer: str = 'sgd'


PRESETS = {
    'sgd-init': OptimizerPreset('sgd-init', 0.01, 3.0, 0.8, 0.1),
    'sgd': OptimizerPreset('sgd', 0.01, 1.0, 0.1, 0.01),
    'adam': OptimizerPreset('adam', 0.001, 1.0, 0.1, 0.01, optimizer='adam'),
}


def get_preset(preset):
    if isinstance(preset, OptimizerPreset):
        return preset
    if preset not in PRESETS:
        raise ConfigError(f"unknown optimizer preset '{preset}' (expected one of: {', '.join(PRESETS)})")
    return PRESETS[preset]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 16
    img_size: int = 640
    seed: int = 0
    preset: str = 'sgd'
    weights: LossWeights = field(default_factory=LossWeights)
    weight_decay: float = WEIGHT_DECAY
    deterministic: bool = False
    freeze: tuple = ()
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    conf_thresh: float = EVAL_CONF
    iou_thresh: float = EVAL_IOU
    max_det: int = MAX_DET
    val_interval: int = 1
    max_iters: int = None
    workers: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.img_size % 32:
            raise ConfigError(f"img_size must be a multiple of 32, got {self.img_size}")
        if self.max_iters is not None and self.max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {self.max_iters}")
        get_preset(self.preset)


def _lerp(a, b, f):
    return a * (1.0 - f) + b * f


def warmup_schedule(iteration, total_warmup_iters, preset, total_iters=None):
    """
    (weight lr, bias lr, momentum) at `iteration`.

    Linear warmup over [0, total_warmup_iters]; afterwards both learning
    rates decay linearly to FINAL_LR_FACTOR * lr0 at `total_iters`.
    """
    preset = get_preset(preset)
    if total_warmup_iters < 1:
        raise ConfigError(f"total_warmup_iters must be >= 1, got {total_warmup_iters}")
    if iteration <= total_warmup_iters:
        f = iteration / total_warmup_iters
        return (
            _lerp(0.0, preset.lr0, f),
            _lerp(preset.warmup_bias_lr, preset.lr0, f),
            _lerp(preset.warmup_momentum, preset.momentum, f),
        )
    if total_iters is None or total_iters <= total_warmup_iters:
        return preset.lr0, preset.lr0, preset.momentum
    f = min(1.0, (iteration - total_warmup_iters) / (total_iters - total_warmup_iters))
    lr = _lerp(preset.lr0, FINAL_LR_FACTOR * preset.lr0, f)
    return lr, lr, preset.momentum


def build_optimizer(model, preset, weight_decay=WEIGHT_DECAY):
    """Three groups: normalization weights (no decay), other weights (decay), biases."""
    preset = get_preset(preset)
    groups = {'norm': [], 'weight': [], 'bias': []}
    for module in model.modules():
        for pname, p in module.named_parameters(recurse=False):
            if not p.requires_grad:
                continue
            if pname == 'bias':
                groups['bias'].append(p)
            elif isinstance(module, nn.modules.batchnorm._BatchNorm):
                groups['norm'].append(p)
            else:
                groups['weight'].append(p)
    param_groups = [
        {'params': params, 'kind': kind, 'weight_decay': weight_decay if kind == 'weight' else 0.0}
        for kind, params in groups.items() if params
    ]
    if not param_groups:
        raise ConfigError("model has no trainable parameters")
    if preset.optimizer == 'adam':
        return torch.optim.Adam(param_groups, lr=preset.lr0, betas=(preset.momentum, 0.999))
    return torch.optim.SGD(param_groups, lr=preset.lr0, momentum=preset.momentum, nesterov=True)


def apply_schedule(optimizer, lr_weights, lr_bias, momentum):
    for group in optimizer.param_groups:
        group['lr'] = lr_bias if group.get('kind') == 'bias' else lr_weights
        if 'betas' in group:
            group['betas'] = (momentum, group['betas'][1])
        else:
            group['momentum'] = momentum


def apply_freeze(model, prefixes):
    for name, p in model.named_parameters():
        if any(name == pre or name.startswith(pre + '.') for pre in prefixes):
            p.requires_grad_(False)


def check_compatible(model, samples):
    """Every sample must carry the modalities the model consumes."""
    spec = model.spec
    need = ('rgb', 'ir') if spec.fusion is not FusionMode.SINGLE else (spec.modality,)
    for s in samples:
        missing = [m for m in need if getattr(s, m) is None]
        if missing:
            raise ConfigError(f"sample {s.image_id} lacks {', '.join(missing)} images needed by "
                              f"fusion mode {spec.fusion.value}")


def _check_finite(parts, iteration):
    for key, value in parts.as_dict().items():
        if not math.isfinite(float(value.detach())):
            raise TrainingError(key, f"non-finite loss {float(value.detach())} at iteration {iteration}")


@dataclass
class TrainResult:
    checkpoint: object
    iterations: list
    epochs: list
    best_map: float = None
    out_dir: Path = None


def _loader(samples, config, augment, shuffle):
    dataset = PairedDataset(samples, config.img_size, augment, config.seed)
    generator = torch.Generator()
    generator.manual_seed(config.seed)
    loader = DataLoader(dataset, batch_size=config.batch_size, shuffle=shuffle, collate_fn=collate_pairs,
                        num_workers=0 if config.deterministic else config.workers, generator=generator)
    return dataset, loader


def train(model, dataset, config, out_dir, val_dataset=None):
    """
    Train `model` in place. Writes iterations.csv, epochs.csv, resources.csv
    and weights/{last,best}.safetensors under `out_dir`.
    """
    if len(dataset) == 0:
        raise DatasetError("training set is empty")
    check_compatible(model, dataset)
    set_deterministic(config.seed, config.deterministic)
    out_dir = Path(out_dir)
    weights_dir = out_dir / 'weights'
    weights_dir.mkdir(parents=True, exist_ok=True)

    preset = get_preset(config.preset)
    apply_freeze(model, config.freeze)
    optimizer = build_optimizer(model, preset, config.weight_decay)
    if getattr(model, 'frozen_prefixes', ()):
        check_optimizer(model, optimizer)
    loss_fn = DetectionLoss(config.weights)
    train_set, loader = _loader(dataset, config, config.augment, shuffle=True)

    iters_per_epoch = len(loader)
    total_iters = config.epochs * iters_per_epoch
    if config.max_iters is not None:
        total_iters = min(total_iters, config.max_iters)
    warmup_iters = max(round(preset.warmup_epochs * iters_per_epoch), 1)

    iter_log = CSVLogger(out_dir / 'iterations.csv', ITERATION_COLUMNS)
    epoch_log = CSVLogger(out_dir / 'epochs.csv', EPOCH_COLUMNS)
    resource_log = CSVLogger(out_dir / 'resources.csv', RESOURCE_COLUMNS)
    process = psutil.Process()

    logger.info(f"Training {model.spec.fusion.value} ({model.spec.scale}) on {len(dataset)} images: "
                f"{config.epochs} epochs x {iters_per_epoch} iterations, preset {preset.name}")
    iterations, epochs = [], []
    best_map = None
    iteration = 0
    for epoch in range(config.epochs):
        if iteration >= total_iters:
            break
        train_set.set_epoch(epoch)
        model.train()
        for batch in loader:
            if iteration >= total_iters:
                break
            lr_w, lr_b, momentum = warmup_schedule(iteration, warmup_iters, preset, total_iters)
            apply_schedule(optimizer, lr_w, lr_b, momentum)
            heads = model.head_outputs(*model_inputs(model.spec, batch))
            parts = loss_fn(heads, batch['targets'])
            _check_finite(parts, iteration)
            optimizer.zero_grad()
            parts.total.backward()
            optimizer.step()

            row = {'iter': iteration, 'lr': float(lr_w), 'momentum': float(momentum)}
            row.update({k: float(v.detach()) for k, v in parts.as_dict().items()})
            iter_log.log_data(row)
            iterations.append(row)
            iteration += 1

        last = epoch == config.epochs - 1 or iteration >= total_iters
        row = {'epoch': epoch, 'mAP50': '', 'mAP': ''}
        if val_dataset is not None and (last or (config.val_interval and (epoch + 1) % config.val_interval == 0)):
            report = validate(model, val_dataset, config)
            row.update({'mAP50': report.map50, 'mAP': report.map})
            current = report.map if report.map is not None else -1.0
            if best_map is None or current > best_map:
                best_map = current
                checkpoint_from_model(model).save(weights_dir / 'best.safetensors')
            logger.info(f"Epoch {epoch}: mAP50={report.map50} mAP={report.map}")
        epoch_log.log_data(row)
        epochs.append(row)
        resource_log.log_data({'epoch': epoch, 'rss_mb': process.memory_info().rss / 2 ** 20})
        checkpoint_from_model(model).save(weights_dir / 'last.safetensors')

    ckpt = checkpoint_from_model(model)
    ckpt.save(weights_dir / 'last.safetensors')
    if best_map is None:
        ckpt.save(weights_dir / 'best.safetensors')
    logger.info(f"Training finished after {iteration} iterations, best mAP {best_map}")
    return TrainResult(ckpt, iterations, epochs, best_map, out_dir)


def targets_to_gts(targets):
    return [GtBox(int(t[0]), tuple(float(v) for v in t[1:5])) for t in targets.tolist()]


def collect_predictions(model, samples, config):
    """(detections, ground truths, image ids) per image in letterboxed pixel coordinates."""
    _, loader = _loader(samples, config, None, shuffle=False)
    dets, gts, ids = [], [], []
    for batch in loader:
        dets.extend(predict(model, batch, config.conf_thresh, config.iou_thresh, config.max_det))
        gts.extend(targets_to_gts(t) for t in batch['targets'])
        ids.extend(batch['image_ids'])
    return dets, gts, ids


def validate(model, dataset, config, names=None):
    """Decode -> NMS -> metrics over a validation set."""
    if len(dataset) == 0:
        raise DatasetError("validation set is empty")
    check_compatible(model, dataset)
    was_training = model.training
    dets, gts, _ = collect_predictions(model, dataset, config)
    model.train(was_training)
    return evaluate_detections(dets, gts, model.spec.num_classes, names)
