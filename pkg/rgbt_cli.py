"""
RGBT Detection - Command Line
=============================
python rgbt_cli.py <train|val|predict|finetune-mcf|transfer|features|info> [flags]

Settings come from a YAML run config (--config) with command-line flags on
top. Errors print `error: <category>` on the first line of stderr, then the
detail, and exit with status 2.
"""

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import yaml

from rgbt_core import LOG_DIR, OUTPUT_ROOT, ConfigError, RgbtError, setup_logging
from rgbt_data import AugmentConfig, PairedDataset, collate_pairs, load_manifest, load_paired_dataset, verify_alignment
from rgbt_fusion import build_fused_model, flop_count, junction_table, parameter_count
from rgbt_losses import LossWeights
from rgbt_mcf import build_mcf_model, freeze_report, mcf_from_checkpoint
from rgbt_model import (
    EVAL_CONF,
    PREDICT_CONF,
    STAGES,
    Detection,
    FusionMode,
    ModelSpec,
    draw_detections,
    extract_stage_features,
    model_inputs,
    predict,
    save_stage_image,
)
from rgbt_train import TrainConfig, train, validate
from rgbt_transfer import Checkpoint, checkpoint_from_model, duplicate_backbone, load_exact, load_with_transfer

logger = logging.getLogger('rgbt.cli')

COMMANDS = ('train', 'val', 'predict', 'finetune-mcf', 'transfer', 'features', 'info')
PATH_KEYS = ('data', 'weights')


@dataclass(frozen=True)
class RunConfig:
    data: str = None
    weights: str = None
    out: str = None
    fusion: str = 'mid'
    scale: str = 'n'
    modality: str = 'rgb'
    num_classes: int = None
    ir_channels: int = None
    combiner: str = 'concat'
    epochs: int = 1
    batch_size: int = 16
    img_size: int = 640
    seed: int = 0
    deterministic: bool = False
    preset: str = 'sgd'
    lambda_dfl: float = 1.0
    lambda_cls: float = 0.5
    lambda_loc: float = 0.05
    conf: float = None
    iou: float = 0.6
    flip_prob: float = 0.5
    scale_jitter: float = 0.0
    val_interval: int = 1
    max_iters: int = None
    workers: int = 0
    split: str = 'val'
    collapse_ir: bool = False
    primary: str = 'rgb'
    aux_init: str = 'transfer'
    strategy: str = 'copy_scaled'
    stage: str = None

    def __post_init__(self):
        for key in PATH_KEYS:
            value = getattr(self, key)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{key} path does not exist: {value}")
        FusionMode.parse(self.fusion)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config must be a mapping: {path}")
        return cls.from_dict(data)

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding='utf-8')

    def override(self, **values):
        values = {k: v for k, v in values.items() if v is not None}
        return dataclasses.replace(self, **values) if values else self

    def train_config(self, conf_default=EVAL_CONF):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            img_size=self.img_size,
            seed=self.seed,
            preset=self.preset,
            weights=LossWeights(self.lambda_dfl, self.lambda_cls, self.lambda_loc),
            deterministic=self.deterministic,
            augment=AugmentConfig(self.flip_prob, self.scale_jitter),
            conf_thresh=self.conf if self.conf is not None else conf_default,
            iou_thresh=self.iou,
            val_interval=self.val_interval,
            max_iters=self.max_iters,
            workers=self.workers,
        )


def build_parser():
    parser = argparse.ArgumentParser(prog='rgbt_cli.py', description="RGB + infrared object detection")
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', help="YAML run config")
    parser.add_argument('--data', help="dataset manifest (data.yaml)")
    parser.add_argument('--weights', help="checkpoint (.safetensors)")
    parser.add_argument('--fusion', help="single|early|mid|midp3|midtolate|late|score|shareweight")
    parser.add_argument('--scale', choices=('n', 's', 'm'))
    parser.add_argument('--modality', choices=('rgb', 'ir'), help="stream of a single-modality model")
    parser.add_argument('--preset', choices=('sgd-init', 'sgd', 'adam'))
    parser.add_argument('--primary', choices=('rgb', 'ir'), help="frozen modality for finetune-mcf")
    parser.add_argument('--strategy', choices=('average', 'copy_scaled'))
    parser.add_argument('--conf', type=float)
    parser.add_argument('--iou', type=float)
    parser.add_argument('--stage', choices=STAGES)
    parser.add_argument('--split', choices=('train', 'val'))
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--batch-size', type=int)
    parser.add_argument('--img-size', type=int)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--deterministic', action='store_true', default=None)
    parser.add_argument('--out', help="output directory")
    return parser


def resolve_config(args):
    config = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    return config.override(
        data=args.data, weights=args.weights, fusion=args.fusion, scale=args.scale, modality=args.modality,
        preset=args.preset, primary=args.primary, strategy=args.strategy, conf=args.conf, iou=args.iou,
        stage=args.stage, split=args.split, epochs=args.epochs, batch_size=args.batch_size,
        img_size=args.img_size, seed=args.seed, deterministic=args.deterministic, out=args.out,
    )


def _require(config, key, command):
    if getattr(config, key) is None:
        raise ConfigError(f"{command} needs --{key}")


def _manifest(config, command):
    _require(config, 'data', command)
    return load_manifest(config.data)


def model_spec(config, manifest=None):
    fusion = FusionMode.parse(config.fusion)
    num_classes = config.num_classes or (manifest.num_classes if manifest else 3)
    ir_channels = config.ir_channels or (manifest.ir_channels if manifest else 1)
    return ModelSpec(config.scale, num_classes, fusion=fusion, modality=config.modality,
                     ir_channels=ir_channels, combiner=config.combiner)


def policy_for(spec):
    return spec.modality if spec.fusion is FusionMode.SINGLE else 'both'


def model_from_checkpoint(ckpt):
    spec = ckpt.spec
    if spec.fusion is FusionMode.MCF:
        return mcf_from_checkpoint(ckpt)
    return load_exact(ckpt, build_fused_model(spec))


def load_split(manifest, split, spec, config):
    dataset = load_paired_dataset(manifest.root, split, policy_for(spec), manifest.num_classes,
                                  config.collapse_ir, max(1, config.workers))
    if spec.fusion is not FusionMode.SINGLE:
        report = verify_alignment(dataset)
        if not report.usable_for_fusion:
            raise ConfigError(f"{split} split is not usable for fusion: {len(report.violations)} misaligned pairs"
                              + (" (empty)" if report.empty else ""))
    return dataset


def output_path(config, command):
    out = Path(config.out) if config.out else OUTPUT_ROOT / command
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / 'run_config.yaml')
    return out


def cmd_train(config):
    manifest = _manifest(config, 'train')
    spec = model_spec(config, manifest)
    out = output_path(config, 'train')
    model = build_fused_model(spec, config.seed, policy_for(spec))
    if config.weights:
        ckpt = Checkpoint.load(config.weights)
        if ckpt.spec.fusion is FusionMode.SINGLE and spec.fusion.is_dual_stream:
            ckpt = duplicate_backbone(ckpt, spec.fusion, spec.ir_channels, config.strategy)
        _, report = load_with_transfer(ckpt, model, config.strategy)
        (out / 'transfer_report.yaml').write_text(yaml.safe_dump(report.to_dict()), encoding='utf-8')
    train_set = load_split(manifest, manifest.train, spec, config)
    val_set = load_split(manifest, manifest.val, spec, config)
    result = train(model, train_set, config.train_config(), out, val_set)
    print(f"✓ Trained {len(result.iterations)} iterations, best mAP: {result.best_map}")
    print(f"  Weights: {out / 'weights'}")
    return 0


def cmd_val(config):
    _require(config, 'weights', 'val')
    manifest = _manifest(config, 'val')
    model = model_from_checkpoint(Checkpoint.load(config.weights))
    out = output_path(config, 'val')
    dataset = load_split(manifest, config.split, model.spec, config)
    report = validate(model, dataset, config.train_config(), manifest.names)
    text = report.to_text()
    (out / 'metrics.txt').write_text(text, encoding='utf-8')
    (out / 'metrics.yaml').write_text(yaml.safe_dump(report.to_dict(), sort_keys=False), encoding='utf-8')
    print(text, end='')
    return 0


def _source_box(transform, box, width, height):
    x1, y1, x2, y2 = transform.invert_xyxy_pixels(*box)
    return (min(max(x1, 0.0), width), min(max(y1, 0.0), height),
            min(max(x2, 0.0), width), min(max(y2, 0.0), height))


def cmd_predict(config):
    _require(config, 'weights', 'predict')
    manifest = _manifest(config, 'predict')
    model = model_from_checkpoint(Checkpoint.load(config.weights))
    out = output_path(config, 'predict')
    dataset = load_split(manifest, config.split, model.spec, config)
    run = config.train_config(conf_default=PREDICT_CONF)
    by_id = {s.image_id: s for s in dataset}
    loader_set = PairedDataset(dataset, run.img_size)
    count = 0
    for start in range(0, len(loader_set), run.batch_size):
        batch = collate_pairs([loader_set[i] for i in range(start, min(start + run.batch_size, len(loader_set)))])
        dets = predict(model, batch, run.conf_thresh, run.iou_thresh, run.max_det)
        for image_id, transform, image_dets in zip(batch['image_ids'], batch['transforms'], dets):
            sample = by_id[image_id]
            h, w = sample.size
            mapped = [(d, _source_box(transform, d.box, w, h)) for d in image_dets]
            lines = [f"{d.class_id} {d.score:.6f} {' '.join(f'{v:.2f}' for v in box)}" for d, box in mapped]
            (out / f"{image_id}.txt").write_text("".join(line + "\n" for line in lines), encoding='utf-8')
            image = sample.rgb if sample.rgb is not None else sample.ir
            drawable = [Detection(d.class_id, d.score, box) for d, box in mapped if box[2] > box[0] and box[3] > box[1]]
            cv2.imwrite(str(out / f"{image_id}.jpg"), draw_detections(np.asarray(image), drawable, manifest.names))
            count += len(lines)
    print(f"✓ {count} detections for {len(dataset)} images written to {out}")
    return 0


def cmd_finetune_mcf(config):
    _require(config, 'weights', 'finetune-mcf')
    manifest = _manifest(config, 'finetune-mcf')
    base_ckpt = Checkpoint.load(config.weights)
    base_spec = base_ckpt.spec
    spec = ModelSpec(base_spec.scale, base_spec.num_classes, base_spec.reg_max, base_spec.strides,
                     FusionMode.MCF, config.primary, config.ir_channels or manifest.ir_channels)
    model = build_mcf_model(base_ckpt, spec, config.primary, config.aux_init, config.strategy, config.seed)
    out = output_path(config, 'finetune-mcf')
    (out / 'freeze_report.yaml').write_text(yaml.safe_dump(freeze_report(model).to_dict(), sort_keys=False),
                                            encoding='utf-8')
    train_set = load_split(manifest, manifest.train, model.spec, config)
    val_set = load_split(manifest, manifest.val, model.spec, config)
    result = train(model, train_set, config.train_config(), out, val_set)
    print(f"✓ MCF fine-tuned {len(result.iterations)} iterations, best mAP: {result.best_map}")
    return 0


def cmd_transfer(config):
    _require(config, 'weights', 'transfer')
    src = Checkpoint.load(config.weights)
    target_mode = FusionMode.parse(config.fusion)
    s = src.spec
    spec = ModelSpec(s.scale, s.num_classes, s.reg_max, s.strides, target_mode, s.modality,
                     config.ir_channels or s.ir_channels, config.combiner)
    model = build_fused_model(spec, config.seed)
    ckpt = duplicate_backbone(src, target_mode, spec.ir_channels, config.strategy) \
        if s.fusion is FusionMode.SINGLE and target_mode.is_dual_stream else src
    _, report = load_with_transfer(ckpt, model, config.strategy)
    out = output_path(config, 'transfer')
    checkpoint_from_model(model).save(out / 'transferred.safetensors')
    (out / 'transfer_report.yaml').write_text(yaml.safe_dump(report.to_dict()), encoding='utf-8')
    print(f"✓ Transfer into {target_mode.value}: {report.summary()}")
    return 0


def cmd_features(config):
    _require(config, 'weights', 'features')
    _require(config, 'stage', 'features')
    manifest = _manifest(config, 'features')
    model = model_from_checkpoint(Checkpoint.load(config.weights))
    out = output_path(config, 'features')
    dataset = load_split(manifest, config.split, model.spec, config)
    items = PairedDataset(dataset, config.img_size)
    for i in range(len(items)):
        batch = collate_pairs([items[i]])
        image = extract_stage_features(model, model_inputs(model.spec, batch), config.stage)
        save_stage_image(out, batch['image_ids'][0], config.stage, image)
    print(f"✓ {len(items)} {config.stage} feature maps written to {out}")
    return 0


def cmd_info(config):
    if config.weights:
        model = model_from_checkpoint(Checkpoint.load(config.weights))
    else:
        manifest = load_manifest(config.data) if config.data else None
        model = build_fused_model(model_spec(config, manifest), config.seed)
    spec = model.spec
    print(f"fusion: {spec.fusion.value}  scale: {spec.scale}  classes: {spec.num_classes}")
    print(f"parameters: {parameter_count(model)}")
    print(f"GFLOPs@{config.img_size}: {flop_count(model, config.img_size):.3f}")
    rows = junction_table(model)
    if rows:
        print(f"{'stage':<12}{'combiner':<16}{'channels':>10}{'params':>10}")
        for stage, combiner, channels, params in rows:
            print(f"{stage:<12}{combiner:<16}{channels:>10}{params:>10}")
    return 0


HANDLERS = {
    'train': cmd_train,
    'val': cmd_val,
    'predict': cmd_predict,
    'finetune-mcf': cmd_finetune_mcf,
    'transfer': cmd_transfer,
    'features': cmd_features,
    'info': cmd_info,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(LOG_DIR)
    try:
        config = resolve_config(args)
        return HANDLERS[args.command](config)
    except RgbtError as exc:
        # the category line comes first on stderr, before any log output
        print(exc.one_line(), file=sys.stderr)
        print(exc.message, file=sys.stderr)
        logger.error(f"{args.command}: {exc.category}: {exc.message}")
        return 2
    except Exception as exc:
        print("error: internal", file=sys.stderr)
        print(str(exc), file=sys.stderr)
        logger.exception(f"{args.command}: unexpected error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
