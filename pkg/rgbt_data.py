"""
Paired visible/infrared dataset pipeline.

Directory convention (FLIR/LLVIP repackagings):

    <root>/images/visible/<split>/<stem>.<ext>
    <root>/images/infrared/<split>/<stem>.<ext>
    <root>/labels/<split>/<stem>.txt      # "class cx cy w h" per line, normalized

Samples are paired by filename stem and returned in lexicographic stem order.
"""

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
import torch
import yaml
from torch.utils.data import Dataset

from rgbt_core import ConfigError, DatasetError, DomainError, LabelParseError

logger = logging.getLogger('rgbt.data')

IMAGE_SUFFIXES = ('.jpg', '.jpeg', '.png', '.bmp', '.tif', '.tiff')
SPLITS = ('train', 'val')
MODALITY_POLICIES = ('rgb', 'ir', 'both')
MAX_STRIDE = 32
PAD_VALUE = 114
MIN_BOX_SIZE = 1e-4


@dataclass(frozen=True)
class GroundTruthBox:
    """Normalized center-format box."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.class_id < 0:
            raise DomainError(f"class_id must be >= 0, got {self.class_id}")
        for name in ('cx', 'cy', 'w', 'h'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"{name}={value} outside [0, 1]")
        if self.w <= 0 or self.h <= 0:
            raise DomainError(f"box must have positive size, got w={self.w} h={self.h}")

    def xyxy(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_xyxy(cls, class_id, x1, y1, x2, y2):
        return cls(int(class_id), (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def _freeze(array):
    if array is None:
        return None
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class PairedSample:
    """One RGB/IR pair with its boxes. Arrays are read-only."""

    image_id: str
    rgb: np.ndarray
    ir: np.ndarray
    boxes: tuple = ()
    source_split: str = 'train'

    def __post_init__(self):
        if self.rgb is None and self.ir is None:
            raise DatasetError(f"{self.image_id}: sample needs at least one modality")
        object.__setattr__(self, 'rgb', _freeze(self.rgb))
        object.__setattr__(self, 'ir', _freeze(self.ir))
        object.__setattr__(self, 'boxes', tuple(self.boxes))
        if self.rgb is not None and (self.rgb.ndim != 3 or self.rgb.shape[2] != 3):
            raise DatasetError(f"{self.image_id}: rgb must be HxWx3, got {self.rgb.shape}")
        if self.ir is not None and (self.ir.ndim != 3 or self.ir.shape[2] not in (1, 3)):
            raise DatasetError(f"{self.image_id}: ir must be HxWx1 or HxWx3, got {self.ir.shape}")
        if self.source_split not in SPLITS:
            raise DatasetError(f"unknown split {self.source_split}")

    @property
    def size(self):
        """(H, W) of the primary available modality."""
        image = self.rgb if self.rgb is not None else self.ir
        return image.shape[0], image.shape[1]

    @property
    def is_aligned(self):
        if self.rgb is None or self.ir is None:
            return True
        return self.rgb.shape[:2] == self.ir.shape[:2]


@dataclass(frozen=True)
class ExclusionEntry:
    stem: str
    missing: tuple


class PairedSplit(Sequence):
    """Ordered, immutable list of samples plus the stems that could not be paired."""

    def __init__(self, samples, exclusions=(), split='train', policy='both'):
        self._samples = tuple(samples)
        self.exclusions = tuple(exclusions)
        self.split = split
        self.policy = policy

    def __len__(self):
        return len(self._samples)

    def __getitem__(self, index):
        return self._samples[index]

    def __iter__(self):
        return iter(self._samples)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    num_classes: int
    names: tuple
    train: str = 'train'
    val: str = 'val'
    ir_channels: int = 1


def load_manifest(path):
    """Load a dataset manifest (YAML: num_classes, names, train, val[, path, ir_channels])."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset manifest not found: {path}")
    data = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"dataset manifest must be a mapping: {path}")
    known = {'path', 'num_classes', 'names', 'train', 'val', 'ir_channels'}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown manifest keys {sorted(unknown)} in {path}")
    try:
        num_classes = int(data['num_classes'])
    except KeyError:
        raise ConfigError(f"manifest {path} is missing num_classes") from None
    names = tuple(data.get('names') or [str(i) for i in range(num_classes)])
    if len(names) != num_classes:
        raise ConfigError(f"manifest {path}: {len(names)} names for {num_classes} classes")
    root = Path(data.get('path', path.parent))
    if not root.is_absolute():
        root = (path.parent / root).resolve()
    ir_channels = int(data.get('ir_channels', 1))
    if ir_channels not in (1, 3):
        raise ConfigError(f"manifest {path}: ir_channels must be 1 or 3")
    return DatasetManifest(root, num_classes, names, data.get('train', 'train'), data.get('val', 'val'), ir_channels)


def parse_label_file(path, num_classes=None):
    """Parse one label file into GroundTruthBox list. Empty file -> no boxes."""
    boxes = []
    raw = Path(path).read_bytes()
    try:
        text = raw.decode('ascii')
    except UnicodeDecodeError as exc:
        line_no = raw.count(b'\n', 0, exc.start) + 1
        raise LabelParseError(path, line_no, f"non-ASCII byte 0x{raw[exc.start]:02x}") from None
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise LabelParseError(path, line_no, f"expected 5 fields, got {len(fields)}")
        try:
            values = [float(v) for v in fields]
        except ValueError:
            raise LabelParseError(path, line_no, f"non-numeric field in '{line.strip()}'") from None
        if not all(math.isfinite(v) for v in values):
            raise LabelParseError(path, line_no, f"non-finite field in '{line.strip()}'")
        class_value = values[0]
        if class_value != int(class_value) or class_value < 0:
            raise LabelParseError(path, line_no, f"invalid class id {fields[0]}")
        if num_classes is not None and int(class_value) >= num_classes:
            raise LabelParseError(path, line_no, f"class id {int(class_value)} >= num_classes {num_classes}")
        try:
            boxes.append(GroundTruthBox(int(class_value), *values[1:]))
        except DomainError as exc:
            raise LabelParseError(path, line_no, exc.message) from None
    return boxes


def _index_images(directory):
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def read_rgb(path):
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise DatasetError(f"cannot read image {path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def read_ir(path, collapse=False):
    """Read an 8-bit IR image as HxWx1 or HxWx3; 3 identical channels collapse on request."""
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DatasetError(f"cannot read image {path}")
    if image.dtype != np.uint8:
        raise DatasetError(f"{path}: expected 8-bit image, got {image.dtype}")
    if image.ndim == 2:
        return image[..., None]
    if image.shape[2] == 4:
        image = image[..., :3]
    image = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
    if collapse and np.array_equal(image[..., 0], image[..., 1]) and np.array_equal(image[..., 0], image[..., 2]):
        return np.ascontiguousarray(image[..., :1])
    return image


def load_paired_dataset(root, split, modality_policy='both', num_classes=None, collapse_ir=False, workers=4):
    """
    Load one split, pairing RGB, IR and label files by stem.

    Stems missing a required file are excluded and reported (logged and
    listed in `PairedSplit.exclusions`).
    """
    root = Path(root)
    if split not in SPLITS:
        raise ConfigError(f"unknown split '{split}', expected one of {SPLITS}")
    if modality_policy not in MODALITY_POLICIES:
        raise ConfigError(f"unknown modality policy '{modality_policy}'")

    rgb_dir = root / 'images' / 'visible' / split
    ir_dir = root / 'images' / 'infrared' / split
    label_dir = root / 'labels' / split
    required = [label_dir]
    if modality_policy in ('rgb', 'both'):
        required.append(rgb_dir)
    if modality_policy in ('ir', 'both'):
        required.append(ir_dir)
    for directory in required:
        if not directory.is_dir():
            raise ConfigError(f"missing dataset directory: {directory}")

    rgb_files = _index_images(rgb_dir)
    ir_files = _index_images(ir_dir)
    label_files = {p.stem: p for p in sorted(label_dir.glob('*.txt'))}

    want_rgb = modality_policy in ('rgb', 'both')
    want_ir = modality_policy in ('ir', 'both')
    all_stems = set(label_files)
    if want_rgb:
        all_stems |= set(rgb_files)
    if want_ir:
        all_stems |= set(ir_files)

    paired, exclusions = [], []
    for stem in sorted(all_stems):
        missing = []
        if want_rgb and stem not in rgb_files:
            missing.append('rgb')
        if want_ir and stem not in ir_files:
            missing.append('ir')
        if stem not in label_files:
            missing.append('label')
        if missing:
            exclusions.append(ExclusionEntry(stem, tuple(missing)))
        else:
            paired.append(stem)

    for entry in exclusions:
        logger.warning(f"{split}/{entry.stem}: excluded, missing {', '.join(entry.missing)}")

    def load_one(stem):
        boxes = parse_label_file(label_files[stem], num_classes)
        rgb = read_rgb(rgb_files[stem]) if want_rgb else None
        ir = read_ir(ir_files[stem], collapse=collapse_ir) if want_ir else None
        return PairedSample(stem, rgb, ir, tuple(boxes), split)

    # map() keeps submission order, so the result is independent of scheduling
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        samples = list(pool.map(load_one, paired))

    logger.info(f"Loaded {len(samples)} {split} samples from {root} ({len(exclusions)} excluded)")
    return PairedSplit(samples, exclusions, split, modality_policy)


@dataclass(frozen=True)
class AlignmentReport:
    violations: tuple = ()
    empty: bool = False

    @property
    def usable_for_fusion(self):
        return not self.violations and not self.empty


def verify_alignment(dataset):
    """List every pair whose modality shapes differ (H, W)."""
    violations = []
    count = 0
    for sample in dataset:
        count += 1
        if not sample.is_aligned:
            violations.append((sample.image_id, tuple(sample.rgb.shape[:2]), tuple(sample.ir.shape[:2])))
    if count == 0:
        logger.warning("verify_alignment: dataset has no samples")
    for image_id, rgb_shape, ir_shape in violations:
        logger.warning(f"{image_id}: rgb {rgb_shape} vs ir {ir_shape}")
    return AlignmentReport(tuple(violations), empty=count == 0)


def _clip01(*values):
    # float noise can push edge boxes a hair outside [0, 1]
    return [min(max(v, 0.0), 1.0) for v in values]


@dataclass(frozen=True)
class LetterboxTransform:
    """Maps normalized source coordinates into the padded square canvas."""

    scale: float
    pad_x: int
    pad_y: int
    target: int = 640
    src_w: int = 640
    src_h: int = 640

    def apply_box(self, box):
        cx = (box.cx * self.src_w * self.scale + self.pad_x) / self.target
        cy = (box.cy * self.src_h * self.scale + self.pad_y) / self.target
        w = box.w * self.src_w * self.scale / self.target
        h = box.h * self.src_h * self.scale / self.target
        return GroundTruthBox(box.class_id, *_clip01(cx, cy, w, h))

    def invert_box(self, box):
        cx = (box.cx * self.target - self.pad_x) / (self.src_w * self.scale)
        cy = (box.cy * self.target - self.pad_y) / (self.src_h * self.scale)
        w = box.w * self.target / (self.src_w * self.scale)
        h = box.h * self.target / (self.src_h * self.scale)
        return GroundTruthBox(box.class_id, *_clip01(cx, cy, w, h))

    def invert_xyxy_pixels(self, x1, y1, x2, y2):
        """Canvas pixels -> source image pixels."""
        return (
            (x1 - self.pad_x) / self.scale,
            (y1 - self.pad_y) / self.scale,
            (x2 - self.pad_x) / self.scale,
            (y2 - self.pad_y) / self.scale,
        )


def _pad_image(image, new_w, new_h, target, left, top):
    if (image.shape[1], image.shape[0]) != (new_w, new_h):
        resized = cv2.resize(image, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
        if resized.ndim == 2:
            resized = resized[..., None]
    else:
        resized = image
    canvas = np.full((target, target, image.shape[2]), PAD_VALUE, dtype=image.dtype)
    canvas[top:top + new_h, left:left + new_w] = resized
    return canvas


def letterbox(sample, target=640):
    """Aspect-preserving resize of both modalities onto a `target` square canvas."""
    if target % MAX_STRIDE != 0:
        raise ConfigError(f"letterbox target {target} is not divisible by {MAX_STRIDE}")
    h0, w0 = sample.size
    scale = min(target / w0, target / h0)
    new_w, new_h = int(round(w0 * scale)), int(round(h0 * scale))
    left = (target - new_w) // 2
    top = (target - new_h) // 2
    transform = LetterboxTransform(scale, left, top, target, w0, h0)

    if (w0, h0) == (target, target):
        return sample, transform

    rgb = _pad_image(sample.rgb, new_w, new_h, target, left, top) if sample.rgb is not None else None
    ir = _pad_image(sample.ir, new_w, new_h, target, left, top) if sample.ir is not None else None
    boxes = tuple(transform.apply_box(b) for b in sample.boxes)
    return PairedSample(sample.image_id, rgb, ir, boxes, sample.source_split), transform


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    scale_jitter: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.scale_jitter < 1.0:
            raise ConfigError(f"scale_jitter must be in [0, 1), got {self.scale_jitter}")


def _zoom(image, factor):
    h, w = image.shape[:2]
    matrix = np.array([[factor, 0.0, (1 - factor) * w / 2], [0.0, factor, (1 - factor) * h / 2]], dtype=np.float64)
    border = (PAD_VALUE,) * image.shape[2]
    out = cv2.warpAffine(image, matrix, (w, h), flags=cv2.INTER_LINEAR, borderValue=border)
    if out.ndim == 2:
        out = out[..., None]
    return out


def _remap_box(box, flip, factor):
    x1, y1, x2, y2 = box.xyxy()
    if flip:
        x1, x2 = 1.0 - x2, 1.0 - x1
    if factor != 1.0:
        x1, x2 = (x1 - 0.5) * factor + 0.5, (x2 - 0.5) * factor + 0.5
        y1, y2 = (y1 - 0.5) * factor + 0.5, (y2 - 0.5) * factor + 0.5
    if x2 <= 0.0 or y2 <= 0.0 or x1 >= 1.0 or y1 >= 1.0:
        return None
    x1, y1 = max(x1, 0.0), max(y1, 0.0)
    x2, y2 = min(x2, 1.0), min(y2, 1.0)
    if x2 - x1 < MIN_BOX_SIZE:
        x2 = min(x1 + MIN_BOX_SIZE, 1.0)
        x1 = x2 - MIN_BOX_SIZE
    if y2 - y1 < MIN_BOX_SIZE:
        y2 = min(y1 + MIN_BOX_SIZE, 1.0)
        y1 = y2 - MIN_BOX_SIZE
    if flip and factor == 1.0:
        # exact reflection of the center keeps cx' == 1 - cx bit for bit
        return GroundTruthBox(box.class_id, 1.0 - box.cx, box.cy, box.w, box.h)
    return GroundTruthBox.from_xyxy(box.class_id, x1, y1, x2, y2)


def augment(sample, config, seed):
    """Horizontal flip + scale jitter, applied identically to both modalities and all boxes."""
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < config.flip_prob)
    jitter = rng.uniform(-config.scale_jitter, config.scale_jitter) if config.scale_jitter > 0 else 0.0
    factor = 1.0 + float(jitter)

    def transform(image):
        if image is None:
            return None
        out = image
        if flip:
            out = np.ascontiguousarray(out[:, ::-1])
        if factor != 1.0:
            out = _zoom(out, factor)
        return out

    boxes = []
    for box in sample.boxes:
        if not flip and factor == 1.0:
            boxes.append(box)
            continue
        new_box = _remap_box(box, flip, factor)
        if new_box is not None:
            boxes.append(new_box)
    return replace(sample, rgb=transform(sample.rgb), ir=transform(sample.ir), boxes=tuple(boxes))


def boxes_to_targets(boxes, img_size):
    """GroundTruthBox list -> (n, 5) float tensor [class, x1, y1, x2, y2] in pixels."""
    if not boxes:
        return torch.zeros((0, 5), dtype=torch.float32)
    rows = [[b.class_id, *(v * img_size for v in b.xyxy())] for b in boxes]
    return torch.tensor(rows, dtype=torch.float32)


def image_to_tensor(image):
    """HxWxC uint8 -> CxHxW float32 in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float().div_(255.0)


class PairedDataset(Dataset):
    """Letterboxed (and optionally augmented) tensors for training and validation."""

    def __init__(self, samples, img_size=640, augment_config=None, seed=0):
        self.samples = samples
        self.img_size = img_size
        self.augment_config = augment_config
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        sample, transform = letterbox(self.samples[index], self.img_size)
        if self.augment_config is not None:
            sample = augment(sample, self.augment_config, self.seed + self.epoch * len(self.samples) + index)
        item = {
            'image_id': sample.image_id,
            'targets': boxes_to_targets(sample.boxes, self.img_size),
            'transform': transform,
        }
        if sample.rgb is not None:
            item['rgb'] = image_to_tensor(sample.rgb)
        if sample.ir is not None:
            item['ir'] = image_to_tensor(sample.ir)
        return item


def collate_pairs(items):
    batch = {
        'image_ids': [item['image_id'] for item in items],
        'targets': [item['targets'] for item in items],
        'transforms': [item['transform'] for item in items],
    }
    for key in ('rgb', 'ir'):
        if key in items[0]:
            batch[key] = torch.stack([item[key] for item in items])
    return batch


@dataclass
class SyntheticSpec:
    num_classes: int = 2
    width: int = 160
    height: int = 128
    max_objects: int = 2
    ir_channels: int = 1
    names: list = field(default_factory=list)


def write_synthetic_dataset(root, n_train=8, n_val=4, spec=None, seed=0):
    """
    Write a tiny paired dataset in the directory convention plus `data.yaml`.

    Objects are filled rectangles: class-coloured in the visible image and hot
    (bright) in the infrared image, on a noisy dark background.
    """
    spec = spec or SyntheticSpec()
    root = Path(root)
    rng = np.random.default_rng(seed)
    palette = [(230, 60, 40), (40, 200, 60), (50, 80, 230), (220, 220, 40)]
    for split, count in (('train', n_train), ('val', n_val)):
        for sub in ('images/visible', 'images/infrared', 'labels'):
            (root / sub / split).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            stem = f"{split}_{i:04d}"
            rgb = rng.integers(20, 60, size=(spec.height, spec.width, 3), dtype=np.uint8)
            ir = rng.integers(10, 40, size=(spec.height, spec.width), dtype=np.uint8)
            lines = []
            for _ in range(int(rng.integers(1, spec.max_objects + 1))):
                cls = int(rng.integers(0, spec.num_classes))
                bw = int(rng.integers(spec.width // 5, spec.width // 2))
                bh = int(rng.integers(spec.height // 5, spec.height // 2))
                x1 = int(rng.integers(0, spec.width - bw))
                y1 = int(rng.integers(0, spec.height - bh))
                rgb[y1:y1 + bh, x1:x1 + bw] = palette[cls % len(palette)]
                ir[y1:y1 + bh, x1:x1 + bw] = 200 + 20 * (cls % 3)
                cx, cy = (x1 + bw / 2) / spec.width, (y1 + bh / 2) / spec.height
                lines.append(f"{cls} {cx:.6f} {cy:.6f} {bw / spec.width:.6f} {bh / spec.height:.6f}")
            cv2.imwrite(str(root / 'images/visible' / split / f"{stem}.png"), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))
            if spec.ir_channels == 3:
                ir_out = cv2.cvtColor(ir, cv2.COLOR_GRAY2BGR)
            else:
                ir_out = ir
            cv2.imwrite(str(root / 'images/infrared' / split / f"{stem}.png"), ir_out)
            (root / 'labels' / split / f"{stem}.txt").write_text("\n".join(lines) + "\n", encoding='ascii')
    names = spec.names or [f"class{i}" for i in range(spec.num_classes)]
    manifest = {
        'path': '.',
        'num_classes': spec.num_classes,
        'names': names,
        'train': 'train',
        'val': 'val',
        'ir_channels': spec.ir_channels,
    }
    (root / 'data.yaml').write_text(yaml.safe_dump(manifest, sort_keys=False), encoding='utf-8')
    return root / 'data.yaml'
