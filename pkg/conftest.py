"""Shared fixtures: tiny model specs, random paired batches, a synthetic dataset on disk."""

import pytest
import torch

from rgbt_data import load_manifest, load_paired_dataset, write_synthetic_dataset
from rgbt_model import ModelSpec, build_detector
from rgbt_transfer import checkpoint_from_model

IMG = 64


@pytest.fixture(autouse=True)
def _reset_determinism():
    yield
    torch.use_deterministic_algorithms(False)


@pytest.fixture
def tiny_spec():
    return ModelSpec('n', num_classes=2)


@pytest.fixture
def data_yaml(tmp_path):
    return write_synthetic_dataset(tmp_path / 'data', n_train=8, n_val=4, seed=0)


@pytest.fixture
def manifest(data_yaml):
    return load_manifest(data_yaml)


@pytest.fixture
def train_split(manifest):
    return load_paired_dataset(manifest.root, 'train', 'both', manifest.num_classes, workers=2)


@pytest.fixture
def rgb_checkpoint(tmp_path, tiny_spec):
    """Path of a freshly initialized single-modality RGB checkpoint."""
    return checkpoint_from_model(build_detector(tiny_spec, seed=0)).save(tmp_path / 'rgb_n.safetensors')


@pytest.fixture
def make_batch():
    """Random (rgb, ir) batch dict with one or two boxes per image, in pixels."""

    def _make(batch=2, size=IMG, ir_channels=1, seed=0, dtype=torch.float32, num_classes=2):
        g = torch.Generator().manual_seed(seed)
        targets = []
        for _ in range(batch):
            n = int(torch.randint(1, 3, (1,), generator=g))
            xy = torch.rand(n, 2, generator=g, dtype=torch.float64) * size * 0.5
            wh = size * 0.2 + torch.rand(n, 2, generator=g, dtype=torch.float64) * size * 0.3
            cls = torch.randint(0, num_classes, (n, 1), generator=g).double()
            targets.append(torch.cat([cls, xy, xy + wh], 1).to(dtype))
        return {
            'rgb': torch.rand(batch, 3, size, size, generator=g, dtype=torch.float64).to(dtype),
            'ir': torch.rand(batch, ir_channels, size, size, generator=g, dtype=torch.float64).to(dtype),
            'targets': targets,
            'image_ids': [f"img{i}" for i in range(batch)],
        }

    return _make
