"""Paired dataset loading, letterbox, augmentation and batching."""

import numpy as np
import pytest
import torch

from rgbt_core import ConfigError, DomainError, LabelParseError
from rgbt_data import (
    AugmentConfig,
    GroundTruthBox,
    PairedDataset,
    PairedSample,
    SyntheticSpec,
    augment,
    collate_pairs,
    letterbox,
    load_manifest,
    load_paired_dataset,
    parse_label_file,
    verify_alignment,
    write_synthetic_dataset,
)


def _sample(h=128, w=160, boxes=(), ir_shape=None):
    rgb = np.arange(h * w * 3, dtype=np.uint32).reshape(h, w, 3).astype(np.uint8)
    ir_h, ir_w = ir_shape or (h, w)
    ir = np.full((ir_h, ir_w, 1), 77, dtype=np.uint8)
    return PairedSample('s0', rgb, ir, boxes)


class TestLabels:
    def test_parses_lines(self, tmp_path):
        path = tmp_path / 'a.txt'
        path.write_text("0 0.5 0.5 0.2 0.4\n\n1 0.1 0.2 0.05 0.05\n", encoding='ascii')
        boxes = parse_label_file(path, num_classes=2)
        assert boxes == [GroundTruthBox(0, 0.5, 0.5, 0.2, 0.4), GroundTruthBox(1, 0.1, 0.2, 0.05, 0.05)]

    def test_empty_file_has_no_boxes(self, tmp_path):
        path = tmp_path / 'empty.txt'
        path.write_text("", encoding='ascii')
        assert parse_label_file(path) == []

    @pytest.mark.parametrize("line", ["0 0.5 0.5 0.2", "a 0.5 0.5 0.2 0.2", "0 1.5 0.5 0.2 0.2", "2 0.5 0.5 0.2 0.2"])
    def test_malformed_line_names_file_and_line(self, tmp_path, line):
        path = tmp_path / 'bad.txt'
        path.write_text(f"0 0.5 0.5 0.1 0.1\n{line}\n", encoding='ascii')
        with pytest.raises(LabelParseError) as info:
            parse_label_file(path, num_classes=2)
        assert info.value.line_no == 2
        assert info.value.path == path

    @pytest.mark.parametrize("line", ["nan 0.5 0.5 0.1 0.1", "inf 0.5 0.5 0.1 0.1", "0 0.5 nan 0.1 0.1"])
    def test_non_finite_field(self, tmp_path, line):
        path = tmp_path / 'nan.txt'
        path.write_text(f"{line}\n", encoding='ascii')
        with pytest.raises(LabelParseError) as info:
            parse_label_file(path, num_classes=2)
        assert info.value.line_no == 1

    def test_non_ascii_byte(self, tmp_path):
        path = tmp_path / 'bin.txt'
        path.write_bytes(b"0 0.5 0.5 0.1 0.1\n1 0.5 0.5 0.1 0.1\xff\n")
        with pytest.raises(LabelParseError) as info:
            parse_label_file(path, num_classes=2)
        assert info.value.path == path
        assert info.value.line_no == 2

    def test_box_error_is_domain(self):
        with pytest.raises(DomainError):
            GroundTruthBox(0, 0.5, 0.5, 0.0, 0.1)


class TestLoading:
    def test_pairs_in_stem_order(self, manifest):
        split = load_paired_dataset(manifest.root, 'train', 'both', manifest.num_classes)
        ids = [s.image_id for s in split]
        assert ids == sorted(ids)
        assert len(split) == 8
        assert split[0].rgb.shape == (128, 160, 3)
        assert split[0].ir.shape == (128, 160, 1)
        assert not split.exclusions

    def test_loading_is_independent_of_worker_count(self, manifest):
        a = load_paired_dataset(manifest.root, 'val', 'both', workers=1)
        b = load_paired_dataset(manifest.root, 'val', 'both', workers=4)
        for x, y in zip(a, b):
            assert x.image_id == y.image_id
            assert np.array_equal(x.rgb, y.rgb)
            assert x.boxes == y.boxes

    def test_missing_modality_is_excluded(self, manifest):
        (manifest.root / 'images' / 'infrared' / 'train' / 'train_0003.png').unlink()
        split = load_paired_dataset(manifest.root, 'train', 'both')
        assert len(split) == 7
        assert [(e.stem, e.missing) for e in split.exclusions] == [('train_0003', ('ir',))]

    def test_rgb_policy_ignores_infrared(self, manifest):
        (manifest.root / 'images' / 'infrared' / 'train' / 'train_0003.png').unlink()
        split = load_paired_dataset(manifest.root, 'train', 'rgb')
        assert len(split) == 8
        assert all(s.ir is None for s in split)

    def test_collapse_three_channel_ir(self, tmp_path):
        data = write_synthetic_dataset(tmp_path / 'ir3', 2, 1, SyntheticSpec(ir_channels=3))
        root = load_manifest(data).root
        assert load_paired_dataset(root, 'train', 'ir')[0].ir.shape[2] == 3
        assert load_paired_dataset(root, 'train', 'ir', collapse_ir=True)[0].ir.shape[2] == 1

    def test_missing_directory(self, tmp_path):
        with pytest.raises(ConfigError):
            load_paired_dataset(tmp_path, 'train', 'both')

    def test_unknown_manifest_key(self, tmp_path):
        path = tmp_path / 'data.yaml'
        path.write_text("num_classes: 1\nnames: [a]\nfoo: 1\n", encoding='utf-8')
        with pytest.raises(ConfigError):
            load_manifest(path)

    def test_samples_are_read_only(self, train_split):
        with pytest.raises(ValueError):
            train_split[0].rgb[0, 0, 0] = 1


class TestAlignment:
    def test_reports_shape_mismatch(self):
        report = verify_alignment([_sample(), _sample(ir_shape=(64, 80))])
        assert len(report.violations) == 1
        assert report.violations[0][1:] == ((128, 160), (64, 80))
        assert not report.usable_for_fusion

    def test_empty_dataset_not_usable(self):
        report = verify_alignment([])
        assert report.empty
        assert not report.usable_for_fusion


class TestLetterbox:
    def test_geometry(self):
        box = GroundTruthBox(0, 0.5, 0.5, 0.25, 0.5)
        out, t = letterbox(_sample(boxes=(box,)), 128)
        assert out.rgb.shape == (128, 128, 3)
        assert out.ir.shape == (128, 128, 1)
        assert (t.scale, t.pad_x, t.pad_y) == (0.8, 0, 13)
        assert out.rgb[0, 0, 0] == 114
        b = out.boxes[0]
        assert b.cx == pytest.approx(0.5)
        assert b.cy == pytest.approx((0.5 * 128 * 0.8 + 13) / 128)
        assert b.w == pytest.approx(0.25)
        assert b.h == pytest.approx(0.5 * 0.8)

    def test_invert_pixels(self):
        _, t = letterbox(_sample(), 128)
        assert t.invert_xyxy_pixels(0, 13, 128, 115) == pytest.approx((0, 0, 160, 127.5))

    @pytest.mark.parametrize("size", [(128, 160), (160, 96), (128, 128), (50, 300)])
    def test_box_roundtrip(self, size):
        g = np.random.default_rng(1)
        _, t = letterbox(_sample(*size), 128)
        for _ in range(20):
            w, h = g.uniform(0.05, 0.5, 2)
            cx, cy = g.uniform(w / 2, 1 - w / 2), g.uniform(h / 2, 1 - h / 2)
            box = GroundTruthBox(0, float(cx), float(cy), float(w), float(h))
            back = t.invert_box(t.apply_box(box))
            assert (back.cx, back.cy, back.w, back.h) == pytest.approx((box.cx, box.cy, box.w, box.h), abs=1e-6)

    def test_target_must_be_stride_multiple(self):
        with pytest.raises(ConfigError):
            letterbox(_sample(), 100)


class TestAugment:
    def test_flip_mirrors_both_modalities_and_boxes(self):
        sample = _sample(boxes=(GroundTruthBox(1, 0.3, 0.4, 0.2, 0.2),))
        out = augment(sample, AugmentConfig(flip_prob=1.0), seed=0)
        assert np.array_equal(out.rgb, sample.rgb[:, ::-1])
        assert np.array_equal(out.ir, sample.ir[:, ::-1])
        assert out.boxes[0].cx == 1.0 - 0.3
        assert out.boxes[0].cy == 0.4

    def test_deterministic_per_seed(self):
        sample = _sample(boxes=(GroundTruthBox(0, 0.5, 0.5, 0.3, 0.3),))
        config = AugmentConfig(flip_prob=0.5, scale_jitter=0.2)
        a, b = augment(sample, config, 7), augment(sample, config, 7)
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.ir, b.ir)
        assert a.boxes == b.boxes

    def test_unit_scale_without_flip_is_identity(self):
        sample = _sample(boxes=(GroundTruthBox(0, 0.3, 0.6, 0.2, 0.1), GroundTruthBox(1, 0.5, 0.5, 1.0, 1.0)))
        for seed in range(5):
            out = augment(sample, AugmentConfig(flip_prob=0.0, scale_jitter=0.0), seed)
            assert np.array_equal(out.rgb, sample.rgb)
            assert np.array_equal(out.ir, sample.ir)
            assert out.boxes == sample.boxes

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            AugmentConfig(flip_prob=1.5)


class TestBatching:
    def test_dataset_items_and_collate(self, train_split):
        dataset = PairedDataset(train_split, img_size=64)
        items = [dataset[0], dataset[1]]
        assert items[0]['rgb'].shape == (3, 64, 64)
        assert items[0]['ir'].shape == (1, 64, 64)
        assert 0.0 <= float(items[0]['rgb'].min()) and float(items[0]['rgb'].max()) <= 1.0
        targets = items[0]['targets']
        assert targets.shape[1] == 5
        assert bool((targets[:, 1:] >= 0).all() and (targets[:, 1:] <= 64).all())

        batch = collate_pairs(items)
        assert batch['rgb'].shape == (2, 3, 64, 64)
        assert batch['ir'].shape == (2, 1, 64, 64)
        assert batch['image_ids'] == ['train_0000', 'train_0001']
        assert len(batch['targets']) == 2

    def test_epoch_changes_augmentation_seed(self, train_split):
        dataset = PairedDataset(train_split, 64, AugmentConfig(flip_prob=0.5, scale_jitter=0.2), seed=3)
        first = [dataset[i]['rgb'] for i in range(len(dataset))]
        again = [dataset[i]['rgb'] for i in range(len(dataset))]
        assert all(torch.equal(a, b) for a, b in zip(first, again))
        dataset.set_epoch(1)
        later = [dataset[i]['rgb'] for i in range(len(dataset))]
        assert any(not torch.equal(a, b) for a, b in zip(first, later))
