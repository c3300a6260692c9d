"""End-to-end command line runs on the synthetic dataset."""

import cv2
import pytest
import yaml

from rgbt_cli import RunConfig, main
from rgbt_transfer import Checkpoint


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


def _write_config(path, **values):
    path.write_text(yaml.safe_dump(values), encoding='utf-8')
    return str(path)


def _quick(data_yaml, **values):
    base = dict(data=str(data_yaml), epochs=1, batch_size=4, img_size=64, max_iters=2, deterministic=True)
    base.update(values)
    return base


def _parameters(stdout):
    line = next(x for x in stdout.splitlines() if x.startswith('parameters: '))
    return int(line.split(': ')[1])


class TestInfo:
    def test_mid_larger_than_early(self, capsys):
        assert main(['info', '--fusion', 'early', '--img-size', '64']) == 0
        early = capsys.readouterr().out
        assert main(['info', '--fusion', 'mid', '--img-size', '64']) == 0
        mid = capsys.readouterr().out
        assert _parameters(mid) > _parameters(early)
        assert 'GFLOPs@64' in mid
        assert 'P3' in mid

    def test_unknown_fusion(self, capsys):
        assert main(['info', '--fusion', 'sideways']) == 2
        assert capsys.readouterr().err.splitlines()[0] == 'error: config'


class TestErrors:
    def test_train_needs_data(self, capsys):
        assert main(['train']) == 2
        err = capsys.readouterr().err.splitlines()
        assert err[0] == 'error: config'
        assert '--data' in err[1]

    def test_unknown_config_key(self, tmp_path, capsys):
        config = _write_config(tmp_path / 'bad.yaml', epochs=1, learning_rate=0.1)
        assert main(['train', '--config', config]) == 2
        err = capsys.readouterr().err.splitlines()
        assert err[0] == 'error: config'
        assert 'learning_rate' in err[1]

    def test_missing_checkpoint(self, data_yaml, capsys):
        assert main(['val', '--data', str(data_yaml), '--weights', 'nope.safetensors']) == 2
        assert capsys.readouterr().err.splitlines()[0] == 'error: config'

    @pytest.mark.parametrize("content", [b"nan 0.5 0.5 0.1 0.1\n", b"0 0.5 0.5 0.1 0.1\xff\n"])
    def test_bad_label_reports_category(self, data_yaml, rgb_checkpoint, capsys, content):
        (data_yaml.parent / 'labels' / 'val' / 'val_0001.txt').write_bytes(content)
        assert main(['val', '--data', str(data_yaml), '--weights', str(rgb_checkpoint), '--img-size', '64']) == 2
        err = capsys.readouterr().err.splitlines()
        assert err[0] == 'error: label-parse'
        assert 'val_0001.txt:1' in err[1]


class TestTrain:
    def test_train_from_config(self, tmp_path, data_yaml, capsys):
        config = _write_config(tmp_path / 'run.yaml', **_quick(data_yaml, fusion='early', out='runs/early'))
        assert main(['train', '--config', config]) == 0
        out = tmp_path / 'runs' / 'early'
        assert '✓ Trained 2 iterations' in capsys.readouterr().out
        rows = (out / 'iterations.csv').read_text(encoding='utf-8').splitlines()
        assert len(rows) == 3
        assert Checkpoint.load(out / 'weights' / 'last.safetensors').spec.fusion.value == 'early'

        saved = RunConfig.from_yaml(out / 'run_config.yaml')
        assert saved == RunConfig.from_yaml(config)
        assert saved.fusion == 'early'

    def test_flags_override_config(self, tmp_path, data_yaml):
        config = _write_config(tmp_path / 'run.yaml', **_quick(data_yaml, fusion='early', out='runs/a'))
        assert main(['train', '--config', config, '--fusion', 'shareweight', '--out', 'runs/b']) == 0
        saved = RunConfig.from_yaml(tmp_path / 'runs' / 'b' / 'run_config.yaml')
        assert saved.fusion == 'shareweight'
        assert not (tmp_path / 'runs' / 'a').exists()

    def test_train_from_single_checkpoint(self, tmp_path, data_yaml, rgb_checkpoint):
        config = _write_config(tmp_path / 'run.yaml', **_quick(data_yaml, fusion='mid', out='runs/mid'))
        assert main(['train', '--config', config, '--weights', str(rgb_checkpoint)]) == 0
        report = yaml.safe_load((tmp_path / 'runs' / 'mid' / 'transfer_report.yaml').read_text(encoding='utf-8'))
        assert report['unmatched']
        assert all(name.startswith('junctions.') for name in report['unmatched'])


class TestEvaluate:
    def test_val_is_reproducible(self, tmp_path, data_yaml, rgb_checkpoint, capsys):
        for out in ('v1', 'v2'):
            assert main(['val', '--data', str(data_yaml), '--weights', str(rgb_checkpoint),
                         '--img-size', '64', '--out', out]) == 0
        assert 'mAP50:' in capsys.readouterr().out
        for name in ('metrics.txt', 'metrics.yaml'):
            assert (tmp_path / 'v1' / name).read_bytes() == (tmp_path / 'v2' / name).read_bytes()

    def test_predict_with_unreachable_confidence(self, tmp_path, data_yaml, rgb_checkpoint):
        assert main(['predict', '--data', str(data_yaml), '--weights', str(rgb_checkpoint),
                     '--img-size', '64', '--conf', '1.0', '--out', 'pred']) == 0
        texts = sorted((tmp_path / 'pred').glob('*.txt'))
        assert [p.stem for p in texts] == ['val_0000', 'val_0001', 'val_0002', 'val_0003']
        assert all(p.read_text(encoding='utf-8') == '' for p in texts)
        assert len(list((tmp_path / 'pred').glob('*.jpg'))) == 4

    def test_features(self, tmp_path, data_yaml, rgb_checkpoint):
        assert main(['features', '--data', str(data_yaml), '--weights', str(rgb_checkpoint),
                     '--img-size', '64', '--stage', 'P2', '--out', 'feat']) == 0
        images = sorted((tmp_path / 'feat').glob('*.png'))
        assert [p.name for p in images][0] == 'val_0000_P2.png'
        assert len(images) == 4
        assert cv2.imread(str(images[0]), cv2.IMREAD_GRAYSCALE).shape == (16, 16)

    def test_features_needs_stage(self, data_yaml, rgb_checkpoint, capsys):
        assert main(['features', '--data', str(data_yaml), '--weights', str(rgb_checkpoint)]) == 2
        assert capsys.readouterr().err.splitlines()[0] == 'error: config'


class TestTransferAndMcf:
    def test_transfer(self, tmp_path, rgb_checkpoint, capsys):
        assert main(['transfer', '--weights', str(rgb_checkpoint), '--fusion', 'late', '--out', 'tr']) == 0
        assert 'Transfer into late' in capsys.readouterr().out
        ckpt = Checkpoint.load(tmp_path / 'tr' / 'transferred.safetensors')
        assert ckpt.spec.fusion.value == 'late'
        report = yaml.safe_load((tmp_path / 'tr' / 'transfer_report.yaml').read_text(encoding='utf-8'))
        assert report['unmatched'] == []
        assert report['duplicated']

    def test_finetune_mcf(self, tmp_path, data_yaml, rgb_checkpoint, capsys):
        config = _write_config(tmp_path / 'mcf.yaml', **_quick(data_yaml, max_iters=1, out='mcf'))
        assert main(['finetune-mcf', '--config', config, '--weights', str(rgb_checkpoint)]) == 0
        report = yaml.safe_load((tmp_path / 'mcf' / 'freeze_report.yaml').read_text(encoding='utf-8'))
        assert report['frozen_count'] > 0
        assert report['trainable_count'] > 0
        weights = tmp_path / 'mcf' / 'weights' / 'last.safetensors'
        assert Checkpoint.load(weights).manifest['freeze_flags'] == ['base']
        capsys.readouterr()

        assert main(['info', '--weights', str(weights), '--img-size', '64']) == 0
        out = capsys.readouterr().out
        assert 'fusion: mcf' in out
        assert 'zero-conv add' in out
