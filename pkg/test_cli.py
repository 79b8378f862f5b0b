"""
End-to-end tests of the dfloc command line on tiny scenes
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml

from dfloc.checkpoint import save_checkpoint
from dfloc.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION, main, parse_oracle
from dfloc.errors import ConfigError
from dfloc.field import ModelConfig
from dfloc.trainer import TrainConfig, Trainer

TINY = {
    'model': {'dim': 16, 'heads': 4, 'embed_dim': 4, 'hidden': 16, 'orientation_hidden': 8},
    'scene_gen': {'dim': 16, 'sat_height': 4, 'sat_width': 4, 'ground_tokens': 4, 'n_landmarks': 5,
                  'signature_gain': 2.0, 'count': 6},
}


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY), encoding='utf-8')
    return str(path)


@pytest.fixture
def manifest(tmp_path, tiny_yaml):
    out = tmp_path / "gen"
    assert main(['gen', '--config', tiny_yaml, '--seed', '3', '--out', str(out)]) == EXIT_OK
    return str(out / "manifest.yaml")


def test_gen_writes_manifest_and_config(tmp_path, capsys, manifest):
    data = yaml.safe_load(Path(manifest).read_text(encoding='utf-8'))
    assert len(data['scenes']) == 6 and data['base_seed'] == 3
    echoed = yaml.safe_load((tmp_path / "gen" / "config.yaml").read_text(encoding='utf-8'))
    assert echoed['scene_gen']['rng_seed'] == 3
    assert "scenes: 6" in capsys.readouterr().out


def test_gen_rejects_an_empty_scene_set(tmp_path, tiny_yaml):
    out = tmp_path / "empty"
    assert main(['gen', '--config', tiny_yaml, '--count', '0', '--out', str(out)]) == EXIT_VALIDATION
    assert not (out / "manifest.yaml").exists()


def test_irs_with_exact_oracle(tmp_path, tiny_yaml, manifest):
    out = tmp_path / "irs"
    code = main(['irs', '--config', tiny_yaml, '--manifest', manifest, '--oracle', 'alpha=1',
                 '--out', str(out)])
    assert code == EXIT_OK

    report = json.loads((out / "report.json").read_text(encoding='utf-8'))
    assert report['mean_m'] < 1e-9
    assert report['recall']['overall']['1'] == 1.0

    # defaults: N=10 seeds, R=5 rounds
    echoed = yaml.safe_load((out / "config.yaml").read_text(encoding='utf-8'))
    assert echoed['irs']['n_seeds'] == 10 and echoed['irs']['rounds'] == 5
    trajectories = pd.read_csv(out / "trajectories.csv")
    assert len(trajectories) == 6 * 10 * 6
    assert len(list((out / "results").glob("scene_*.json"))) == 6


def test_irs_seed_and_round_flags(tmp_path, tiny_yaml, manifest):
    out = tmp_path / "irs"
    code = main(['irs', '--config', tiny_yaml, '--manifest', manifest, '--oracle', 'alpha=0.5,noise=0.05',
                 '--seeds', '3', '--rounds', '2', '--lean', '--out', str(out)])
    assert code == EXIT_OK
    assert len(pd.read_csv(out / "trajectories.csv")) == 6 * 3 * 2


def test_orientation_report_in_3dof(tmp_path, tiny_yaml):
    gen = tmp_path / "gen3"
    assert main(['gen', '--config', tiny_yaml, '--mode', '3dof', '--out', str(gen)]) == EXIT_OK
    out = tmp_path / "eval3"
    code = main(['eval', '--config', tiny_yaml, '--mode', '3dof', '--manifest', str(gen / "manifest.yaml"),
                 '--oracle', 'alpha=1', '--seeds', '4', '--rounds', '1', '--out', str(out)])
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text(encoding='utf-8'))
    assert report['orientation_mean_deg'] < 1e-5
    assert set(report['orientation_recall']) == {'1', '5'}


def test_train_and_resume(tmp_path, tiny_yaml, manifest):
    out = tmp_path / "train"
    args = ['train', '--config', tiny_yaml, '--manifest', manifest, '--out', str(out)]
    assert main(args + ['--epochs', '1']) == EXIT_OK
    assert (out / "model.ckpt").exists()

    assert main(args + ['--epochs', '2', '--resume', str(out / "model.ckpt"), '--eval-scenes', '2']) == EXIT_OK
    steps = [json.loads(line)['step'] for line in (out / "train.jsonl").read_text(encoding='utf-8').splitlines()]
    assert steps == [1, 2]

    evaluated = tmp_path / "eval"
    code = main(['eval', '--config', tiny_yaml, '--manifest', manifest, '--checkpoint', str(out / "model.ckpt"),
                 '--seeds', '2', '--rounds', '1', '--out', str(evaluated)])
    assert code == EXIT_OK
    assert np.isfinite(json.loads((evaluated / "report.json").read_text(encoding='utf-8'))['mean_m'])


def test_train_rejects_invalid_learning_rate(tmp_path, tiny_yaml, manifest):
    out = tmp_path / "train"
    code = main(['train', '--config', tiny_yaml, '--manifest', manifest, '--set', 'train.lr_heads=-1',
                 '--out', str(out)])
    assert code == EXIT_VALIDATION
    assert not (out / "model.ckpt").exists()


def test_train_numeric_fault_keeps_checkpoint(tmp_path, tiny_yaml, manifest):
    # setup: resume from a checkpoint whose distance bias overflows
    # -------------------------------------------------------------------------
    trainer = Trainer.create(ModelConfig(**TINY['model']), TrainConfig())
    named = trainer.field.named_parameters()
    named['field.b_r'] = np.array([1e308, 0.0])
    trainer.field = trainer.field.with_parameters(named)
    poisoned = save_checkpoint(trainer.to_checkpoint(), tmp_path / "poisoned.ckpt")

    out = tmp_path / "train"
    code = main(['train', '--config', tiny_yaml, '--manifest', manifest, '--resume', str(poisoned),
                 '--epochs', '1', '--out', str(out)])
    assert code == EXIT_NUMERIC
    assert (out / "model.ckpt").exists()
    assert not (out / "train.jsonl").read_text(encoding='utf-8').strip()


def test_sweep_outputs_are_reproducible(tmp_path, tiny_yaml, manifest):
    def run(name):
        out = tmp_path / name
        code = main(['sweep', '--config', tiny_yaml, '--manifest', manifest, '--oracle', 'alpha=0.5',
                     '--n-list', '1,4', '--r-list', '1,2', '--out', str(out)])
        assert code == EXIT_OK
        return out

    first, second = run("a"), run("b")
    frame = pd.read_csv(first / "sweep.csv")
    assert len(frame) == 4
    assert (first / "sweep.json").read_text(encoding='utf-8') == (second / "sweep.json").read_text(encoding='utf-8')


def test_checkpoint_model_mismatch(tmp_path, tiny_yaml, manifest):
    model = ModelConfig(**TINY['model'])
    ckpt = save_checkpoint(Trainer.create(model, TrainConfig()).to_checkpoint(), tmp_path / "m.ckpt")

    other = dict(TINY, model=dict(TINY['model'], hidden=32))
    other_yaml = tmp_path / "other.yaml"
    other_yaml.write_text(yaml.safe_dump(other), encoding='utf-8')
    code = main(['eval', '--config', str(other_yaml), '--manifest', manifest, '--checkpoint', str(ckpt),
                 '--out', str(tmp_path / "eval")])
    assert code == EXIT_VALIDATION


def test_missing_checkpoint_is_an_io_failure(tmp_path, tiny_yaml, manifest):
    code = main(['eval', '--config', tiny_yaml, '--manifest', manifest,
                 '--checkpoint', str(tmp_path / "absent.ckpt"), '--out', str(tmp_path / "eval")])
    assert code == EXIT_IO


def test_parse_oracle():
    spec = parse_oracle('alpha=0.5,noise=0.1,dist_noise=0.02,seed=3')
    assert spec.distance_scale == 0.5 and spec.direction_noise_std == 0.1
    assert spec.distance_noise_std == 0.02 and spec.noise_seed == 3
    assert spec.target is None
    assert parse_oracle('').distance_scale == 1.0
    for bad in ('alpha=0', 'alpha=1.5', 'noise=-1', 'beta=1', 'alpha', 'alpha=x'):
        with pytest.raises(ConfigError):
            parse_oracle(bad)
