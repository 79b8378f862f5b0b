"""
Basic tests for the Localizer facade
"""

import numpy as np
import pytest

from dfloc import Localizer
from dfloc.checkpoint import save_checkpoint
from dfloc.errors import ConfigError
from dfloc.field import OracleFieldSpec, PoseHypothesis
from dfloc.irs import IRSConfig
from dfloc.trainer import TrainConfig, Trainer


def test_oracle_localizes_exactly(tiny_scenes):
    localizer = Localizer.from_oracle()
    scene = tiny_scenes[0]
    pose = localizer.localize(scene)
    assert isinstance(pose, PoseHypothesis)
    assert abs(pose.x - scene.q_gt.x) < 1e-12 and abs(pose.y - scene.q_gt.y) < 1e-12


def test_localize_with_confidence(tiny_scenes):
    localizer = Localizer.from_oracle(OracleFieldSpec(distance_scale=0.5), irs_config=IRSConfig(n_seeds=4))
    info = localizer.localize_with_confidence(tiny_scenes[1])
    assert set(info) == {'estimate', 'spread', 'converged', 'processing_time_ms', 'context_eval_count'}
    assert info['context_eval_count'] == 1
    assert info['spread'] > 0.0
    assert info['processing_time_ms'] >= 0.0


def test_batch_localize(tiny_scenes):
    results = Localizer.from_oracle().batch_localize(tiny_scenes[:3])
    assert [r['scene_id'] for r in results] == [s.scene_id for s in tiny_scenes[:3]]
    assert all(r['error_m'] < 1e-9 and r['converged'] for r in results)


def test_analyze(tiny_scenes):
    localizer = Localizer.from_oracle(OracleFieldSpec(distance_scale=0.5), orientation=True)
    report = localizer.analyze(tiny_scenes[2], rounds=3)
    assert len(report['mean_kappa_per_round']) == 3
    assert len(report['mean_sigma2_per_round']) == 3
    assert report['orientation_error_deg'] < 1e-5
    assert report['error_m'] >= report['lateral_m'] - 1e-9


def test_exactly_one_field_source(tmp_path):
    with pytest.raises(ConfigError):
        Localizer()
    with pytest.raises(ConfigError):
        Localizer(checkpoint=tmp_path / "model.ckpt", oracle=OracleFieldSpec())
    with pytest.raises(ConfigError):
        Localizer.from_oracle(irs_config=IRSConfig(rounds=0))


def test_from_checkpoint(tmp_path, tiny_model_config, tiny_scenes):
    trainer = Trainer.create(tiny_model_config, TrainConfig(epochs=1, batch_size=6, hypotheses_per_scene=1))
    trainer.fit(tiny_scenes)
    path = save_checkpoint(trainer.to_checkpoint(), tmp_path / "model.ckpt")

    localizer = Localizer.from_checkpoint(path, irs_config=IRSConfig(n_seeds=3, rounds=2))
    assert localizer.field.parameter_count() == trainer.field.parameter_count()
    pose = localizer.localize(tiny_scenes[0])
    assert np.isfinite(pose.as_array()).all()
