"""
Tests for the synthetic scene generator, metric geometry and seed manifests
"""

import math

import numpy as np
import pytest

from dfloc.encoder import sinusoidal_pe_2d
from dfloc.errors import ConfigError, ContractError, InfeasibleConfigError
from dfloc.field import PoseHypothesis
from dfloc.synthenv import (Landmarks, SceneGenConfig, SceneManifest, bayes_decode, derive_scene_seeds,
                            decompose_error, generate_scene, generate_scenes, load_manifest, meters,
                            render_ground, save_manifest, solvability)


def test_same_seed_same_scene(tiny_scene_config):
    a = generate_scene(tiny_scene_config, 11)
    b = generate_scene(tiny_scene_config, 11)
    assert np.array_equal(a.ground.values, b.ground.values)
    assert np.array_equal(a.satellite.values, b.satellite.values)
    assert a.q_gt == b.q_gt and a.gamma_gt == b.gamma_gt
    c = generate_scene(tiny_scene_config, 12)
    assert not np.array_equal(a.satellite.values, c.satellite.values)


def test_scene_sets_are_reproducible(tiny_scene_config):
    serial = generate_scenes(tiny_scene_config, count=5, base_seed=9)
    threaded = generate_scenes(tiny_scene_config, count=5, base_seed=9, workers=3)
    assert [s.seed for s in serial] == derive_scene_seeds(9, 5)
    for a, b in zip(serial, threaded):
        assert a.scene_id == b.scene_id
        assert np.array_equal(a.ground.values, b.ground.values)
    assert len({s.seed for s in serial}) == 5


def test_grid_shapes(tiny_scene_config):
    scene = generate_scene(tiny_scene_config, 0)
    assert scene.satellite.values.shape == (16, 16)
    assert scene.ground.values.shape == (4, 16)
    assert -1.0 <= scene.q_gt.x <= 1.0 and -1.0 <= scene.q_gt.y <= 1.0
    assert abs(math.hypot(*scene.gamma_gt) - 1.0) < 1e-12


def test_invalid_configs():
    with pytest.raises(InfeasibleConfigError):
        SceneGenConfig(sat_height=2, sat_width=2, n_landmarks=5).validate()
    with pytest.raises(ConfigError):
        SceneGenConfig(count=0).validate()
    with pytest.raises(ConfigError):
        SceneGenConfig(ambiguity=1.5).validate()
    with pytest.raises(ConfigError):
        SceneGenConfig(mode='6dof').validate()
    with pytest.raises(ConfigError):
        SceneGenConfig.preset('nuscenes')


def test_presets_set_map_extent():
    assert SceneGenConfig.preset('kitti').extent_m == 100.0
    assert SceneGenConfig.preset('vigor', dim=16).extent_m == 70.0


def test_landmark_at_pose_fills_first_sector():
    # setup: one landmark exactly at the viewing pose, unit weight at distance 0
    # -------------------------------------------------------------------------
    config = SceneGenConfig(dim=8, sat_height=2, sat_width=2, ground_tokens=4, n_landmarks=1)
    signature = np.arange(1.0, 9.0)
    landmarks = Landmarks(positions=np.array([[0.5, 0.5]]), cells=np.array([[1, 1]]),
                          signatures=signature[None, :])
    ground = render_ground((0.5, 0.5), (1.0, 0.0), landmarks, config)
    assert np.array_equal(ground[0], signature)
    assert np.all(ground[1:] == 0.0)


def test_noise_free_ground_tokens_follow_the_landmarks(tiny_scene_config):
    scene = generate_scene(tiny_scene_config, 5)
    raw = scene.ground.values - sinusoidal_pe_2d(1, tiny_scene_config.ground_tokens, tiny_scene_config.dim)
    expected = render_ground(scene.q_gt.as_array(), scene.gamma_gt, scene.landmarks, tiny_scene_config)
    assert np.abs(raw - expected).max() < 1e-12


def test_full_ambiguity_mirrors_every_pair():
    config = SceneGenConfig(dim=16, sat_height=4, sat_width=4, n_landmarks=6, ambiguity=1.0)
    scene = generate_scene(config, 3)
    cells = [tuple(c) for c in scene.landmarks.cells]
    assert config.twin_pairs == 3
    for i in range(0, 6, 2):
        r, c = cells[i]
        assert cells[i + 1] == (3 - r, 3 - c)
        assert np.array_equal(scene.landmarks.signatures[i], scene.landmarks.signatures[i + 1])
    sat = scene.satellite.values - sinusoidal_pe_2d(4, 4, 16)
    r, c = cells[0]
    twin = cells[1]
    assert np.abs(sat[r * 4 + c] - sat[twin[0] * 4 + twin[1]]).max() < 1e-12


def test_no_ambiguity_means_unique_signatures():
    config = SceneGenConfig(dim=16, sat_height=4, sat_width=4, n_landmarks=6)
    scene = generate_scene(config, 4)
    sigs = scene.landmarks.signatures
    assert len({tuple(s) for s in sigs}) == 6
    assert np.allclose(np.linalg.norm(sigs, axis=1), config.signature_gain)


def test_reference_decoder_solves_clean_scenes():
    config = SceneGenConfig(dim=32, sat_height=4, sat_width=4, n_landmarks=8)
    scenes = generate_scenes(config, count=8, base_seed=0)
    assert solvability(scenes, config) >= 0.75
    q = bayes_decode(scenes[0], config)
    assert isinstance(q, PoseHypothesis)


def test_meters():
    assert abs(meters(PoseHypothesis(-1.0, 0.0), PoseHypothesis(1.0, 0.0), 100.0) - 100.0) < 1e-12
    assert abs(meters(PoseHypothesis(0.0, 0.0), PoseHypothesis(0.5, 0.0), 100.0) - 25.0) < 1e-12


def test_decompose_error():
    lateral, longitudinal = decompose_error((0.2, 0.0), (1.0, 0.0), 100.0)
    assert lateral == 0.0 and abs(longitudinal - 10.0) < 1e-12

    lateral, longitudinal = decompose_error((0.0, 0.2), (1.0, 0.0), 100.0)
    assert longitudinal == 0.0 and abs(lateral - 10.0) < 1e-12

    h = 1.0 / math.sqrt(2.0)
    lateral, longitudinal = decompose_error((0.2, 0.0), (h, h), 100.0)
    assert abs(lateral - 10.0 * h) < 1e-12 and abs(longitudinal - 10.0 * h) < 1e-12

    with pytest.raises(ContractError):
        decompose_error((0.1, 0.1), (2.0, 0.0), 100.0)


def test_manifest_round_trip(tmp_path, tiny_scene_config):
    scenes = generate_scenes(tiny_scene_config, base_seed=21)
    manifest = SceneManifest.from_scenes(tiny_scene_config, 21, scenes)
    path = save_manifest(manifest, tmp_path / "scenes" / "manifest.yaml")
    loaded = load_manifest(path)
    assert loaded.config == tiny_scene_config
    assert loaded.seeds == manifest.seeds
    for a, b in zip(scenes, loaded.regenerate()):
        assert np.array_equal(a.ground.values, b.ground.values)
        assert np.array_equal(a.satellite.values, b.satellite.values)


def test_manifest_format_is_checked(tmp_path):
    path = tmp_path / "bogus.yaml"
    path.write_text("format: something-else\nversion: 1\n", encoding='utf-8')
    with pytest.raises(ContractError):
        load_manifest(path)
