"""
Tests for error statistics, evaluation reports and the scaling sweep
"""

import json
import math

import numpy as np
import pandas as pd
import pytest

from dfloc.errors import ConfigError, ContractError
from dfloc.field import OracleField, OracleFieldSpec
from dfloc.irs import IRSConfig
from dfloc.metrics import (SWEEP_COLUMNS, EvalConfig, SceneRow, SweepConfig, SweepResult, build_report,
                           cell_seed, evaluate, non_increasing, orientation_error_deg, recall_at,
                           scaling_sweep, summarize, trend_summary, write_sweep_csv, write_sweep_json)


def row(scene_id, error, lateral=0.0, longitudinal=0.0, orientation=None):
    return SceneRow(scene_id, error, lateral, longitudinal, final_spread=0.0, wall_ms=1.5,
                    context_eval_count=1, orientation_deg=orientation)


def test_summarize_and_recall():
    mean, median = summarize([1.0, 2.0, 3.0, 10.0])
    assert mean == 4.0 and median == 2.5
    assert summarize([7.0]) == (7.0, 7.0)
    with pytest.raises(ContractError):
        summarize([])

    errors = [0.5, 1.0, 4.9, 5.0, 5.1]
    assert recall_at(errors, 1.0) == 0.4
    assert recall_at(errors, 5.0) == 0.8
    assert recall_at([], 1.0) == 0.0
    with pytest.raises(ContractError):
        recall_at(errors, 0.0)


def test_recall_never_drops_as_the_threshold_grows():
    errors = np.random.default_rng(0).exponential(4.0, 500)
    thresholds = np.linspace(0.01, 30.0, 300)
    recalls = [recall_at(errors, t) for t in thresholds]
    assert np.all(np.diff(recalls) >= 0.0)
    assert recalls[-1] <= 1.0


def test_summary_ignores_error_order():
    rng = np.random.default_rng(1)
    errors = rng.exponential(3.0, 101)
    mean, median = summarize(errors)
    for _ in range(5):
        shuffled_mean, shuffled_median = summarize(rng.permutation(errors))
        assert abs(shuffled_mean - mean) < 1e-12
        assert shuffled_median == median


def test_orientation_error():
    assert abs(orientation_error_deg((1.0, 0.0), (0.0, 1.0)) - 90.0) < 1e-12
    assert orientation_error_deg((1.0, 0.0), (1.0, 0.0)) == 0.0
    assert abs(orientation_error_deg((-1.0, 0.0), (1.0, 0.0)) - 180.0) < 1e-12


def test_report_json_is_reproducible(tmp_path):
    rows = [row(0, 0.5, 0.3, 0.4), row(1, 3.0, 3.0, 0.0), row(2, 12.0, 5.0, 10.0)]
    report = build_report(rows, EvalConfig(), wall_ms=42.0)
    assert report.recall['overall'] == {1.0: pytest.approx(1 / 3), 5.0: pytest.approx(2 / 3)}
    assert report.recall['lateral'][5.0] == 1.0
    assert report.recall['longitudinal'][1.0] == pytest.approx(2 / 3)
    assert report.orientation_recall is None

    first = report.write_json(tmp_path / "a.json")
    again = build_report(rows, EvalConfig(), wall_ms=7.0).write_json(tmp_path / "b.json")
    assert first.read_text(encoding='utf-8') == again.read_text(encoding='utf-8')
    payload = json.loads(first.read_text(encoding='utf-8'))
    assert 'wall_ms' not in payload
    assert all('wall_ms' not in scene for scene in payload['scenes'])
    assert payload['recall']['overall']['5'] == pytest.approx(2 / 3)
    assert report.to_dict()['wall_ms'] == 42.0


def test_orientation_report():
    report = build_report([row(0, 1.0, orientation=0.5), row(1, 1.0, orientation=8.0)])
    assert report.orientation_mean_deg == 4.25
    assert report.orientation_recall == {1.0: 0.5, 5.0: 0.5}
    assert 'orientation_recall' in report.to_dict(include_timing=False)
    with pytest.raises(ContractError):
        build_report([])


def test_config_validation():
    with pytest.raises(ConfigError):
        EvalConfig(thresholds_m=[]).validate()
    with pytest.raises(ConfigError):
        SweepConfig(n_list=[0, 5]).validate()
    with pytest.raises(ConfigError):
        SweepConfig(r_list=[]).validate()


def test_exact_oracle_has_zero_error(tiny_scenes):
    oracle = OracleField(OracleFieldSpec())
    report, results = evaluate(oracle, tiny_scenes, IRSConfig(n_seeds=4, rounds=1))
    assert report.mean_m < 1e-9
    assert report.recall_overall(1.0) == 1.0
    assert all(r.context_eval_count == 1 for r in results)
    assert [r.scene_id for r in report.rows] == [s.scene_id for s in tiny_scenes]


def test_orientation_evaluation(tiny_scenes):
    oracle = OracleField(OracleFieldSpec())
    report, _ = evaluate(oracle, tiny_scenes, IRSConfig(n_seeds=3, rounds=2), orientation=True)
    assert report.orientation_mean_deg < 1e-5
    assert report.orientation_recall[1.0] == 1.0


def test_cell_seeds_are_distinct_and_stable():
    seeds = {cell_seed(0, n, r, s) for n in (1, 5) for r in (1, 3) for s in range(5)}
    assert len(seeds) == 20
    assert cell_seed(3, 10, 5, 2) == cell_seed(3, 10, 5, 2)
    assert cell_seed(3, 10, 5, 2) != cell_seed(4, 10, 5, 2)


def test_sweep_with_contracting_oracle(tmp_path, tiny_scenes):
    # setup: distance shrinks by half every round, so more rounds always help
    # -------------------------------------------------------------------------
    oracle = OracleField(OracleFieldSpec(distance_scale=0.5))
    sweep = scaling_sweep(oracle, tiny_scenes, [1, 10], [1, 3, 5], base_seed=11)

    frame = sweep.frame()
    assert list(frame.columns) == SWEEP_COLUMNS
    assert len(frame) == 6
    assert (frame['wall_ms'] > 0).all()
    for n in (1, 10):
        means = [sweep.mean(n, r) for r in (1, 3, 5)]
        assert means[0] > means[1] > means[2]

    trend = trend_summary(sweep)
    assert trend['rounds']['non_increasing'] and trend['rounds']['first_drop_largest']
    assert trend['single_vs_full']['ratio'] <= 0.75

    csv_path = write_sweep_csv(sweep, tmp_path / "sweep.csv")
    assert list(pd.read_csv(csv_path).columns) == SWEEP_COLUMNS
    json_a = write_sweep_json(sweep, tmp_path / "a.json").read_text(encoding='utf-8')
    rerun = scaling_sweep(oracle, tiny_scenes, [1, 10], [1, 3, 5], base_seed=11)
    json_b = write_sweep_json(rerun, tmp_path / "b.json").read_text(encoding='utf-8')
    assert json_a == json_b
    assert 'N=10,R=5' in json.loads(json_a)


def test_non_increasing_band():
    assert non_increasing([10.0, 10.1, 9.0])
    assert not non_increasing([10.0, 10.3])
    assert non_increasing([3.0])


def test_trend_summary_flags_a_worsening_sweep():
    report = build_report([row(0, 2.0)])
    worse = build_report([row(0, 4.0)])
    sweep = SweepResult({(1, 1): report, (10, 1): report, (1, 5): report, (10, 5): worse},
                        n_list=[1, 10], r_list=[1, 5])
    trend = trend_summary(sweep)
    assert trend['single_vs_full']['ratio'] == 2.0
    assert not trend['single_vs_full']['passed']
    assert not trend['seeds']['non_increasing']
    assert not trend['rounds']['non_increasing']
    assert not trend['passed']
    assert math.isfinite(trend['rounds']['means'][0])
