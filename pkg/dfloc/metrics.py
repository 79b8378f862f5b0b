#!/usr/bin/env python3
"""
Metrics - localization error statistics and the inference-scaling sweep

Errors are reported in meters: normalized distances times extent_m / 2.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import ConfigError, ContractError
from .field import OracleField, OracleFieldSpec
from .irs import IRSConfig, IRSResult, localize_scene
from .synthenv import SceneGenConfig, SyntheticScene, decompose_error, generate_scenes, meters

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ['N', 'R', 'mean_m', 'median_m', 'recall_1m', 'recall_5m', 'wall_ms']
TREND_BAND = 0.02


@dataclass
class EvalConfig:
    """Recall thresholds in meters and, for heading, in degrees."""

    thresholds_m: List[float] = field(default_factory=lambda: [1.0, 5.0])
    orientation_thresholds_deg: List[float] = field(default_factory=lambda: [1.0, 5.0])

    def validate(self) -> 'EvalConfig':
        if not self.thresholds_m or any(t <= 0 for t in self.thresholds_m):
            raise ConfigError('eval.thresholds_m', "needs at least one threshold, all > 0")
        if any(t <= 0 for t in self.orientation_thresholds_deg):
            raise ConfigError('eval.orientation_thresholds_deg', "thresholds must be > 0")
        return self


@dataclass
class SweepConfig:
    """Grid of (N seeds, R rounds) cells; per-cell seeds derive from base_seed."""

    n_list: List[int] = field(default_factory=lambda: [1, 5, 10, 20])
    r_list: List[int] = field(default_factory=lambda: [1, 3, 5, 10])
    base_seed: int = 0

    def validate(self) -> 'SweepConfig':
        if not self.n_list or any(int(n) < 1 for n in self.n_list):
            raise ConfigError('sweep.n_list', "must be a non-empty list of integers >= 1")
        if not self.r_list or any(int(r) < 1 for r in self.r_list):
            raise ConfigError('sweep.r_list', "must be a non-empty list of integers >= 1")
        if self.base_seed < 0:
            raise ConfigError('sweep.base_seed', "must be >= 0")
        return self


def summarize(errors_m: Sequence[float]) -> Tuple[float, float]:
    """(mean, median); an even count takes the midpoint of the two central values."""
    values = np.asarray(list(errors_m), dtype=np.float64)
    if values.size == 0:
        raise ContractError("cannot summarize an empty error list")
    return float(np.mean(values)), float(np.median(values))


def recall_at(errors_m: Sequence[float], threshold_m: float) -> float:
    """Fraction of errors <= threshold."""
    if threshold_m <= 0:
        raise ContractError(f"threshold must be > 0, got {threshold_m}")
    values = np.asarray(list(errors_m), dtype=np.float64)
    if values.size == 0:
        return 0.0
    return float(np.count_nonzero(values <= threshold_m)) / values.size


def orientation_error_deg(p_hat: Sequence[float], g: Sequence[float]) -> float:
    dot = float(p_hat[0]) * float(g[0]) + float(p_hat[1]) * float(g[1])
    return math.degrees(math.acos(min(1.0, max(-1.0, dot))))


@dataclass
class SceneRow:
    scene_id: int
    error_m: float
    lateral_m: float
    longitudinal_m: float
    final_spread: float
    wall_ms: float
    context_eval_count: int
    orientation_deg: Optional[float] = None


@dataclass
class EvalReport:
    """
    Aggregate over scenes.

    recall maps 'overall' / 'lateral' / 'longitudinal' to {threshold_m: fraction};
    orientation fields stay None outside 3-DoF evaluation.
    """

    mean_m: float
    median_m: float
    recall: Dict[str, Dict[float, float]]
    rows: List[SceneRow]
    orientation_mean_deg: Optional[float] = None
    orientation_median_deg: Optional[float] = None
    orientation_recall: Optional[Dict[float, float]] = None
    wall_ms: float = 0.0

    def recall_overall(self, threshold_m: float) -> float:
        return self.recall['overall'][float(threshold_m)]

    def to_dict(self, include_timing: bool = True) -> Dict:
        """JSON-ready view; without timing the output is a pure function of the inputs."""
        rows = [asdict(row) for row in self.rows]
        if not include_timing:
            for row in rows:
                row.pop('wall_ms')
        out = {
            'mean_m': self.mean_m,
            'median_m': self.median_m,
            'recall': {kind: {f"{t:g}": v for t, v in table.items()}
                       for kind, table in self.recall.items()},
            'scenes': rows,
        }
        if include_timing:
            out['wall_ms'] = self.wall_ms
        if self.orientation_recall is not None:
            out['orientation_mean_deg'] = self.orientation_mean_deg
            out['orientation_median_deg'] = self.orientation_median_deg
            out['orientation_recall'] = {f"{t:g}": v for t, v in self.orientation_recall.items()}
        return out

    def write_json(self, path: Union[str, Path], include_timing: bool = False) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True), encoding='utf-8')
        return path


def build_report(rows: Sequence[SceneRow], eval_config: Optional[EvalConfig] = None,
                 wall_ms: float = 0.0) -> EvalReport:
    eval_config = (eval_config or EvalConfig()).validate()
    if not rows:
        raise ContractError("no scenes to report on")
    overall = [r.error_m for r in rows]
    lateral = [r.lateral_m for r in rows]
    longitudinal = [r.longitudinal_m for r in rows]
    mean_m, median_m = summarize(overall)
    recall = {
        kind: {float(t): recall_at(values, t) for t in eval_config.thresholds_m}
        for kind, values in (('overall', overall), ('lateral', lateral), ('longitudinal', longitudinal))
    }
    report = EvalReport(mean_m, median_m, recall, list(rows), wall_ms=wall_ms)
    angles = [r.orientation_deg for r in rows if r.orientation_deg is not None]
    if angles:
        report.orientation_mean_deg, report.orientation_median_deg = summarize(angles)
        report.orientation_recall = {float(t): recall_at(angles, t)
                                     for t in eval_config.orientation_thresholds_deg}
    return report


def scene_row(scene: SyntheticScene, result: IRSResult) -> SceneRow:
    err = result.estimate.as_array() - scene.q_gt.as_array()
    lateral, longitudinal = decompose_error(err, scene.gamma_gt, scene.map_extent_m)
    orientation = None
    if result.orientation is not None:
        orientation = orientation_error_deg(result.orientation, scene.gamma_gt)
    return SceneRow(
        scene_id=scene.scene_id,
        error_m=meters(result.estimate, scene.q_gt, scene.map_extent_m),
        lateral_m=lateral,
        longitudinal_m=longitudinal,
        final_spread=result.spread_per_round[-1],
        wall_ms=result.wall_ms,
        context_eval_count=result.context_eval_count,
        orientation_deg=orientation,
    )


def evaluate(field_model, scenes: Sequence[SyntheticScene], irs_config: IRSConfig,
             eval_config: Optional[EvalConfig] = None, orientation: bool = False,
             seed_fn=None) -> Tuple[EvalReport, List[IRSResult]]:
    """
    Localize every scene with IRS and aggregate.

    Args:
        field_model: MlpField or OracleField
        scenes: scenes to evaluate, in fixed order
        irs_config: N, R, prior; rng_seed is replaced per scene when seed_fn is given
        eval_config: recall thresholds
        orientation: also estimate and score heading
        seed_fn: optional callable scene_id -> IRS rng seed

    Returns:
        (EvalReport, per-scene IRSResult list)
    """
    start = time.perf_counter()
    rows: List[SceneRow] = []
    results: List[IRSResult] = []
    for scene in scenes:
        config = irs_config
        if seed_fn is not None:
            config = replace(irs_config, rng_seed=int(seed_fn(scene.scene_id)))
        model = field_model.for_scene(scene)
        result = localize_scene(model, model.encode, scene, config, orientation=orientation)
        results.append(result)
        rows.append(scene_row(scene, result))
    wall_ms = (time.perf_counter() - start) * 1000.0
    return build_report(rows, eval_config, wall_ms=wall_ms), results


# ---------------------------------------------------------------------------
# Inference-scaling sweep
# ---------------------------------------------------------------------------

def cell_seed(base_seed: int, n_seeds: int, rounds: int, scene_id: int) -> int:
    """Mix (base, N, R, scene) through numpy's SeedSequence hash into one 32-bit seed."""
    seq = np.random.SeedSequence([int(base_seed), int(n_seeds), int(rounds), int(scene_id)])
    return int(seq.generate_state(1)[0])


@dataclass
class SweepResult:
    cells: Dict[Tuple[int, int], EvalReport]
    n_list: List[int]
    r_list: List[int]

    def mean(self, n: int, r: int) -> float:
        return self.cells[(n, r)].mean_m

    def frame(self) -> pd.DataFrame:
        rows = []
        for n in self.n_list:
            for r in self.r_list:
                report = self.cells[(n, r)]
                rows.append({
                    'N': n,
                    'R': r,
                    'mean_m': report.mean_m,
                    'median_m': report.median_m,
                    'recall_1m': report.recall['overall'].get(1.0, float('nan')),
                    'recall_5m': report.recall['overall'].get(5.0, float('nan')),
                    'wall_ms': report.wall_ms,
                })
        return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def scaling_sweep(field_model, scenes: Sequence[SyntheticScene], n_list: Sequence[int],
                  r_list: Sequence[int], base_seed: int = 0,
                  eval_config: Optional[EvalConfig] = None,
                  prior: Tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)) -> SweepResult:
    """Run IRS for every (N, R) cell over all scenes with per-cell derived seeds."""
    SweepConfig(list(n_list), list(r_list), base_seed).validate()
    if not scenes:
        raise ContractError("sweep needs at least one scene")
    cells = {}
    for n in n_list:
        for r in r_list:
            config = IRSConfig(n_seeds=int(n), rounds=int(r), prior=tuple(prior))
            report, _ = evaluate(field_model, scenes, config, eval_config,
                                 seed_fn=lambda sid, n=n, r=r: cell_seed(base_seed, n, r, sid))
            cells[(int(n), int(r))] = report
            logger.info("sweep cell N=%d R=%d: mean %.3f m, median %.3f m, %.1f ms",
                        n, r, report.mean_m, report.median_m, report.wall_ms)
    return SweepResult(cells, [int(n) for n in n_list], [int(r) for r in r_list])


def write_sweep_csv(sweep: SweepResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sweep.frame().to_csv(path, index=False, float_format='%.17g')
    return path


def write_sweep_json(sweep: SweepResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {f"N={n},R={r}": report.to_dict(include_timing=False) for (n, r), report in sweep.cells.items()}
    payload['trend'] = trend_summary(sweep)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding='utf-8')
    return path


def non_increasing(values: Sequence[float], band: float = TREND_BAND) -> bool:
    """Each value may exceed its predecessor by at most `band` (relative)."""
    return all(b <= a * (1.0 + band) + 1e-12 for a, b in zip(values, values[1:]))


def trend_summary(sweep: SweepResult) -> Dict:
    """
    Check the monotonic-improvement trends the sweep is meant to show.

    rounds: means over R at N=10 (or the largest N) are non-increasing and the
    largest drop is the first one. seeds: means over N at R=5 (or the largest R)
    are non-increasing. single_vs_full: mean error ratio of (10, 5) to (1, 1)
    when both cells exist.
    """
    out: Dict = {}
    n_ref = 10 if 10 in sweep.n_list else max(sweep.n_list)
    r_ref = 5 if 5 in sweep.r_list else max(sweep.r_list)
    checks = []

    if len(sweep.r_list) > 1:
        means = [sweep.mean(n_ref, r) for r in sweep.r_list]
        drops = [a - b for a, b in zip(means, means[1:])]
        first_largest = drops[0] >= max(drops) if drops else True
        out['rounds'] = {'N': n_ref, 'means': means, 'non_increasing': non_increasing(means),
                         'first_drop_largest': bool(first_largest)}
        checks += [out['rounds']['non_increasing'], out['rounds']['first_drop_largest']]

    if len(sweep.n_list) > 1:
        means = [sweep.mean(n, r_ref) for n in sweep.n_list]
        out['seeds'] = {'R': r_ref, 'means': means, 'non_increasing': non_increasing(means)}
        checks.append(out['seeds']['non_increasing'])

    if (1, 1) in sweep.cells and (10, 5) in sweep.cells:
        single = sweep.mean(1, 1)
        ratio = sweep.mean(10, 5) / single if single > 0 else (0.0 if sweep.mean(10, 5) == 0 else math.inf)
        out['single_vs_full'] = {'ratio': ratio, 'passed': ratio <= 0.75}
        checks.append(out['single_vs_full']['passed'])

    out['passed'] = bool(all(checks)) if checks else True
    return out


def main():
    """Sweep a contracting oracle over a few synthetic scenes"""

    config = SceneGenConfig(count=5)
    scenes = generate_scenes(config)
    oracle = OracleField(OracleFieldSpec(distance_scale=0.5))
    sweep = scaling_sweep(oracle, scenes, [1, 10], [1, 3, 5])
    print(sweep.frame().to_string(index=False))
    print(trend_summary(sweep))


if __name__ == "__main__":
    main()
