#!/usr/bin/env python3
"""
Localizer - high-level API for pose estimation on token-grid scenes
Wires a field (trained checkpoint or analytic oracle) to IRS
"""

import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from .errors import ConfigError
from .field import MlpField, OracleField, OracleFieldSpec, PoseHypothesis
from .irs import IRSConfig, IRSResult, localize_scene, result_to_json
from .metrics import orientation_error_deg, scene_row
from .synthenv import SyntheticScene
from .trainer import field_from_checkpoint

logger = logging.getLogger(__name__)


class Localizer:
    """
    Estimate where a ground view was taken inside a satellite grid.

    Example:
        >>> localizer = Localizer.from_checkpoint('runs/train/model.ckpt')
        >>> pose = localizer.localize(scene)
        >>> print(pose.x, pose.y)
    """

    def __init__(self, checkpoint: Optional[Union[str, Path]] = None,
                 oracle: Optional[OracleFieldSpec] = None,
                 irs_config: Optional[IRSConfig] = None,
                 orientation: bool = False,
                 converged_spread: float = 1e-3):
        """
        Initialize the localizer.

        Args:
            checkpoint: trained checkpoint to load the field from
            oracle: analytic field instead of a checkpoint (target None follows each scene)
            irs_config: seeds, rounds and prior. Default: N=10, R=5 over the whole map
            orientation: also estimate heading (needs an orientation-capable field)
            converged_spread: final population spread below which a run counts as converged
        """
        if (checkpoint is None) == (oracle is None):
            raise ConfigError('field', "give exactly one of checkpoint or oracle")
        self.checkpoint = checkpoint
        self.oracle = oracle
        self.irs_config = (irs_config or IRSConfig()).validate()
        self.orientation = orientation
        self.converged_spread = converged_spread
        self._field = None

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], **kwargs) -> 'Localizer':
        return cls(checkpoint=path, **kwargs)

    @classmethod
    def from_oracle(cls, spec: Optional[OracleFieldSpec] = None, **kwargs) -> 'Localizer':
        return cls(oracle=spec or OracleFieldSpec(), **kwargs)

    @property
    def field(self) -> Union[MlpField, OracleField]:
        """Lazy load the field."""
        if self._field is None:
            if self.checkpoint is not None:
                self._field = field_from_checkpoint(self.checkpoint)
                logger.info("loaded field from %s (%d parameters)",
                            self.checkpoint, self._field.parameter_count())
            else:
                self._field = OracleField(self.oracle)
        return self._field

    def run(self, scene: SyntheticScene, irs_config: Optional[IRSConfig] = None) -> IRSResult:
        model = self.field.for_scene(scene)
        return localize_scene(model, model.encode, scene, irs_config or self.irs_config,
                              orientation=self.orientation)

    def localize(self, scene: SyntheticScene) -> PoseHypothesis:
        """
        Pose estimate for one scene.

        Args:
            scene: SyntheticScene (or any object with ground, satellite and scene_id)

        Returns:
            PoseHypothesis, with gamma set in orientation mode
        """
        return self.run(scene).estimate

    def localize_with_confidence(self, scene: SyntheticScene) -> Dict:
        """
        Localize with the population spread as a confidence proxy.

        Returns:
            Dict with:
                - estimate: (x, y)
                - spread: final population spread (normalized units)
                - converged: spread below converged_spread
                - processing_time_ms: wall time including the scene encoding
                - context_eval_count: scene encodings observed during the call (1 when the context is reused)
        """
        start_time = time.time()
        result = self.run(scene)
        processing_time = (time.time() - start_time) * 1000
        out = {
            'estimate': (result.estimate.x, result.estimate.y),
            'spread': result.spread_per_round[-1],
            'converged': result.spread_per_round[-1] < self.converged_spread,
            'processing_time_ms': processing_time,
            'context_eval_count': result.context_eval_count,
        }
        if result.orientation is not None:
            out['heading'] = result.orientation
        return out

    def batch_localize(self, scenes: Sequence[SyntheticScene]) -> List[Dict]:
        """Same format as localize_with_confidence, plus scene_id and the error against q_gt."""
        results = []
        for scene in scenes:
            result = self.run(scene)
            row = scene_row(scene, result)
            results.append({
                'scene_id': scene.scene_id,
                'estimate': (result.estimate.x, result.estimate.y),
                'spread': result.spread_per_round[-1],
                'converged': result.spread_per_round[-1] < self.converged_spread,
                'processing_time_ms': result.wall_ms,
                'context_eval_count': result.context_eval_count,
                'error_m': row.error_m,
            })
        return results

    def analyze(self, scene: SyntheticScene, rounds: Optional[int] = None) -> Dict:
        """
        Detailed view of one IRS run.

        Returns:
            Dict with the JSON result export plus per-round spread, the geometric
            median, the mean predicted sigma^2 and kappa per round, and, when
            q_gt is known, the error in meters (and degrees in orientation mode)
        """
        config = self.irs_config if rounds is None else replace(self.irs_config, rounds=rounds)
        result = self.run(scene, config)
        out = result_to_json(result)
        out['mean_kappa_per_round'] = [float(v) for v in result.kappa.mean(axis=0)]
        out['mean_sigma2_per_round'] = [float(v) for v in result.sigma2.mean(axis=0)]
        out['wall_ms'] = result.wall_ms
        if getattr(scene, 'q_gt', None) is not None:
            row = scene_row(scene, result)
            out['error_m'] = row.error_m
            out['lateral_m'] = row.lateral_m
            out['longitudinal_m'] = row.longitudinal_m
            if result.orientation is not None:
                out['orientation_error_deg'] = orientation_error_deg(result.orientation, scene.gamma_gt)
        return out
