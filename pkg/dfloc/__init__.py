"""
dfloc - probabilistic displacement-field localization

Locates a ground view inside a satellite token grid: a coordinate-conditioned
regression field predicts a displacement distribution (Gaussian over distance,
von Mises-Fisher over direction) toward the true pose, and Iterative
Refinement Sampling moves a population of pose seeds along the predicted
means until it agrees on an estimate.
"""

__version__ = "0.3.0"

from .field import MlpField, ModelConfig, OracleField, OracleFieldSpec, PoseHypothesis
from .irs import IRSConfig, IRSResult, run_irs
from .localizer import Localizer
from .synthenv import SceneGenConfig, generate_scenes

__all__ = ['Localizer', 'MlpField', 'ModelConfig', 'OracleField', 'OracleFieldSpec', 'PoseHypothesis',
           'IRSConfig', 'IRSResult', 'run_irs', 'SceneGenConfig', 'generate_scenes']
