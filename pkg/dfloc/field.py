#!/usr/bin/env python3
"""
Field - the regression field v(q0, f_vis) -> displacement distribution

Two realizations share one interface: MlpField, the trainable network, and
OracleField, an analytic stand-in that points at a known target.
"""

import logging
import math
import threading
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .distributions import (EPS_DIR, DisplacementDistribution, HeadTensors, heads_to_arrays,
                            heads_to_tensors)
from .encoder import (BoundEncoder, EncoderParams, VisualContext, embed_batch, encode_scene,
                      fuse_batch)
from .errors import ConfigError, ContractError, NumericFault, ShapeError, UnsupportedModeError

logger = logging.getLogger(__name__)

TRUNK_ACTIVATIONS = ('relu', 'tanh')
ORACLE_KAPPA_MAX = 1e6
ORACLE_SIGMA2_MIN = 1e-12


class EncodeCounter:
    """Scene encodings performed by one field; safe to tick from worker threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def tick(self):
        with self._lock:
            self.value += 1


@dataclass(frozen=True)
class PoseHypothesis:
    """Location in normalized map coordinates, optionally with a unit heading vector."""

    x: float
    y: float
    gamma: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not (-1.0 <= self.x <= 1.0 and -1.0 <= self.y <= 1.0):
            raise ContractError(f"pose ({self.x}, {self.y}) lies outside [-1, 1]^2")
        if self.gamma is not None and abs(math.hypot(*self.gamma) - 1.0) > 1e-9:
            raise ContractError(f"gamma must be a unit vector, got {self.gamma}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)

    @classmethod
    def from_array(cls, q: Sequence[float], gamma: Optional[Tuple[float, float]] = None) -> 'PoseHypothesis':
        return cls(float(q[0]), float(q[1]), gamma)


@dataclass
class DisplacementBatch:
    """Distribution parameters for N hypotheses at once."""

    mu_r: np.ndarray       # [N]
    sigma2_r: np.ndarray   # [N]
    mu_theta: np.ndarray   # [N x 2]
    kappa: np.ndarray      # [N]

    def __len__(self) -> int:
        return int(self.mu_r.shape[0])

    def item(self, i: int) -> DisplacementDistribution:
        return DisplacementDistribution(
            mu_r=float(self.mu_r[i]),
            sigma2_r=float(self.sigma2_r[i]),
            mu_theta=(float(self.mu_theta[i, 0]), float(self.mu_theta[i, 1])),
            kappa=float(self.kappa[i]),
        )


@dataclass
class ModelConfig:
    """
    Architecture of the encoder and the MLP field.

    Attributes:
        dim: token channels d (divisible by 4 and by heads)
        heads: cross-attention heads
        embed_dim: coordinate projection width
        hidden: trunk width
        orientation_hidden: orientation head width (used in 3-DoF mode)
        coord_activation: 'tanh' or 'identity'
        trunk_activation: 'relu' or 'tanh'
        init_scale: multiplier on every initial weight std
        tied_qk: start W_K equal to W_Q
    """

    dim: int = 128
    heads: int = 4
    embed_dim: int = 16
    hidden: int = 256
    orientation_hidden: int = 64
    coord_activation: str = 'tanh'
    trunk_activation: str = 'relu'
    init_scale: float = 1.0
    tied_qk: bool = True

    def validate(self) -> 'ModelConfig':
        if self.dim < 4 or self.dim % 4 != 0:
            raise ConfigError('model.dim', f"must be a positive multiple of 4, got {self.dim}")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigError('model.heads', f"must divide model.dim={self.dim}, got {self.heads}")
        for name in ('embed_dim', 'hidden', 'orientation_hidden'):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name}", "must be >= 1")
        if self.coord_activation not in ('tanh', 'identity'):
            raise ConfigError('model.coord_activation', "must be 'tanh' or 'identity'")
        if self.trunk_activation not in TRUNK_ACTIVATIONS:
            raise ConfigError('model.trunk_activation', f"must be one of {TRUNK_ACTIVATIONS}")
        if self.init_scale <= 0.0:
            raise ConfigError('model.init_scale', "must be > 0")
        return self


def _as_f_vis(f_vis: Union[VisualContext, np.ndarray]) -> np.ndarray:
    if isinstance(f_vis, VisualContext):
        return f_vis.f_vis
    return np.asarray(f_vis, dtype=np.float64)


def _as_batch(q) -> np.ndarray:
    if isinstance(q, PoseHypothesis):
        return q.as_array()[None, :]
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or q.shape[1] != 2:
        raise ShapeError(f"hypotheses must be [N x 2], got {q.shape}")
    return q


# ---------------------------------------------------------------------------
# MLP field
# ---------------------------------------------------------------------------

@dataclass
class MlpFieldParams:
    """
    Trunk z -> hidden -> hidden, distance head -> (a_r, b_r),
    direction head -> (c1, c2, d_kappa), optional orientation head z -> 64 -> 2.
    """

    layers: Dict[str, np.ndarray]
    activation: str = 'relu'

    TRUNK = ('W1', 'b1', 'W2', 'b2')
    HEADS = ('W_r', 'b_r', 'W_d', 'b_d')
    ORIENTATION = ('W_o1', 'b_o1', 'W_o2', 'b_o2')

    def __post_init__(self):
        if self.activation not in TRUNK_ACTIVATIONS:
            raise ContractError(f"trunk activation must be one of {TRUNK_ACTIVATIONS}")
        missing = [n for n in self.TRUNK + self.HEADS if n not in self.layers]
        if missing:
            raise ContractError(f"field parameters missing: {missing}")
        for name, value in self.layers.items():
            if not np.all(np.isfinite(value)):
                raise NumericFault("non-finite field parameter", layer=name)

    @property
    def has_orientation(self) -> bool:
        return all(n in self.layers for n in self.ORIENTATION)

    @property
    def input_dim(self) -> int:
        return int(self.layers['W1'].shape[0])

    @classmethod
    def initialize(cls, input_dim: int, hidden: int, rng: np.random.Generator,
                   orientation_hidden: Optional[int] = None, activation: str = 'relu',
                   scale: float = 1.0) -> 'MlpFieldParams':
        def dense(fan_in: int, fan_out: int, gain: float) -> np.ndarray:
            return rng.normal(0.0, scale * gain / np.sqrt(fan_in), (fan_in, fan_out))

        gain = np.sqrt(2.0) if activation == 'relu' else 1.0
        layers = {
            'W1': dense(input_dim, hidden, gain), 'b1': np.zeros(hidden),
            'W2': dense(hidden, hidden, gain), 'b2': np.zeros(hidden),
            'W_r': dense(hidden, 2, 0.1), 'b_r': np.zeros(2),
            'W_d': dense(hidden, 3, 0.1), 'b_d': np.zeros(3),
        }
        if orientation_hidden:
            layers.update({
                'W_o1': dense(input_dim, orientation_hidden, np.sqrt(2.0)),
                'b_o1': np.zeros(orientation_hidden),
                'W_o2': dense(orientation_hidden, 2, 1.0),
                'b_o2': np.zeros(2),
            })
        return cls(layers, activation)

    def names(self) -> List[str]:
        names = list(self.TRUNK + self.HEADS)
        if self.has_orientation:
            names += list(self.ORIENTATION)
        return names

    def named(self) -> Dict[str, np.ndarray]:
        return {f"field.{n}": self.layers[n] for n in self.names()}

    def replace(self, named: Dict[str, np.ndarray]) -> 'MlpFieldParams':
        return MlpFieldParams({n: np.asarray(named[f"field.{n}"], dtype=np.float64)
                               for n in self.names()}, self.activation)

    def bind(self, tape: ad.Tape, trainable: bool = False) -> Dict[str, ad.Tensor]:
        make = tape.leaf if trainable else tape.constant
        return {n: make(self.layers[n], name=f"field.{n}") for n in self.names()}


@dataclass
class FieldOutputs:
    heads: HeadTensors
    distance_raw: ad.Tensor
    direction_raw: ad.Tensor
    orientation_raw: Optional[ad.Tensor] = None


class MlpField:
    """
    Trainable regression field.

    Example:
        >>> field = MlpField.initialize(model_config, rng, orientation=False)
        >>> dist = field.predict(PoseHypothesis(0.1, -0.3), context)
    """

    def __init__(self, encoder: EncoderParams, params: MlpFieldParams):
        if params.input_dim != encoder.dim + encoder.embed_dim:
            raise ShapeError(f"trunk input {params.input_dim} != "
                             f"{encoder.dim} + {encoder.embed_dim}")
        self.encoder = encoder
        self.params = params
        self.encodes = EncodeCounter()

    @classmethod
    def initialize(cls, config, rng: np.random.Generator, orientation: bool = False) -> 'MlpField':
        """
        Build a freshly seeded field from a ModelConfig.

        Args:
            config: ModelConfig (dim, heads, embed_dim, hidden, ...)
            rng: numpy Generator used for every initial weight
            orientation: append the orientation head (3-DoF mode)
        """
        encoder = EncoderParams.initialize(config.dim, config.heads, config.embed_dim, rng,
                                           coord_activation=config.coord_activation,
                                           scale=config.init_scale,
                                           tied_qk=config.tied_qk)
        params = MlpFieldParams.initialize(config.dim + config.embed_dim, config.hidden, rng,
                                           orientation_hidden=config.orientation_hidden if orientation else None,
                                           activation=config.trunk_activation,
                                           scale=config.init_scale)
        return cls(encoder, params)

    @property
    def supports_orientation(self) -> bool:
        return self.params.has_orientation

    def encode(self, ground, satellite) -> VisualContext:
        """Scene context, computed once per scene and reused by every prediction."""
        self.encodes.tick()
        context = encode_scene(ground, satellite, self.encoder)
        return VisualContext(context.f_vis)

    def for_scene(self, scene) -> 'MlpField':
        return self

    def named_parameters(self) -> Dict[str, np.ndarray]:
        named = dict(self.encoder.named())
        named.update(self.params.named())
        return named

    def with_parameters(self, named: Dict[str, np.ndarray]) -> 'MlpField':
        return MlpField(self.encoder.replace(named), self.params.replace(named))

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.named_parameters().values()))

    def orientation_overhead(self) -> float:
        """Fraction of all parameters that belong to the orientation head."""
        if not self.supports_orientation:
            return 0.0
        head = sum(self.params.layers[n].size for n in MlpFieldParams.ORIENTATION)
        return head / self.parameter_count()

    # -- tape forward ------------------------------------------------------

    def _layer(self, name: str, fn):
        try:
            return fn()
        except NumericFault as exc:
            raise NumericFault("non-finite activation", layer=name) from exc

    def forward(self, z: ad.Tensor, bound: Dict[str, ad.Tensor]) -> FieldOutputs:
        """Heads for a batch of joint vectors z [B x (d + embed_dim)]."""
        act = ad.relu if self.params.activation == 'relu' else ad.tanh
        h1 = self._layer('trunk.0', lambda: act(ad.add(ad.matmul(z, bound['W1']), bound['b1'])))
        h2 = self._layer('trunk.1', lambda: act(ad.add(ad.matmul(h1, bound['W2']), bound['b2'])))
        distance_raw = self._layer('head.distance',
                                   lambda: ad.add(ad.matmul(h2, bound['W_r']), bound['b_r']))
        direction_raw = self._layer('head.direction',
                                    lambda: ad.add(ad.matmul(h2, bound['W_d']), bound['b_d']))
        heads = self._layer('head.parameterization',
                            lambda: heads_to_tensors(distance_raw, direction_raw))
        orientation_raw = None
        if self.supports_orientation:
            orientation_raw = self._layer('head.orientation', lambda: self._orientation(z, bound))
        return FieldOutputs(heads, distance_raw, direction_raw, orientation_raw)

    def _orientation(self, z: ad.Tensor, bound: Dict[str, ad.Tensor]) -> ad.Tensor:
        hidden = ad.relu(ad.add(ad.matmul(z, bound['W_o1']), bound['b_o1']))
        return ad.add(ad.matmul(hidden, bound['W_o2']), bound['b_o2'])

    def joint_batch(self, q: np.ndarray, f_rows: Sequence[ad.Tensor], enc: BoundEncoder,
                    tape: ad.Tape) -> ad.Tensor:
        """z rows for hypotheses q [B x 2] with their per-row context tensors."""
        s = self._layer('coord_projection', lambda: embed_batch(q, enc, tape))
        return fuse_batch(f_rows, s)

    def _inference(self, q, f_vis) -> Tuple[FieldOutputs, np.ndarray]:
        q = _as_batch(q)
        f = _as_f_vis(f_vis)
        if f.shape != (self.encoder.dim,):
            raise ShapeError(f"f_vis must have shape ({self.encoder.dim},), got {f.shape}")
        tape = ad.Tape()
        enc = self.encoder.bind(tape)
        f_t = tape.constant(f)
        z = self.joint_batch(q, [f_t] * q.shape[0], enc, tape)
        return self.forward(z, self.params.bind(tape)), z.value

    def predict_batch_on_tape(self, q, f_vis) -> DisplacementBatch:
        """Same as predict_batch but through the autodiff ops; used to cross-check."""
        outputs, _ = self._inference(q, f_vis)
        arrays = heads_to_arrays(outputs.distance_raw.value, outputs.direction_raw.value)
        return DisplacementBatch(**arrays)

    # -- inference ---------------------------------------------------------

    def _numpy_joint(self, q, f_vis) -> np.ndarray:
        q = _as_batch(q)
        if np.any(np.abs(q) > 1.0):
            raise ContractError("hypothesis coordinates must lie in [-1, 1]")
        f = _as_f_vis(f_vis)
        if f.shape != (self.encoder.dim,):
            raise ShapeError(f"f_vis must have shape ({self.encoder.dim},), got {f.shape}")
        s = q @ self.encoder.W_c + self.encoder.b_c
        if self.encoder.coord_activation == 'tanh':
            s = np.tanh(s)
        return np.concatenate([np.broadcast_to(f, (q.shape[0], f.shape[0])), s], axis=1)

    def _numpy_heads(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        layers = self.params.layers
        if self.params.activation == 'relu':
            act = lambda v: v * (v > 0.0)
        else:
            act = np.tanh
        h = z
        for index, (w, b) in enumerate((('W1', 'b1'), ('W2', 'b2'))):
            h = act(h @ layers[w] + layers[b])
            if not np.all(np.isfinite(h)):
                raise NumericFault("non-finite activation", layer=f"trunk.{index}")
        distance_raw = h @ layers['W_r'] + layers['b_r']
        direction_raw = h @ layers['W_d'] + layers['b_d']
        if not (np.all(np.isfinite(distance_raw)) and np.all(np.isfinite(direction_raw))):
            raise NumericFault("non-finite head output", layer='head')
        return distance_raw, direction_raw

    def predict_batch(self, q, f_vis) -> DisplacementBatch:
        """Distribution parameters for hypotheses q [N x 2] under one scene context."""
        distance_raw, direction_raw = self._numpy_heads(self._numpy_joint(q, f_vis))
        return DisplacementBatch(**heads_to_arrays(distance_raw, direction_raw))

    def predict(self, q0: PoseHypothesis, f_vis) -> DisplacementDistribution:
        return self.predict_batch(q0, f_vis).item(0)

    def predict_orientation(self, z: np.ndarray) -> np.ndarray:
        """Raw (unnormalized) orientation 2-vector from one joint vector z."""
        if not self.supports_orientation:
            raise UnsupportedModeError("orientation head requires 3-DoF mode")
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.params.input_dim,):
            raise ShapeError(f"z must have shape ({self.params.input_dim},), got {z.shape}")
        tape = ad.Tape()
        out = self._orientation(tape.constant(z[None, :]), self.params.bind(tape))
        return out.value[0].copy()

    def predict_orientation_batch(self, q, f_vis) -> np.ndarray:
        if not self.supports_orientation:
            raise UnsupportedModeError("orientation head requires 3-DoF mode")
        z = self._numpy_joint(q, f_vis)
        layers = self.params.layers
        hidden = z @ layers['W_o1'] + layers['b_o1']
        hidden = hidden * (hidden > 0.0)
        return hidden @ layers['W_o2'] + layers['b_o2']


# ---------------------------------------------------------------------------
# Oracle field
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleFieldSpec:
    """
    Analytic field pointing at `target`.

    distance_scale scales the true distance (1.0 reaches the target in one
    step); the noise terms are deterministic functions of (noise_seed, q0).
    A None target makes the oracle follow each scene's ground truth through
    OracleField.for_scene.
    """

    target: Optional[PoseHypothesis] = None
    distance_scale: float = 1.0
    direction_noise_std: float = 0.0
    distance_noise_std: float = 0.0
    noise_seed: int = 0
    heading: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not 0.0 < self.distance_scale <= 1.0:
            raise ContractError(f"distance_scale must lie in (0, 1], got {self.distance_scale}")
        if self.direction_noise_std < 0.0 or self.distance_noise_std < 0.0:
            raise ContractError("noise standard deviations must be >= 0")


class OracleField:
    """Test double for the learned field; ignores f_vis."""

    def __init__(self, spec: OracleFieldSpec):
        self.spec = spec
        self.encodes = EncodeCounter()

    @property
    def supports_orientation(self) -> bool:
        return self.spec.heading is not None

    def encode(self, ground, satellite) -> VisualContext:
        self.encodes.tick()
        return VisualContext(np.zeros(ground.dim))

    def for_scene(self, scene) -> 'OracleField':
        """Oracle aimed at this scene; a fixed target is kept as is."""
        if self.spec.target is not None:
            return self
        return OracleField(replace(self.spec, target=scene.q_gt, heading=scene.gamma_gt))

    def _noise(self, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        n = q.shape[0]
        spec = self.spec
        if spec.direction_noise_std == 0.0 and spec.distance_noise_std == 0.0:
            return np.zeros(n), np.zeros(n)
        bits = np.ascontiguousarray(q).view(np.uint64)
        angle = np.empty(n)
        dist = np.empty(n)
        for i in range(n):
            rng = np.random.default_rng([spec.noise_seed, int(bits[i, 0]), int(bits[i, 1])])
            angle[i], dist[i] = rng.standard_normal(2)
        return angle * spec.direction_noise_std, dist * spec.distance_noise_std

    def predict_batch(self, q, f_vis=None) -> DisplacementBatch:
        q = _as_batch(q)
        spec = self.spec
        if spec.target is None:
            raise ContractError("oracle has no target; bind it with for_scene first")
        u = spec.target.as_array()[None, :] - q
        r = np.linalg.norm(u, axis=1)
        reached = r < EPS_DIR
        direction = np.where(reached[:, None], np.array([[1.0, 0.0]]),
                             u / np.where(reached, 1.0, r)[:, None])
        angle_noise, dist_noise = self._noise(q)
        c, s = np.cos(angle_noise), np.sin(angle_noise)
        rotated = np.stack([c * direction[:, 0] - s * direction[:, 1],
                            s * direction[:, 0] + c * direction[:, 1]], axis=1)
        # keep exact unit norm after rotation
        rotated /= np.linalg.norm(rotated, axis=1, keepdims=True)
        mu_r = np.where(reached, 0.0, np.maximum(spec.distance_scale * r + dist_noise, 0.0))
        if spec.direction_noise_std > 0.0:
            kappa = np.full(len(r), min(1.0 / spec.direction_noise_std ** 2, ORACLE_KAPPA_MAX))
        else:
            kappa = np.full(len(r), ORACLE_KAPPA_MAX)
        sigma2 = np.full(len(r), max(spec.distance_noise_std ** 2, ORACLE_SIGMA2_MIN))
        return DisplacementBatch(mu_r, sigma2, rotated, kappa)

    def predict(self, q0: PoseHypothesis, f_vis=None) -> DisplacementDistribution:
        return self.predict_batch(q0, f_vis).item(0)

    def predict_orientation_batch(self, q, f_vis=None) -> np.ndarray:
        if not self.supports_orientation:
            raise UnsupportedModeError("oracle has no heading")
        q = _as_batch(q)
        return np.tile(np.asarray(self.spec.heading, dtype=np.float64), (q.shape[0], 1))


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

def refine_batch(q: np.ndarray, dist: DisplacementBatch) -> np.ndarray:
    """q + mu_r * mu_theta / |mu_theta|, clamped to [-1, 1]^2."""
    q = _as_batch(q)
    norm = np.linalg.norm(dist.mu_theta, axis=1, keepdims=True)
    step = dist.mu_r[:, None] * dist.mu_theta / norm
    return np.clip(q + step, -1.0, 1.0)


def refine_step(q0: PoseHypothesis, dist: DisplacementDistribution) -> PoseHypothesis:
    """One application of the mean predicted displacement."""
    batch = DisplacementBatch(np.array([dist.mu_r]), np.array([dist.sigma2_r]),
                              np.array([dist.mu_theta], dtype=np.float64), np.array([dist.kappa]))
    q1 = refine_batch(q0.as_array(), batch)[0]
    return PoseHypothesis.from_array(q1, q0.gamma)
