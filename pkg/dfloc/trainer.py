#!/usr/bin/env python3
"""
Trainer - end-to-end training of encoder and field on synthetic scenes

Every step draws fresh hypotheses q0 uniformly over the map for every scene
in the batch, regresses the displacement toward q_gt with the summed
negative log-likelihoods (plus the cosine orientation loss in 3-DoF mode),
and applies AdamW with two learning-rate groups: the attention projections
at lr_backbone, everything else at lr_heads.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .distributions import build_target, total_loss_tensor
from .encoder import EncoderParams, encode_scene
from .errors import ConfigError, ContractError, NumericFault
from .field import MlpField, MlpFieldParams, ModelConfig, PoseHypothesis
from .irs import IRSConfig
from .metrics import evaluate
from .optim import AdamW, AdamWState
from .synthenv import SceneGenConfig, SyntheticScene, generate_scenes

logger = logging.getLogger(__name__)

BACKBONE = ('encoder.W_Q', 'encoder.W_K', 'encoder.W_V')
MODES = ('2dof', '3dof')


@dataclass
class TrainConfig:
    """
    Attributes:
        epochs: passes over the scene set
        batch_size: scenes per step
        hypotheses_per_scene: fresh q0 draws per scene per step, sharing one encoding
        lr_backbone: attention projections
        lr_heads: coordinate projection, trunk and heads
        weight_decay: decoupled decay, all parameters
        betas, eps: Adam moments
        mode: '2dof' or '3dof' (orientation head and loss)
        rng_seed: seeds initialization, shuffling and hypothesis sampling
        max_steps: optional hard stop (0 = unlimited)
        checkpoint_every: save every k epochs (0 = only at the end)
    """

    epochs: int = 300
    batch_size: int = 80
    hypotheses_per_scene: int = 4
    lr_backbone: float = 1e-4
    lr_heads: float = 1e-3
    weight_decay: float = 1e-2
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    mode: str = '2dof'
    rng_seed: int = 0
    max_steps: int = 0
    checkpoint_every: int = 0

    def validate(self) -> 'TrainConfig':
        for name in ('epochs', 'batch_size', 'hypotheses_per_scene'):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"train.{name}", f"must be >= 1, got {getattr(self, name)}")
        for name in ('lr_backbone', 'lr_heads', 'weight_decay'):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0.0:
                raise ConfigError(f"train.{name}", f"must be a finite value >= 0, got {value}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError('train.betas', f"must be two values in [0, 1), got {self.betas}")
        if self.eps <= 0.0:
            raise ConfigError('train.eps', "must be > 0")
        if self.mode not in MODES:
            raise ConfigError('train.mode', f"must be one of {MODES}, got '{self.mode}'")
        if self.max_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError('train.max_steps', "max_steps and checkpoint_every must be >= 0")
        if self.rng_seed < 0:
            raise ConfigError('train.rng_seed', "must be >= 0")
        return self


def parameter_group(name: str) -> str:
    return 'backbone' if name in BACKBONE else 'heads'


def sample_training_hypotheses(rng: np.random.Generator, count: int) -> np.ndarray:
    """[count x 2] poses, uniform over [-1, 1]^2."""
    return rng.uniform(-1.0, 1.0, size=(count, 2))


def sample_training_hypothesis(rng: np.random.Generator) -> PoseHypothesis:
    return PoseHypothesis.from_array(sample_training_hypotheses(rng, 1)[0])


@dataclass
class StepRecord:
    step: int
    loss_r: float
    loss_theta: float
    grad_norm: float
    loss_gamma: Optional[float] = None
    masked: int = 0

    @property
    def total(self) -> float:
        return self.loss_r + self.loss_theta + (self.loss_gamma or 0.0)

    def to_log(self) -> Dict:
        out = {'step': self.step, 'loss_r': self.loss_r, 'loss_theta': self.loss_theta,
               'grad_norm': self.grad_norm}
        if self.loss_gamma is not None:
            out['loss_gamma'] = self.loss_gamma
        return out


@dataclass
class TrainSummary:
    steps: int
    epochs: int
    final_loss: float
    records: List[StepRecord] = field(default_factory=list)
    stopped_early: bool = False


@dataclass
class Batch:
    """Hypotheses and targets for one step; scene_index maps every row to its scene."""

    q0: np.ndarray
    r_gt: np.ndarray
    theta_gt: np.ndarray
    mask: np.ndarray
    scene_index: np.ndarray

    @property
    def masked(self) -> int:
        return int(np.count_nonzero(self.mask == 0.0))


def make_batch(scenes: Sequence[SyntheticScene], q0: np.ndarray) -> Batch:
    """Targets for hypotheses q0 [len(scenes) * K x 2], K consecutive rows per scene."""
    k = q0.shape[0] // len(scenes)
    if k * len(scenes) != q0.shape[0]:
        raise ContractError(f"{q0.shape[0]} hypotheses do not split over {len(scenes)} scenes")
    scene_index = np.repeat(np.arange(len(scenes)), k)
    r_gt = np.empty(q0.shape[0])
    theta_gt = np.empty((q0.shape[0], 2))
    mask = np.empty(q0.shape[0])
    for row, s in enumerate(scene_index):
        target = build_target(q0[row], (scenes[s].q_gt.x, scenes[s].q_gt.y))
        r_gt[row] = target.r_gt
        theta_gt[row] = target.theta_gt
        mask[row] = 0.0 if target.masked else 1.0
    return Batch(q0, r_gt, theta_gt, mask, scene_index)


def batch_loss(field_model: MlpField, scenes: Sequence[SyntheticScene], batch: Batch,
               orientation: bool, trainable: bool = True) -> Tuple[ad.Tape, Dict[str, ad.Tensor]]:
    """Record the forward pass of one batch; returns the tape and the loss terms."""
    tape = ad.Tape()
    enc = field_model.encoder.bind(tape, trainable=trainable)
    bound = field_model.params.bind(tape, trainable=trainable)
    contexts = [encode_scene(scene.ground, scene.satellite, enc, tape).tensor for scene in scenes]
    f_rows = [contexts[s] for s in batch.scene_index]
    z = field_model.joint_batch(batch.q0, f_rows, enc, tape)
    outputs = field_model.forward(z, bound)
    p_gamma = g_gamma = None
    if orientation:
        p_gamma = outputs.orientation_raw
        g_gamma = np.array([scenes[s].gamma_gt for s in batch.scene_index])
    terms = total_loss_tensor(outputs.heads, batch.r_gt, batch.theta_gt, batch.mask, p_gamma, g_gamma)
    return tape, terms


def loss_and_gradients(field_model: MlpField, scenes: Sequence[SyntheticScene], batch: Batch,
                       orientation: bool) -> Tuple[Dict[str, float], Dict[str, np.ndarray]]:
    tape, terms = batch_loss(field_model, scenes, batch, orientation)
    grads = tape.backward(terms['total'])
    values = {name: float(t.value.reshape(())) for name, t in terms.items()}
    return values, grads


def finite_difference_gradients(fn: Callable[[Dict[str, np.ndarray]], float],
                                params: Dict[str, np.ndarray], eps: float = 1e-6,
                                names: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
    """Central differences of a scalar function of named parameters, element by element."""
    grads = {}
    for name in names or sorted(params):
        base = params[name]
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            shifted = dict(params)
            plus = base.copy()
            plus[idx] += eps
            shifted[name] = plus
            up = fn(shifted)
            minus = base.copy()
            minus[idx] -= eps
            shifted[name] = minus
            down = fn(shifted)
            g[idx] = (up - down) / (2.0 * eps)
        grads[name] = g
    return grads


class Trainer:
    """
    Owns the field, the optimizer and the sampling RNG of one training run.

    Example:
        >>> trainer = Trainer.create(ModelConfig(), TrainConfig(epochs=5))
        >>> summary = trainer.fit(scenes, log_path='out/train.jsonl')
    """

    def __init__(self, field_model: MlpField, config: TrainConfig, model_config: ModelConfig,
                 rng: np.random.Generator, optimizer_state: Optional[AdamWState] = None):
        config.validate()
        if field_model.supports_orientation != (config.mode == '3dof'):
            raise ContractError(f"field orientation head does not match mode '{config.mode}'")
        self.field = field_model
        self.config = config
        self.model_config = model_config
        self.rng = rng
        self.optimizer = AdamW(parameter_group,
                               {'backbone': config.lr_backbone, 'heads': config.lr_heads},
                               betas=tuple(config.betas), eps=config.eps,
                               weight_decay=config.weight_decay, state=optimizer_state)
        self.step = 0
        self.epoch = 0
        self.batch_index = 0
        self.order: Optional[List[int]] = None

    @classmethod
    def create(cls, model_config: ModelConfig, config: TrainConfig) -> 'Trainer':
        """Fresh run; initialization and sampling use independent streams of rng_seed."""
        model_config.validate()
        config.validate()
        init_seq, sample_seq = np.random.SeedSequence(config.rng_seed).spawn(2)
        field_model = MlpField.initialize(model_config, np.random.default_rng(init_seq),
                                          orientation=config.mode == '3dof')
        return cls(field_model, config, model_config, np.random.default_rng(sample_seq))

    @property
    def orientation(self) -> bool:
        return self.config.mode == '3dof'

    def draw_hypotheses(self, count: int) -> np.ndarray:
        return sample_training_hypotheses(self.rng, count)

    def _locate_fault(self, scenes: Sequence[SyntheticScene], batch: Batch,
                      exc: NumericFault) -> NumericFault:
        for s, scene in enumerate(scenes):
            rows = batch.scene_index == s
            single = Batch(batch.q0[rows], batch.r_gt[rows], batch.theta_gt[rows],
                           batch.mask[rows], np.zeros(int(rows.sum()), dtype=np.int64))
            try:
                loss_and_gradients(self.field, [scene], single, self.orientation)
            except NumericFault as fault:
                return fault.located(scene_id=scene.scene_id)
        return exc

    def train_step(self, scenes: Sequence[SyntheticScene]) -> StepRecord:
        """
        One forward/backward pass over a batch of scenes and one AdamW update.

        Raises:
            NumericFault: non-finite loss or gradient, located at the offending scene
        """
        if not scenes:
            raise ContractError("empty training batch")
        q0 = self.draw_hypotheses(len(scenes) * self.config.hypotheses_per_scene)
        batch = make_batch(scenes, q0)
        try:
            values, grads = loss_and_gradients(self.field, scenes, batch, self.orientation)
            if not math.isfinite(values['total']):
                raise NumericFault("non-finite loss")
        except NumericFault as exc:
            raise self._locate_fault(scenes, batch, exc) from exc
        if batch.masked:
            logger.debug("step %d: %d hypotheses at the target, direction term masked",
                         self.step + 1, batch.masked)

        params = self.field.named_parameters()
        grad_norm = math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in params if n in grads))
        self.field = self.field.with_parameters(self.optimizer.step(params, grads))
        self.step += 1
        return StepRecord(
            step=self.step,
            loss_r=values['loss_r'],
            loss_theta=values['loss_theta'],
            grad_norm=grad_norm,
            loss_gamma=values.get('loss_gamma'),
            masked=batch.masked,
        )

    def fit(self, scenes: Sequence[SyntheticScene], log_path: Optional[Union[str, Path]] = None,
            checkpoint_path: Optional[Union[str, Path]] = None) -> TrainSummary:
        """
        Train until config.epochs (or max_steps) is reached, resuming from the
        current epoch position when the trainer was restored from a checkpoint.

        Args:
            scenes: training scenes, in a fixed order
            log_path: line-delimited JSON step log (appended)
            checkpoint_path: where periodic and final checkpoints go

        Returns:
            TrainSummary
        """
        if not scenes:
            raise ContractError("no training scenes")
        bs = self.config.batch_size
        n_batches = math.ceil(len(scenes) / bs)
        records: List[StepRecord] = []
        log = None
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            log = open(log_path, 'a', encoding='utf-8')
        stopped = False
        try:
            while self.epoch < self.config.epochs and not stopped:
                if self.order is None:
                    self.order = [int(i) for i in self.rng.permutation(len(scenes))]
                    self.batch_index = 0
                while self.batch_index < n_batches:
                    if self.config.max_steps and self.step >= self.config.max_steps:
                        stopped = True
                        break
                    idx = self.order[self.batch_index * bs:(self.batch_index + 1) * bs]
                    try:
                        record = self.train_step([scenes[i] for i in idx])
                    except NumericFault as fault:
                        logger.error("training aborted at step %d: %s", self.step + 1, fault)
                        # parameters are untouched by the failed step
                        if checkpoint_path is not None:
                            save_checkpoint(self.to_checkpoint(), checkpoint_path)
                            logger.info("last good checkpoint kept at %s", checkpoint_path)
                        raise
                    self.batch_index += 1
                    records.append(record)
                    if log is not None:
                        log.write(json.dumps(record.to_log(), sort_keys=True) + '\n')
                if stopped:
                    break
                self.epoch += 1
                self.order = None
                self.batch_index = 0
                if records:
                    logger.info("epoch %d/%d: loss %.4f", self.epoch, self.config.epochs, records[-1].total)
                every = self.config.checkpoint_every
                if checkpoint_path is not None and every and self.epoch % every == 0:
                    save_checkpoint(self.to_checkpoint(), checkpoint_path)
        finally:
            if log is not None:
                log.close()

        if checkpoint_path is not None:
            save_checkpoint(self.to_checkpoint(), checkpoint_path)
        final = records[-1].total if records else float('nan')
        return TrainSummary(self.step, self.epoch, final, records, stopped_early=stopped)

    # -- persistence -------------------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        moments = {f"m/{n}": v for n, v in self.optimizer.state.m.items()}
        moments.update({f"v/{n}": v for n, v in self.optimizer.state.v.items()})
        train = asdict(self.config)
        train['betas'] = list(self.config.betas)
        return Checkpoint(
            config={'model': asdict(self.model_config), 'train': train},
            params=self.field.named_parameters(),
            moments=moments,
            state={
                'step': self.step,
                'epoch': self.epoch,
                'batch_index': self.batch_index,
                'order': self.order,
                'optimizer_step': self.optimizer.state.step,
                'rng': self.rng.bit_generator.state,
            },
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Union[Checkpoint, str, Path],
                        config: Optional[TrainConfig] = None) -> 'Trainer':
        """
        Restore a run. A replacement TrainConfig may extend `epochs`/`max_steps`
        but must agree with the stored one on everything that shapes the run.
        """
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        stored = train_config_from_dict(ckpt.config['train'])
        if config is not None:
            fixed = ('batch_size', 'hypotheses_per_scene', 'mode', 'rng_seed')
            changed = [n for n in fixed if getattr(config, n) != getattr(stored, n)]
            if changed:
                raise ConfigError(f"train.{changed[0]}", "differs from the checkpoint being resumed")
        config = config or stored
        model_config = ModelConfig(**ckpt.config['model'])
        field_model = field_from_checkpoint(ckpt, model_config)
        state = AdamWState(
            m={k[2:]: v for k, v in ckpt.moments.items() if k.startswith('m/')},
            v={k[2:]: v for k, v in ckpt.moments.items() if k.startswith('v/')},
            step=int(ckpt.state['optimizer_step']),
        )
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.state['rng']
        trainer = cls(field_model, config, model_config, rng, optimizer_state=state)
        trainer.step = int(ckpt.state['step'])
        trainer.epoch = int(ckpt.state['epoch'])
        trainer.batch_index = int(ckpt.state['batch_index'])
        trainer.order = ckpt.state['order']
        logger.info("resumed at step %d (epoch %d, batch %d)", trainer.step, trainer.epoch, trainer.batch_index)
        return trainer


def train_config_from_dict(data: Dict) -> TrainConfig:
    data = dict(data)
    if 'betas' in data:
        data['betas'] = tuple(data['betas'])
    return TrainConfig(**data)


def field_from_checkpoint(ckpt: Union[Checkpoint, str, Path],
                          expected: Optional[ModelConfig] = None) -> MlpField:
    """Rebuild the MLP field stored in a checkpoint, optionally checking its architecture."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    model = ModelConfig(**ckpt.config['model'])
    if expected is not None and asdict(expected) != asdict(model):
        diff = [k for k, v in asdict(expected).items() if asdict(model)[k] != v]
        raise ConfigError(f"model.{diff[0]}", "does not match the checkpoint's model config")
    params = ckpt.params
    try:
        encoder = EncoderParams(heads=model.heads, coord_activation=model.coord_activation,
                                **{n: params[f"encoder.{n}"] for n in EncoderParams.NAMES})
        layers = {k[len('field.'):]: v for k, v in params.items() if k.startswith('field.')}
        return MlpField(encoder, MlpFieldParams(layers, model.trunk_activation))
    except KeyError as exc:
        raise ContractError(f"checkpoint is missing parameter {exc}") from exc


def evaluate_field(field_model: MlpField, scenes: Sequence[SyntheticScene], irs_config=None,
                   orientation: bool = False):
    """EvalReport of IRS with the given field on `scenes` (defaults N=10, R=5)."""
    report, _ = evaluate(field_model, scenes, irs_config or IRSConfig(), orientation=orientation)
    return report


def main():
    """Train a small field for a few epochs and report IRS error"""

    logging.basicConfig(level=logging.INFO, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    scenes = generate_scenes(SceneGenConfig(count=40, dim=32), base_seed=1)
    trainer = Trainer.create(ModelConfig(dim=32, hidden=64), TrainConfig(epochs=20, batch_size=20))
    summary = trainer.fit(scenes)
    report = evaluate_field(trainer.field, scenes)
    print(f"steps {summary.steps}, final loss {summary.final_loss:.4f}")
    print(f"mean error {report.mean_m:.2f} m, median {report.median_m:.2f} m")


if __name__ == "__main__":
    main()
