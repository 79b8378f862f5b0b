#!/usr/bin/env python3
"""
Synthetic Environment - paired token grids whose statistics encode a ground-truth pose

Satellite grid: every landmark cell holds the landmark's signature (a random
unit direction in channel space times signature_gain), empty cells hold
distractors whose norm is signature_gain / signal_to_distractor.
Ground view: one token per bearing sector; each token is the sum of the
signatures of the landmarks seen in that sector, weighted by
exp(-distance / decay), plus noise scaled by the ambiguity level. At
ambiguity > 0 a share of landmarks also get a twin with the same signature
at the point-mirrored cell.

Normalized map coordinates: x grows with the column index, y with the row
index; cell (row, col) of an H x W grid is centred at
(-1 + (col + 0.5) * 2 / W, -1 + (row + 0.5) * 2 / H).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .encoder import TokenGrid, add_positional_encoding, sinusoidal_pe_2d
from .errors import ConfigError, ContractError, InfeasibleConfigError
from .field import PoseHypothesis

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = 'dfloc-scene-manifest'
MANIFEST_VERSION = 1
PRESETS = {'kitti': 100.0, 'vigor': 70.0}
MODES = ('2dof', '3dof')


@dataclass
class SceneGenConfig:
    """
    Synthetic scene generator settings.

    Attributes:
        sat_height, sat_width: satellite token grid H' x W'
        ground_tokens: number of ground-view bearing sectors
        dim: token channel count (must equal the model dim)
        n_landmarks: landmarks per scene (twins included)
        signal_to_distractor: landmark token norm / distractor token norm
        ambiguity: 0 = unique and noiseless, 1 = every landmark twinned and maximal noise
        rng_seed: base seed of a scene set
        count: scenes in a manifest
        extent_m: meters spanned by [-1, 1]
        decay: signature strength length scale (normalized units)
        noise_std: per-channel ground-token noise at ambiguity 1
        signature_gain: landmark signature norm (8 matches the positional encoding norm at dim 128)
        mode: '2dof' (world-aligned sectors) or '3dof' (heading-relative sectors, gated field of view)
        fov_deg: visible field of view in 3-DoF mode
    """

    sat_height: int = 8
    sat_width: int = 8
    ground_tokens: int = 4
    dim: int = 128
    n_landmarks: int = 12
    signal_to_distractor: float = 4.0
    ambiguity: float = 0.0
    rng_seed: int = 0
    count: int = 50
    extent_m: float = 100.0
    decay: float = 0.5
    noise_std: float = 0.5
    signature_gain: float = 8.0
    mode: str = '2dof'
    fov_deg: float = 270.0

    def validate(self) -> 'SceneGenConfig':
        for name in ('sat_height', 'sat_width', 'ground_tokens', 'n_landmarks', 'count'):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"scene_gen.{name}", "must be an integer >= 1")
        if self.dim < 4 or self.dim % 4 != 0:
            raise ConfigError('scene_gen.dim', "must be a positive multiple of 4")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ConfigError('scene_gen.ambiguity', "must lie in [0, 1]")
        if self.signal_to_distractor <= 0.0:
            raise ConfigError('scene_gen.signal_to_distractor', "must be > 0")
        if self.extent_m <= 0.0:
            raise ConfigError('scene_gen.extent_m', "must be > 0 meters")
        if self.decay <= 0.0:
            raise ConfigError('scene_gen.decay', "must be > 0")
        if self.noise_std < 0.0:
            raise ConfigError('scene_gen.noise_std', "must be >= 0")
        if self.signature_gain <= 0.0:
            raise ConfigError('scene_gen.signature_gain', "must be > 0")
        if self.mode not in MODES:
            raise ConfigError('scene_gen.mode', f"must be one of {MODES}")
        if not 0.0 < self.fov_deg <= 360.0:
            raise ConfigError('scene_gen.fov_deg', "must lie in (0, 360]")
        if self.rng_seed < 0:
            raise ConfigError('scene_gen.rng_seed', "must be >= 0")
        if self.n_landmarks > self.sat_height * self.sat_width:
            raise InfeasibleConfigError(
                f"{self.n_landmarks} landmarks do not fit on {self.sat_height}x{self.sat_width} cells")
        return self

    @property
    def twin_pairs(self) -> int:
        return int(round(self.ambiguity * (self.n_landmarks // 2)))

    @classmethod
    def preset(cls, name: str, **overrides) -> 'SceneGenConfig':
        if name not in PRESETS:
            raise ConfigError('scene_gen.preset', f"unknown preset '{name}', choose from {sorted(PRESETS)}")
        return cls(extent_m=PRESETS[name], **overrides)


@dataclass
class Landmarks:
    positions: np.ndarray    # [L x 2] normalized coordinates
    cells: np.ndarray        # [L x 2] (row, col)
    signatures: np.ndarray   # [L x dim]

    def __len__(self) -> int:
        return int(self.positions.shape[0])


@dataclass
class SyntheticScene:
    """Positionally-encoded token grids plus the pose they were rendered from."""

    ground: TokenGrid
    satellite: TokenGrid
    q_gt: PoseHypothesis
    gamma_gt: Tuple[float, float]
    map_extent_m: float = 100.0
    scene_id: int = 0
    seed: Optional[int] = None
    landmarks: Optional[Landmarks] = field(default=None, repr=False)

    def __post_init__(self):
        if abs(math.hypot(*self.gamma_gt) - 1.0) > 1e-9:
            raise ContractError("scene heading must be a unit vector")

    @property
    def gamma_deg(self) -> float:
        return math.degrees(math.atan2(self.gamma_gt[1], self.gamma_gt[0]))


def cell_center(row: int, col: int, height: int, width: int) -> Tuple[float, float]:
    return -1.0 + (col + 0.5) * 2.0 / width, -1.0 + (row + 0.5) * 2.0 / height


def _place_landmarks(config: SceneGenConfig, rng: np.random.Generator) -> Tuple[List[Tuple[int, int]], List[int]]:
    """Cells of all landmarks and, per landmark, the index of the signature it carries."""
    h, w = config.sat_height, config.sat_width
    used = set()
    cells: List[Tuple[int, int]] = []
    owner: List[int] = []
    order = rng.permutation(h * w)

    pairs = config.twin_pairs
    for flat in order:
        if len(cells) >= 2 * pairs:
            break
        cell = (int(flat) // w, int(flat) % w)
        mirror = (h - 1 - cell[0], w - 1 - cell[1])
        if cell == mirror or cell in used or mirror in used:
            continue
        used.update((cell, mirror))
        sig = len(set(owner))
        cells += [cell, mirror]
        owner += [sig, sig]
    if len(cells) < 2 * pairs:
        raise InfeasibleConfigError(f"cannot place {pairs} mirrored landmark pairs")

    singles = config.n_landmarks - len(cells)
    free = [(int(f) // w, int(f) % w) for f in order if (int(f) // w, int(f) % w) not in used]
    if len(free) < singles:
        raise InfeasibleConfigError(f"no room for {singles} more landmarks")
    next_sig = len(set(owner))
    for i, cell in enumerate(free[:singles]):
        cells.append(cell)
        owner.append(next_sig + i)
    return cells, owner


def make_landmarks(config: SceneGenConfig, rng: np.random.Generator) -> Landmarks:
    cells, owner = _place_landmarks(config, rng)
    directions = rng.standard_normal((max(owner) + 1, config.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    signatures = config.signature_gain * directions[owner]
    positions = np.array([cell_center(r, c, config.sat_height, config.sat_width) for r, c in cells])
    return Landmarks(positions, np.array(cells, dtype=np.int64), signatures)


def render_satellite(landmarks: Landmarks, config: SceneGenConfig,
                     rng: np.random.Generator) -> np.ndarray:
    """Raw satellite tokens [H*W x dim] before positional encoding."""
    h, w = config.sat_height, config.sat_width
    scale = config.signature_gain / (np.sqrt(config.dim) * config.signal_to_distractor)
    tokens = scale * rng.standard_normal((h * w, config.dim))
    for (row, col), sig in zip(landmarks.cells, landmarks.signatures):
        tokens[row * w + col] = sig
    return tokens


def _wrap(angle: np.ndarray) -> np.ndarray:
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


def _sector_weights(q: np.ndarray, heading: np.ndarray, landmarks: Landmarks,
                    config: SceneGenConfig) -> np.ndarray:
    """[C x L x N_g] contribution of each landmark to each sector for C candidate poses."""
    delta = landmarks.positions[None, :, :] - q[:, None, :]
    dist = np.linalg.norm(delta, axis=2)
    bearing = np.arctan2(delta[..., 1], delta[..., 0])
    at_pose = dist < 1e-9
    visible = np.ones_like(dist, dtype=bool)
    if config.mode == '3dof':
        gamma = np.arctan2(heading[:, 1], heading[:, 0])[:, None]
        bearing = _wrap(bearing - gamma)
        visible = np.abs(bearing) <= np.radians(config.fov_deg) / 2.0 + 1e-12
    bearing = np.where(at_pose, 0.0, bearing)
    visible |= at_pose
    n = config.ground_tokens
    sector = np.floor(np.mod(bearing, 2.0 * np.pi) / (2.0 * np.pi / n)).astype(np.int64) % n
    weight = np.exp(-dist / config.decay) * visible
    out = np.zeros(dist.shape + (n,))
    np.put_along_axis(out, sector[..., None], weight[..., None], axis=2)
    return out


def render_ground(q: Sequence[float], heading: Sequence[float], landmarks: Landmarks,
                  config: SceneGenConfig) -> np.ndarray:
    """Noise-free raw ground tokens [N_g x dim] seen from pose q with the given heading."""
    weights = _sector_weights(np.asarray(q, dtype=np.float64)[None, :],
                              np.asarray(heading, dtype=np.float64)[None, :], landmarks, config)
    return np.einsum('ls,ld->sd', weights[0], landmarks.signatures)


def _as_rng(rng_state: Union[int, np.random.Generator]) -> Tuple[np.random.Generator, Optional[int]]:
    if isinstance(rng_state, np.random.Generator):
        return rng_state, None
    return np.random.default_rng(int(rng_state)), int(rng_state)


def generate_scene(config: SceneGenConfig, rng_state: Union[int, np.random.Generator],
                   scene_id: int = 0) -> SyntheticScene:
    """
    Draw one scene.

    Args:
        config: validated SceneGenConfig
        rng_state: integer seed or numpy Generator
        scene_id: identifier carried into reports

    Returns:
        SyntheticScene with positional encodings already added to both grids
    """
    config.validate()
    rng, seed = _as_rng(rng_state)
    landmarks = make_landmarks(config, rng)
    satellite = render_satellite(landmarks, config, rng)
    q = rng.uniform(-1.0, 1.0, 2)
    gamma = rng.uniform(0.0, 2.0 * np.pi)
    heading = np.array([math.cos(gamma), math.sin(gamma)])
    ground = render_ground(q, heading, landmarks, config)
    noise = config.ambiguity * config.noise_std
    if noise > 0.0:
        ground = ground + noise * rng.standard_normal(ground.shape)
    return SyntheticScene(
        ground=add_positional_encoding(TokenGrid(1, config.ground_tokens, config.dim, ground)),
        satellite=add_positional_encoding(TokenGrid(config.sat_height, config.sat_width, config.dim, satellite)),
        q_gt=PoseHypothesis(float(q[0]), float(q[1])),
        gamma_gt=(float(heading[0]), float(heading[1])),
        map_extent_m=config.extent_m,
        scene_id=scene_id,
        seed=seed,
        landmarks=landmarks,
    )


def derive_scene_seeds(base_seed: int, count: int) -> List[int]:
    """Independent per-scene seeds: SeedSequence(base_seed).spawn(count), one 32-bit word each."""
    children = np.random.SeedSequence(int(base_seed)).spawn(int(count))
    return [int(child.generate_state(1)[0]) for child in children]


def generate_scenes(config: SceneGenConfig, count: Optional[int] = None,
                    base_seed: Optional[int] = None, workers: int = 1) -> List[SyntheticScene]:
    count = config.count if count is None else count
    base_seed = config.rng_seed if base_seed is None else base_seed
    seeds = derive_scene_seeds(base_seed, count)
    jobs = list(enumerate(seeds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda job: generate_scene(config, job[1], job[0]), jobs))
    return [generate_scene(config, seed, i) for i, seed in jobs]


# ---------------------------------------------------------------------------
# Reference decoder
# ---------------------------------------------------------------------------

def bayes_decode(scene: SyntheticScene, config: SceneGenConfig, resolution: int = 4) -> PoseHypothesis:
    """
    Maximum-likelihood position under the generator's own model.

    Ground noise is isotropic Gaussian and the prior uniform, so the MAP pose
    minimizes the squared distance between observed and rendered ground
    tokens. The heading is taken as known. Coarse grid search at `resolution`
    candidates per satellite cell, then one finer pass around the best cell.
    """
    if scene.landmarks is None:
        raise ContractError("scene carries no landmarks to decode against")

    observed = scene.ground.values - sinusoidal_pe_2d(1, config.ground_tokens, config.dim)
    heading = np.asarray(scene.gamma_gt, dtype=np.float64)

    def best(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        grid = np.stack(np.meshgrid(xs, ys, indexing='xy'), axis=-1).reshape(-1, 2)
        weights = _sector_weights(grid, np.tile(heading, (grid.shape[0], 1)), scene.landmarks, config)
        rendered = np.einsum('cls,ld->csd', weights, scene.landmarks.signatures)
        err = ((rendered - observed[None]) ** 2).sum(axis=(1, 2))
        return grid[int(np.argmin(err))]

    nx = config.sat_width * resolution
    ny = config.sat_height * resolution
    coarse = best(np.linspace(-1.0, 1.0, nx), np.linspace(-1.0, 1.0, ny))
    step_x, step_y = 2.0 / (nx - 1), 2.0 / (ny - 1)
    fine = best(np.clip(coarse[0] + np.linspace(-step_x, step_x, 9), -1.0, 1.0),
                np.clip(coarse[1] + np.linspace(-step_y, step_y, 9), -1.0, 1.0))
    return PoseHypothesis(float(fine[0]), float(fine[1]))


def solvability(scenes: Sequence[SyntheticScene], config: SceneGenConfig) -> float:
    """Fraction of scenes the reference decoder recovers within one satellite cell."""
    cell = max(2.0 / config.sat_width, 2.0 / config.sat_height)
    hits = 0
    for scene in scenes:
        q = bayes_decode(scene, config)
        if math.hypot(q.x - scene.q_gt.x, q.y - scene.q_gt.y) <= cell:
            hits += 1
    return hits / len(scenes) if scenes else 0.0


# ---------------------------------------------------------------------------
# Metric geometry
# ---------------------------------------------------------------------------

def meters(q_a: PoseHypothesis, q_b: PoseHypothesis, extent_m: float) -> float:
    """Euclidean distance in normalized units times extent_m / 2."""
    return math.hypot(q_a.x - q_b.x, q_a.y - q_b.y) * extent_m / 2.0


def decompose_error(err_vec: Sequence[float], heading: Sequence[float],
                    extent_m: float) -> Tuple[float, float]:
    """
    Split a normalized error vector into (lateral_m, longitudinal_m).

    Longitudinal runs along the heading, lateral along its +90 degree rotation;
    both are reported as absolute values.
    """
    hx, hy = float(heading[0]), float(heading[1])
    if abs(math.hypot(hx, hy) - 1.0) > 1e-6:
        raise ContractError(f"heading must be a unit vector, got ({hx}, {hy})")
    ex, ey = float(err_vec[0]), float(err_vec[1])
    scale = extent_m / 2.0
    longitudinal = abs(ex * hx + ey * hy) * scale
    lateral = abs(-ex * hy + ey * hx) * scale
    return lateral, longitudinal


# ---------------------------------------------------------------------------
# Seed manifests
# ---------------------------------------------------------------------------

@dataclass
class SceneManifest:
    """Scenes shipped as (config, seed) pairs; grids are regenerated on load."""

    config: SceneGenConfig
    base_seed: int
    seeds: List[int]
    q_gt: List[Tuple[float, float]]
    version: int = MANIFEST_VERSION

    @classmethod
    def from_scenes(cls, config: SceneGenConfig, base_seed: int,
                    scenes: Sequence[SyntheticScene]) -> 'SceneManifest':
        return cls(config, base_seed, [s.seed for s in scenes],
                   [(s.q_gt.x, s.q_gt.y) for s in scenes])

    def to_dict(self) -> Dict:
        return {
            'format': MANIFEST_FORMAT,
            'version': self.version,
            'config': asdict(self.config),
            'base_seed': self.base_seed,
            'scenes': [{'id': i, 'seed': seed, 'q_gt': [float(q[0]), float(q[1])]}
                       for i, (seed, q) in enumerate(zip(self.seeds, self.q_gt))],
        }

    def regenerate(self) -> List[SyntheticScene]:
        scenes = []
        for i, (seed, q) in enumerate(zip(self.seeds, self.q_gt)):
            scene = generate_scene(self.config, seed, i)
            if abs(scene.q_gt.x - q[0]) > 1e-12 or abs(scene.q_gt.y - q[1]) > 1e-12:
                raise ContractError(f"scene {i} does not regenerate to its recorded pose")
            scenes.append(scene)
        return scenes


def save_manifest(manifest: SceneManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(manifest.to_dict(), sort_keys=True), encoding='utf-8')
    logger.info("wrote manifest with %d scenes to %s", len(manifest.seeds), path)
    return path


def load_manifest(path: Union[str, Path]) -> SceneManifest:
    data = yaml.safe_load(Path(path).read_text(encoding='utf-8'))
    if not isinstance(data, dict) or data.get('format') != MANIFEST_FORMAT:
        raise ContractError(f"{path} is not a scene manifest")
    if data.get('version') != MANIFEST_VERSION:
        raise ContractError(f"manifest version {data.get('version')} is not supported "
                            f"(expected {MANIFEST_VERSION})")
    config = SceneGenConfig(**data['config']).validate()
    scenes = data['scenes']
    return SceneManifest(config, int(data['base_seed']), [int(s['seed']) for s in scenes],
                         [tuple(s['q_gt']) for s in scenes])


def main():
    """Generate a small scene set and report how well the reference decoder solves it"""
    config = SceneGenConfig(count=5)
    scenes = generate_scenes(config)
    for scene in scenes:
        q = bayes_decode(scene, config)
        err = meters(q, scene.q_gt, config.extent_m)
        print(f"scene {scene.scene_id}: q_gt=({scene.q_gt.x:+.3f}, {scene.q_gt.y:+.3f}) "
              f"decoded=({q.x:+.3f}, {q.y:+.3f}) error={err:.2f} m")
    print(f"solvable: {solvability(scenes, config):.0%}")


if __name__ == "__main__":
    main()
