#!/usr/bin/env python3
"""
CLI - generate scene manifests, train, run IRS, evaluate and sweep

Exit codes: 0 success, 2 invalid configuration or input, 3 numeric fault,
4 I/O failure.
"""

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from . import __version__
from .checkpoint import load_checkpoint
from .config import RunConfig, echo_config, load_config
from .errors import (CheckpointError, ConfigError, ContractError, DomainError, InfeasibleConfigError,
                     NumericFault, ShapeError, UnsupportedModeError)
from .field import OracleField, OracleFieldSpec
from .irs import write_result_json, write_trajectory_csv
from .metrics import evaluate, scaling_sweep, trend_summary, write_sweep_csv, write_sweep_json
from .synthenv import SceneManifest, generate_scenes, load_manifest, save_manifest, solvability
from .trainer import Trainer, evaluate_field, field_from_checkpoint

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def parse_oracle(text: str) -> OracleFieldSpec:
    """'alpha=0.5,noise=0.1' -> scene-following OracleFieldSpec (keys: alpha, noise, dist_noise, seed)."""
    values = {'alpha': 1.0, 'noise': 0.0, 'dist_noise': 0.0, 'seed': 0.0}
    for part in filter(None, (p.strip() for p in text.split(','))):
        if '=' not in part:
            raise ConfigError('oracle', f"expected key=value, got '{part}'")
        key, value = (s.strip() for s in part.split('=', 1))
        if key not in values:
            raise ConfigError(f"oracle.{key}", f"unknown key; expected one of {sorted(values)}")
        try:
            values[key] = float(value)
        except ValueError as exc:
            raise ConfigError(f"oracle.{key}", f"'{value}' is not a number") from exc
    if not 0.0 < values['alpha'] <= 1.0:
        raise ConfigError('oracle.alpha', f"must lie in (0, 1], got {values['alpha']}")
    if values['noise'] < 0.0 or values['dist_noise'] < 0.0:
        raise ConfigError('oracle.noise', "must be >= 0")
    return OracleFieldSpec(distance_scale=values['alpha'], direction_noise_std=values['noise'],
                           distance_noise_std=values['dist_noise'], noise_seed=int(values['seed']))


def _model_is_explicit(args) -> bool:
    if any(s.startswith('model.') for s in args.set or []):
        return True
    if args.config:
        data = yaml.safe_load(Path(args.config).read_text(encoding='utf-8')) or {}
        return isinstance(data, dict) and 'model' in data
    return False


def _effective_config(args, extra: Optional[Dict] = None) -> RunConfig:
    flags: Dict = {}
    if args.seed is not None:
        flags['seed'] = args.seed
    if args.mode is not None:
        flags['mode'] = args.mode
    if args.preset is not None:
        flags['preset'] = args.preset
    for section, values in (extra or {}).items():
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            flags[section] = values
    return load_config(args.config, args.set or [], flags)


def _load_field(args, config: RunConfig):
    if args.oracle is not None:
        return OracleField(parse_oracle(args.oracle))
    if args.checkpoint is None:
        raise ConfigError('checkpoint', "give --checkpoint or --oracle")
    expected = config.model if _model_is_explicit(args) else None
    return field_from_checkpoint(load_checkpoint(args.checkpoint), expected)


def _load_scenes(args, field_model=None):
    """Regenerate the manifest's scenes and check their token dim against the field."""
    scenes = load_manifest(args.manifest).regenerate()
    dim = getattr(getattr(field_model, 'encoder', None), 'dim', None)
    if scenes and dim is not None and scenes[0].ground.dim != dim:
        raise ConfigError('model.dim', f"field expects dim {dim}, manifest tokens have dim "
                                       f"{scenes[0].ground.dim}")
    return scenes


def cmd_gen(args) -> int:
    config = _effective_config(args, {'scene_gen': {'count': args.count}})
    out = Path(args.out)
    scenes = generate_scenes(config.scene_gen)
    manifest = SceneManifest.from_scenes(config.scene_gen, config.scene_gen.rng_seed, scenes)
    path = save_manifest(manifest, out / 'manifest.yaml')
    echo_config(config, out)
    checked = scenes[:min(len(scenes), 20)]
    print(f"scenes: {len(scenes)}")
    print(f"solvable within one cell (first {len(checked)}): {solvability(checked, config.scene_gen):.0%}")
    print(f"manifest: {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _effective_config(args, {'train': {'epochs': args.epochs, 'max_steps': args.max_steps}})
    out = Path(args.out)
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, config.train)
    else:
        trainer = Trainer.create(config.model, config.train)
    scenes = _load_scenes(args, trainer.field)
    echo_config(config, out)
    ckpt_path = out / 'model.ckpt'
    summary = trainer.fit(scenes, log_path=out / 'train.jsonl', checkpoint_path=ckpt_path)
    print(f"steps: {summary.steps}  epochs: {summary.epochs}  final loss: {summary.final_loss:.6f}")
    print(f"checkpoint: {ckpt_path}")
    if not math.isfinite(summary.final_loss):
        logger.error("final loss is not finite")
        return EXIT_NUMERIC
    if args.eval_scenes:
        checked = scenes[:args.eval_scenes]
        report = evaluate_field(trainer.field, checked, config.irs, orientation=_orientation(config))
        print(f"IRS on {len(checked)} training scenes: mean {report.mean_m:.3f} m  median {report.median_m:.3f} m")
    return EXIT_OK


def _orientation(config: RunConfig) -> bool:
    return config.mode == '3dof'


def cmd_irs(args) -> int:
    config = _effective_config(args, {'irs': {'n_seeds': args.seeds, 'rounds': args.rounds,
                                              'workers': args.workers}})
    if args.lean:
        config.irs.keep_trajectories = False
    out = Path(args.out)
    field_model = _load_field(args, config)
    scenes = _load_scenes(args, field_model)
    echo_config(config, out)
    report, results = evaluate(field_model, scenes, config.irs, config.eval,
                               orientation=_orientation(config))
    for result in results:
        write_result_json(result, out / 'results' / f"scene_{result.scene_id:04d}.json")
    write_trajectory_csv(results, out / 'trajectories.csv')
    report.write_json(out / 'report.json')
    _print_report(report)
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _effective_config(args, {'irs': {'n_seeds': args.seeds, 'rounds': args.rounds}})
    out = Path(args.out)
    field_model = _load_field(args, config)
    scenes = _load_scenes(args, field_model)
    echo_config(config, out)
    report, _ = evaluate(field_model, scenes, config.irs, config.eval, orientation=_orientation(config))
    report.write_json(out / 'report.json')
    _print_report(report)
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _effective_config(args, {'sweep': {'n_list': args.n_list, 'r_list': args.r_list}})
    out = Path(args.out)
    field_model = _load_field(args, config)
    scenes = _load_scenes(args, field_model)
    echo_config(config, out)
    sweep = scaling_sweep(field_model, scenes, config.sweep.n_list, config.sweep.r_list,
                          base_seed=config.sweep.base_seed, eval_config=config.eval,
                          prior=tuple(config.irs.prior))
    write_sweep_csv(sweep, out / 'sweep.csv')
    write_sweep_json(sweep, out / 'sweep.json')
    print(sweep.frame().to_string(index=False))
    trend = trend_summary(sweep)
    print(f"trend: {'PASSED' if trend['passed'] else 'FAILED'} "
          f"{ {k: v for k, v in trend.items() if k != 'passed'} }")
    return EXIT_OK


def _print_report(report):
    print(f"scenes: {len(report.rows)}")
    print(f"mean error: {report.mean_m:.3f} m  median: {report.median_m:.3f} m")
    for threshold, value in report.recall['overall'].items():
        print(f"  R@{threshold:g}m: {value:.3f}  "
              f"lateral {report.recall['lateral'][threshold]:.3f}  "
              f"longitudinal {report.recall['longitudinal'][threshold]:.3f}")
    if report.orientation_recall is not None:
        print(f"orientation mean: {report.orientation_mean_deg:.2f} deg  "
              f"median: {report.orientation_median_deg:.2f} deg")
        for threshold, value in report.orientation_recall.items():
            print(f"  R@{threshold:g}deg: {value:.3f}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='dfloc', description=__doc__.strip().splitlines()[0])
    parser.add_argument('--version', action='version', version=f"dfloc {__version__}")
    parser.add_argument('--log-level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help="Logging verbosity")

    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument('--config', help="YAML config file")
    shared.add_argument('--seed', type=int, help="Seed for every random stream of the run")
    shared.add_argument('--out', default='runs/out', help="Output directory")
    shared.add_argument('--mode', choices=['2dof', '3dof'], help="Pose degrees of freedom")
    shared.add_argument('--preset', choices=['kitti', 'vigor'], help="Map extent preset")
    shared.add_argument('--set', action='append', metavar='SECTION.KEY=VALUE',
                        help="Override one config value (repeatable)")

    field_source = argparse.ArgumentParser(add_help=False)
    field_source.add_argument('--manifest', required=True, help="Scene manifest from 'dfloc gen'")
    source = field_source.add_mutually_exclusive_group()
    source.add_argument('--checkpoint', help="Trained checkpoint")
    source.add_argument('--oracle', help="Analytic field, e.g. alpha=0.5,noise=0.05")

    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen', parents=[shared], help="Generate a scene manifest")
    p.add_argument('--count', type=int, help="Number of scenes")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser('train', parents=[shared], help="Train encoder and field")
    p.add_argument('--manifest', required=True, help="Scene manifest from 'dfloc gen'")
    p.add_argument('--epochs', type=int, help="Training epochs")
    p.add_argument('--max-steps', type=int, help="Stop after this many steps")
    p.add_argument('--resume', help="Checkpoint to continue from")
    p.add_argument('--eval-scenes', type=int, default=0,
                   help="Run IRS on this many training scenes after training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('irs', parents=[shared, field_source], help="Run IRS and export trajectories")
    p.add_argument('--seeds', type=int, help="Seeds N (default 10)")
    p.add_argument('--rounds', type=int, help="Rounds R (default 5)")
    p.add_argument('--workers', type=int, help="Threads per refinement round")
    p.add_argument('--lean', action='store_true', help="Keep only first and last round per seed")
    p.set_defaults(func=cmd_irs)

    p = sub.add_parser('eval', parents=[shared, field_source], help="Aggregate error report")
    p.add_argument('--seeds', type=int, help="Seeds N (default 10)")
    p.add_argument('--rounds', type=int, help="Rounds R (default 5)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('sweep', parents=[shared, field_source], help="Inference-scaling sweep")
    p.add_argument('--n-list', type=_int_list, help="Seed counts, e.g. 1,5,10,20")
    p.add_argument('--r-list', type=_int_list, help="Round counts, e.g. 1,3,5,10")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        return args.func(args)
    except (ConfigError, InfeasibleConfigError, ContractError, ShapeError, UnsupportedModeError) as exc:
        logger.error("invalid input: %s", exc)
        return EXIT_VALIDATION
    except (NumericFault, DomainError) as exc:
        logger.error("numeric fault: %s", exc)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        logger.error("I/O failure: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
