#!/usr/bin/env python3
"""
Config - typed run configuration

Precedence: dataclass defaults, then the YAML file, then command-line
overrides (`--set section.key=value` and the dedicated flags). Unknown keys
are rejected; every section validates itself before any work starts, and
the effective configuration is echoed into each output directory.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import yaml

from .errors import ConfigError
from .field import ModelConfig
from .irs import IRSConfig
from .metrics import EvalConfig, SweepConfig
from .synthenv import PRESETS, SceneGenConfig
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

SECTIONS = {
    'model': ModelConfig,
    'scene_gen': SceneGenConfig,
    'train': TrainConfig,
    'irs': IRSConfig,
    'eval': EvalConfig,
    'sweep': SweepConfig,
}
TOP_LEVEL = ('mode', 'seed', 'preset')


@dataclass
class RunConfig:
    """Every section of a run plus the settings shared across subcommands."""

    model: ModelConfig = field(default_factory=ModelConfig)
    scene_gen: SceneGenConfig = field(default_factory=SceneGenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    irs: IRSConfig = field(default_factory=IRSConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    mode: str = '2dof'
    seed: Optional[int] = None
    preset: Optional[str] = None

    def validate(self) -> 'RunConfig':
        if self.mode not in ('2dof', '3dof'):
            raise ConfigError('mode', f"must be '2dof' or '3dof', got '{self.mode}'")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError('preset', f"unknown preset '{self.preset}', choose from {sorted(PRESETS)}")
        for name in SECTIONS:
            getattr(self, name).validate()
        if self.scene_gen.dim != self.model.dim:
            raise ConfigError('scene_gen.dim', f"must equal model.dim={self.model.dim}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        out = {name: _plain(asdict(getattr(self, name))) for name in SECTIONS}
        out.update({'mode': self.mode, 'seed': self.seed, 'preset': self.preset})
        return out

    def apply_shared(self) -> 'RunConfig':
        """Push mode, seed and preset down into the sections that consume them."""
        self.scene_gen.mode = self.mode
        self.train.mode = self.mode
        if self.preset is not None:
            self.scene_gen.extent_m = PRESETS[self.preset]
        if self.seed is not None:
            self.scene_gen.rng_seed = self.seed
            self.train.rng_seed = self.seed
            self.irs.rng_seed = self.seed
            self.sweep.base_seed = self.seed
        return self


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def _coerce(section: str, key: str, current, value):
    """Convert a YAML or command-line value to the type of the field's current value."""
    where = f"{section}.{key}" if section else key
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ('true', 'false', '1', '0', 'yes', 'no'):
                    raise ValueError(value)
                return lowered in ('true', '1', 'yes')
            return bool(value)
        if isinstance(current, int) and not isinstance(value, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, (tuple, list)):
            if isinstance(value, str):
                value = yaml.safe_load(value if value.strip().startswith('[') else f"[{value}]")
            if not isinstance(value, (list, tuple)):
                raise ValueError(value)
            items = list(value)
            if current:
                items = [type(current[0])(v) for v in items]
            return tuple(items) if isinstance(current, tuple) else items
        if isinstance(value, str) and current is None:
            return yaml.safe_load(value)
        return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, f"cannot interpret {value!r} as {type(current).__name__}") from exc


def _update_section(obj, section: str, values: Dict[str, Any]):
    if not isinstance(values, dict):
        raise ConfigError(section, "must be a mapping")
    known = {f.name for f in fields(obj)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}", f"unknown key; expected one of {sorted(known)}")
        setattr(obj, key, _coerce(section, key, getattr(obj, key), value))


def merge(config: RunConfig, data: Dict[str, Any]) -> RunConfig:
    """Apply a nested mapping (as read from YAML) onto config in place."""
    if data is None:
        return config
    if not isinstance(data, dict):
        raise ConfigError('config', "top level must be a mapping")
    for key, value in data.items():
        if key in SECTIONS:
            _update_section(getattr(config, key), key, value)
        elif key in TOP_LEVEL:
            current = getattr(config, key)
            if key == 'seed' and value is not None:
                value = _coerce('', key, 0, value)
            setattr(config, key, value if current is None or value is None else _coerce('', key, current, value))
        else:
            raise ConfigError(key, f"unknown section; expected one of {sorted(SECTIONS) + list(TOP_LEVEL)}")
    return config


def parse_override(text: str) -> Dict[str, Any]:
    """'train.epochs=3' -> {'train': {'epochs': '3'}}"""
    if '=' not in text:
        raise ConfigError(text, "override must look like section.key=value")
    path, value = text.split('=', 1)
    parts = path.strip().split('.')
    if len(parts) == 1:
        return {parts[0]: value}
    if len(parts) != 2:
        raise ConfigError(path, "override path must be section.key")
    return {parts[0]: {parts[1]: value}}


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Iterable[str] = (),
                extra: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build the effective RunConfig.

    Args:
        path: optional YAML file
        overrides: 'section.key=value' strings, applied after the file
        extra: nested mapping from dedicated CLI flags, applied last

    Returns:
        Validated RunConfig
    """
    config = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding='utf-8')
        except OSError as exc:
            raise ConfigError('config', f"cannot read {path}: {exc}") from exc
        try:
            merge(config, yaml.safe_load(text) or {})
        except yaml.YAMLError as exc:
            raise ConfigError('config', f"{path} is not valid YAML: {exc}") from exc
    for text in overrides:
        merge(config, parse_override(text))
    if extra:
        merge(config, extra)
    config.apply_shared()
    return config.validate()


def echo_config(config: RunConfig, out_dir: Union[str, Path]) -> Path:
    """Write the effective configuration to <out_dir>/config.yaml."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / 'config.yaml'
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True), encoding='utf-8')
    logger.debug("effective config written to %s", path)
    return path
