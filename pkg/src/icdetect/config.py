"""Layered run configuration: defaults < config file < environment < flags.

Every tunable lives in one section of :class:`RunConfig`. A config file is
JSON or YAML holding a subset of the sections; environment variables take
the form ``ICDETECT_<SECTION>__<KEY>`` (``ICDETECT_SEED`` and
``ICDETECT_WORKERS`` for the two globals); flags are ``--set section.key=value``
plus ``--seed`` and ``--workers``. Values from the environment and flags are
parsed as JSON when possible (so ``[1, 3]`` and ``true`` work) and as plain
strings otherwise. Unknown sections or keys are errors.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .datagen import DEFAULT_SHIFT, REFERENCE, TARGET, CenterSpec, ShiftDelta, default_specs
from .filtering import FilterConfig
from .model.augment import AugmentConfig
from .model.forest import ForestConfig
from .model.training import TrainConfig
from .segmentation import SegmentationConfig

ENV_PREFIX = "ICDETECT_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ValidationConfig:
    """Patient-disjoint carve-out of the training split used for early
    stopping and threshold selection."""

    ratio: float = 0.8

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise ValueError("validation ratio must be in (0, 1)")


@dataclass(frozen=True)
class GeneratorConfig:
    ic_fraction: Optional[float] = None  # force every slide's IC fraction
    hue: float = DEFAULT_SHIFT.hue
    saturation: float = DEFAULT_SHIFT.saturation
    brightness: float = DEFAULT_SHIFT.brightness
    grain: float = DEFAULT_SHIFT.grain

    def delta(self) -> ShiftDelta:
        return ShiftDelta(self.hue, self.saturation, self.brightness, self.grain)


_SPECS = default_specs()

SECTIONS = {
    "segmentation": SegmentationConfig,
    "filtering": FilterConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "forest": ForestConfig,
    "validation": ValidationConfig,
    "generator": GeneratorConfig,
    REFERENCE: CenterSpec,
    TARGET: CenterSpec,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    segmentation: SegmentationConfig = SegmentationConfig()
    filtering: FilterConfig = FilterConfig()
    train: TrainConfig = TrainConfig()
    augment: AugmentConfig = AugmentConfig()
    forest: ForestConfig = ForestConfig()
    validation: ValidationConfig = ValidationConfig()
    generator: GeneratorConfig = GeneratorConfig()
    reference: CenterSpec = _SPECS[REFERENCE]
    target: CenterSpec = _SPECS[TARGET]

    def train_config(self) -> TrainConfig:
        """Training settings with the global seed applied."""
        return replace(self.train, seed=self.seed)

    def specs(self) -> dict:
        return {REFERENCE: self.reference, TARGET: self.target}

    def to_json(self) -> dict:
        return asdict(self)


def _coerce(raw: Any, default: Any, where: str) -> Any:
    value = raw
    if isinstance(raw, str) and not isinstance(default, str):
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {raw!r}")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {raw!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {raw!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {raw!r}")
        return float(value)
    return value


def _apply_section(current, overrides: Mapping, section: str):
    known = {f.name for f in fields(current)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    values = {k: _coerce(v, getattr(current, k), f"{section}.{k}") for k, v in overrides.items()}
    try:
        return replace(current, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def merge(cfg: RunConfig, layer: Mapping) -> RunConfig:
    """Apply one nested mapping ``{section: {key: value}, seed, workers}``."""
    updates = {}
    for key, value in layer.items():
        if key in ("seed", "workers"):
            updates[key] = _coerce(value, getattr(cfg, key), key)
        elif key in SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"[{key}] must be a mapping")
            updates[key] = _apply_section(updates.get(key, getattr(cfg, key)), value, key)
        else:
            raise ConfigError(f"unknown config section {key!r}")
    out = replace(cfg, **updates)
    if out.workers < 1:
        raise ConfigError("workers must be >= 1")
    return out


def read_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def env_layer(environ: Optional[Mapping] = None) -> dict:
    environ = os.environ if environ is None else environ
    layer: dict = {}
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        if rest in ("seed", "workers"):
            layer[rest] = value
            continue
        section, sep, key = rest.partition("__")
        if not sep or not key:
            raise ConfigError(f"environment variable {name}: expected {ENV_PREFIX}<SECTION>__<KEY>")
        layer.setdefault(section, {})[key] = value
    return layer


def flag_layer(assignments) -> dict:
    layer: dict = {}
    for item in assignments or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        if key in ("seed", "workers"):
            layer[key] = value
            continue
        section, dot, name = key.partition(".")
        if not dot or not name:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        layer.setdefault(section, {})[name] = value
    return layer


def load_config(path=None, environ: Optional[Mapping] = None, assignments=(),
                seed: Optional[int] = None, workers: Optional[int] = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = merge(cfg, read_file(path))
    cfg = merge(cfg, env_layer(environ))
    cfg = merge(cfg, flag_layer(assignments))
    direct = {k: v for k, v in (("seed", seed), ("workers", workers)) if v is not None}
    return merge(cfg, direct) if direct else cfg


def write_snapshot(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "run-config.json"
    path.write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
    return path


def from_snapshot(path) -> RunConfig:
    """Rebuild a RunConfig from a run-config.json written by :func:`write_snapshot`."""
    return merge(RunConfig(), read_file(path))
