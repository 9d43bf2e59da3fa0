"""Training configuration.

Settings come from, in priority order: command-line flags, an explicit
``--config`` file, ``dtn.toml`` in the working directory, the ``[tool.dtn]``
table of ``pyproject.toml``, a named preset, then the defaults below.
"""

from __future__ import annotations

import dataclasses
import logging
import sys
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from dtn.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

CONFIG_FILE = "dtn.toml"
PYPROJECT_FILE = "pyproject.toml"
PRNG = "PCG64"

OPTIMIZERS = ("adam", "adamw")
L2_SCOPES = ("all", "head")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    lr: float = 1e-3
    l2: float = 0.0
    l2_scope: str = "all"
    seed: int = 0
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scheduler_gamma: float = 0.5
    scheduler_patience: int = 20
    folds: int = 1
    prng: str = PRNG

    def __post_init__(self) -> None:
        for name in ("batch_size", "epochs", "scheduler_patience", "folds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "l2", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.scheduler_gamma < 1.0:
            raise ConfigError(f"scheduler_gamma must be in (0, 1), got {self.scheduler_gamma}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.l2_scope not in L2_SCOPES:
            raise ConfigError(f"l2_scope must be one of {L2_SCOPES}, got {self.l2_scope!r}")
        if self.prng != PRNG:
            raise ConfigError(f"only the {PRNG} generator is supported, got {self.prng!r}")

    def merged(self, overrides: Mapping[str, Any]) -> TrainConfig:
        """Copy with `overrides` applied; `None` values are skipped."""
        values = {key: value for key, value in overrides.items() if value is not None}
        return dataclasses.replace(self, **_coerce(values))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


PRESETS: dict[str, dict[str, Any]] = {
    "mnist": {
        "lr": 0.00026,
        "l2": 0.0033,
        "optimizer": "adamw",
        "scheduler_gamma": 0.5,
        "scheduler_patience": 20,
        "batch_size": 32,
        "epochs": 20,
    },
    "fashion": {
        "lr": 8.1e-05,
        "l2": 3.77e-06,
        "optimizer": "adam",
        "scheduler_gamma": 0.5,
        "scheduler_patience": 20,
        "batch_size": 32,
        "epochs": 20,
    },
    "ca": {
        "lr": 0.02,
        "l2": 0.0,
        "optimizer": "adam",
        "scheduler_gamma": 0.5,
        "scheduler_patience": 50,
        "batch_size": 64,
        "epochs": 2000,
    },
}

_FIELD_TYPES = {field.name: type(field.default) for field in dataclasses.fields(TrainConfig)}


def _coerce(values: Mapping[str, Any]) -> dict[str, Any]:
    coerced = {}
    for key, value in values.items():
        expected = _FIELD_TYPES.get(key)
        if expected is None:
            raise ConfigError(f"unknown configuration key {key!r}")
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, expected) or isinstance(value, bool):
            raise ConfigError(
                f"{key} must be {expected.__name__}, got {type(value).__name__} {value!r}"
            )
        coerced[key] = value
    return coerced


def read_table(path: Path) -> dict[str, Any]:
    """Key/value pairs of a config file; `[tool.dtn]` for pyproject.toml."""
    try:
        with path.open("rb") as f:
            data = tomllib.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    if path.name == PYPROJECT_FILE:
        return dict(data.get("tool", {}).get("dtn", {}))
    return dict(data)


def find_config_file(directory: Path) -> Path | None:
    candidate = directory / CONFIG_FILE
    if candidate.is_file():
        return candidate
    pyproject = directory / PYPROJECT_FILE
    if pyproject.is_file() and read_table(pyproject):
        return pyproject
    return None


def load_config(
    path: Path | None = None,
    *,
    preset: str | None = None,
    directory: Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> TrainConfig:
    """Resolve a TrainConfig from preset, file and overrides."""
    if path is None:
        path = find_config_file(directory or Path.cwd())
    table = read_table(path) if path is not None else {}
    file_preset = table.pop("preset", None)
    preset = preset or file_preset
    config = TrainConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        config = config.merged(PRESETS[preset])
    config = config.merged(table)
    if overrides:
        config = config.merged(overrides)
    logger.debug("configuration from %s (preset %s): %s", path, preset, config)
    return config


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))
