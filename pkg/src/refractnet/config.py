"""Run configuration: a flat ``key = value`` file merged under command-line flags.

Precedence is flags > file > defaults. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .model import ModelConfig
from .trainer import TrainConfig


TARGET_CHOICES = ("se", "sphere", "cylinder", "all")


class ConfigError(ValueError):
    """Malformed config file or unknown / invalid key."""


@dataclass(frozen=True)
class RunConfig:
    manifest: str = ""
    out_dir: str = "."
    target: str = "se"
    seed: int = 0
    # model
    input_resolution: int = 64
    stem_channels: tuple[int, ...] = (8, 16)
    block_channels: tuple[int, ...] = (16, 32, 64)
    block_strides: tuple[int, ...] = (1, 2, 1)
    fc_widths: tuple[int, ...] = (32, 1)
    # training
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    min_delta: float = 0.001
    ensemble_size: int = 3
    # evaluation
    margins: tuple[float, ...] = (0.5, 1.0, 2.0)
    bootstrap: int = 2000
    # attention atlas
    min_count: int = 100
    mirror: bool = False
    workers: int = 1

    def model_config(self, target: str | None = None) -> ModelConfig:
        return ModelConfig(
            input_resolution=self.input_resolution,
            stem_channels=self.stem_channels,
            block_channels=self.block_channels,
            block_strides=self.block_strides,
            fc_widths=self.fc_widths,
            target=target or self.target,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            min_delta=self.min_delta,
            ensemble_size=self.ensemble_size,
            seed=self.seed,
        )


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _default_of(name: str) -> Any:
    return _FIELDS[name].default


def coerce(name: str, text: str) -> Any:
    """Parse ``text`` to the type of field ``name``."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    default = _default_of(name)
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            item = type(default[0])
            return tuple(item(v) for v in text.replace(" ", "").split(",") if v)
        return type(default)(text.strip())
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for key {name!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = coerce(key, value)
    return out


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then non-``None`` overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = value
    cfg = dataclasses.replace(RunConfig(), **values)
    if cfg.target not in TARGET_CHOICES:
        raise ConfigError(f"target must be one of {TARGET_CHOICES}, got {cfg.target!r}")
    try:
        cfg.model_config("se" if cfg.target == "all" else None)
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.bootstrap < 1 or cfg.min_count < 1 or cfg.workers < 1:
        raise ConfigError("bootstrap, min_count and workers must be >= 1")
    if not cfg.margins or min(cfg.margins) <= 0:
        raise ConfigError("margins must be positive")
    return cfg
