"""JSON run configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import AugmentConfig
from .errors import ConfigError
from .model import ModelConfig, PPMConfig
from .trainer import LRSchedule, TrainConfig


@dataclass
class RunConfig:
    data_dir: Optional[str] = None
    out_dir: str = "run"
    checkpoint: Optional[str] = None  # defaults to <out_dir>/best.ckpt
    batch_size: int = 16
    max_epochs: int = 200
    seed: int = 0
    patience: int = 30
    schedule: LRSchedule = field(default_factory=LRSchedule)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            seed=self.seed,
            patience=self.patience,
            schedule=self.schedule,
            augment=self.augment,
            model=self.model,
        )

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "best.ckpt"


def _check_scalar(value, hint, path: str):
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
    elif hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    elif hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _convert(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _convert(value, args[0], path)
    if dataclasses.is_dataclass(hint):
        return from_dict(hint, value, path)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        item = typing.get_args(hint)[0]
        return tuple(_check_scalar(v, item, f"{path}[{i}]") for i, v in enumerate(value))
    return _check_scalar(value, hint, path)


def from_dict(cls, data, path: str = "config"):
    """Build dataclass ``cls`` from ``data``; unknown keys are errors, missing keys keep defaults."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _convert(v, hints[k], f"{path}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def to_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def load_run_config(path) -> RunConfig:
    """Parse a config file; relative paths inside it resolve against the file's directory."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    cfg = from_dict(RunConfig, raw)
    base = p.resolve().parent
    if cfg.data_dir is not None:
        cfg.data_dir = str(base / cfg.data_dir)
    cfg.out_dir = str(base / cfg.out_dir)
    if cfg.checkpoint is not None:
        cfg.checkpoint = str(base / cfg.checkpoint)
    return cfg


def toy_run_config(data_dir: str = ".", out_dir: str = "run", seed: int = 0) -> RunConfig:
    """Desk-scale recipe: reduced network, batch 4, 150 epochs (300 steps on 8 images).

    The base learning rate is raised from the full-scale 5e-5 so that a
    randomly initialised network converges within the step budget.
    """
    return RunConfig(
        data_dir=data_dir,
        out_dir=out_dir,
        batch_size=4,
        max_epochs=150,
        seed=seed,
        patience=150,
        schedule=LRSchedule(base=1e-3, gamma=0.1, step_epochs=100),
        model=ModelConfig(
            input_size=(96, 128),
            encoder_stage_channels=(16, 32, 64, 128, 128),
            decoder_channels=(64, 32, 16, 8),
            ppm=PPMConfig(bins=(1, 2, 3)),
            seed=seed,
        ),
    )
