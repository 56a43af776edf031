"""Run configuration: one flat namespace of keys shared by config files and CLI flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import NORM_MODES
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    data: str | None = None
    folds: int = 5
    fold: int | None = None  # run a single fold instead of all
    seed: int = 0
    fold_seed: int | None = None  # defaults to seed
    model_seed: int | None = None  # defaults to seed
    max_steps: int = 40000
    batch_size: int = 256
    l2_lambda: float = 1e-4
    lr: float = 1e-4
    decay_step: int = 20000
    decay_rate: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    init: str = "he"  # "he" or "fixed:STD"
    norm: str = "per-feature"
    train_subsample: int | None = None
    output_relu: bool = False
    knn_k: int = 5
    parallel_folds: int = 1

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        if self.fold is not None and not 0 <= self.fold < self.folds:
            raise ConfigError(f"fold must be in [0, {self.folds})")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.l2_lambda < 0:
            raise ConfigError("lambda must be non-negative")
        if self.lr <= 0 or self.decay_step < 1 or not 0 < self.decay_rate <= 1:
            raise ConfigError("need lr > 0, decay_step >= 1 and 0 < decay_rate <= 1")
        if self.norm not in NORM_MODES:
            raise ConfigError(f"norm must be one of {NORM_MODES}")
        if self.train_subsample is not None and self.train_subsample < 1:
            raise ConfigError("train_subsample must be >= 1")
        if self.knn_k < 1:
            raise ConfigError("k must be >= 1")
        if self.parallel_folds < 1:
            raise ConfigError("parallel_folds must be >= 1")
        self.init_scheme()  # validates

    def init_scheme(self) -> tuple[str, float]:
        if self.init == "he":
            return "he", 0.0
        kind, _, std = self.init.partition(":")
        try:
            value = float(std)
        except ValueError:
            value = -1.0
        if kind != "fixed" or value <= 0:
            raise ConfigError(f"init must be 'he' or 'fixed:STD' with STD > 0, got {self.init!r}")
        return "fixed", value

    def resolved(self) -> "RunConfig":
        return dataclasses.replace(
            self,
            fold_seed=self.seed if self.fold_seed is None else self.fold_seed,
            model_seed=self.seed if self.model_seed is None else self.model_seed,
        )

    def model_config(self) -> ModelConfig:
        scheme, std = self.init_scheme()
        kwargs = {"init": scheme, "output_relu": self.output_relu}
        if scheme == "fixed":
            kwargs["init_std"] = std
        return ModelConfig(**kwargs)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            max_steps=self.max_steps, batch_size=self.batch_size, lr=self.lr,
            decay_step=self.decay_step, decay_rate=self.decay_rate, beta1=self.beta1,
            beta2=self.beta2, epsilon=self.epsilon, l2_lambda=self.l2_lambda,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        """Build from string or typed values; unknown keys are an error."""
        return cls().with_overrides(raw)

    def with_overrides(self, raw: dict) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(self)}
        merged = self.to_dict()
        for key, value in raw.items():
            key = key.replace("-", "_")
            if key == "lambda":
                key = "l2_lambda"
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(fields[key].type, key, value)
        return RunConfig(**merged)


def _coerce(type_name: str, key: str, value):
    if value is None or not isinstance(value, str):
        if isinstance(value, (np.integer, np.floating)):
            return value.item()
        return value
    text = value.strip()
    optional = "None" in type_name
    if optional and text.lower() in ("", "none", "null"):
        return None
    try:
        if type_name.startswith("int"):
            return int(text)
        if type_name.startswith("float"):
            return float(text)
        if type_name.startswith("bool"):
            lowered = text.lower()
            if lowered in ("on", "true", "1", "yes"):
                return True
            if lowered in ("off", "false", "0", "no"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return text


def read_config_file(path) -> dict:
    """Parse a flat ``key=value`` file; blank lines and ``#`` comments are skipped."""
    raw = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw
