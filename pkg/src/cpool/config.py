"""Experiment configuration as a flat ``key=value`` text file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .continuous import DOWNSAMPLES
from .nn import POOLINGS
from .optim import KINDS

TASKS = ("distance", "distance_limited", "mnist")
HEAD_SCALINGS = ("moments", "none")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ExperimentConfig:
    task: str = "distance_limited"
    pooling: str = "continuous_max"
    iterations: int = 10
    init_strength: float = 0.1
    downsample: str = "max_pool"
    batch_size: int = 32
    steps: int = 2000
    # when > 0, overrides steps with epochs * ceil(train_size / batch_size)
    epochs: int = 0
    eval_every: int = 100
    eval_size: int = 1000
    train_subset: int = 10000
    seed: int = 0
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    momentum: float = 0.9
    limit_sq: float = 49.0
    # regression output = mean + std * network, with the exact target moments
    head_scaling: str = "moments"
    activation: str = "relu"
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        choices = {
            "task": TASKS,
            "pooling": POOLINGS,
            "downsample": DOWNSAMPLES,
            "optimizer": KINDS,
            "activation": ("relu",),
            "head_scaling": HEAD_SCALINGS,
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(name, f"must be one of {', '.join(allowed)}; got {getattr(self, name)!r}")
        for name in ("iterations", "batch_size", "eval_every", "eval_size", "train_subset"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be a positive integer")
        for name in ("steps", "epochs", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        for name in ("init_strength", "learning_rate", "momentum", "limit_sq"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if self.limit_sq <= 1:
            raise ConfigError("limit_sq", "must exceed 1")
        if not self.output_dir:
            raise ConfigError("output_dir", "must not be empty")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def format_config(cfg: ExperimentConfig) -> str:
    # repr keeps floats exact through a round trip
    return "".join(f"{f.name}={getattr(cfg, f.name)!r}\n" if f.type == "float"
                   else f"{f.name}={getattr(cfg, f.name)}\n" for f in fields(cfg))


def coerce(name: str, raw: str):
    if name not in _TYPES:
        raise ConfigError(name, "unknown key")
    try:
        return _CASTS[_TYPES[name]](raw.strip())
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw.strip()!r} as {_TYPES[name]}") from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = coerce(key, raw)
    return dataclasses.replace(base or ExperimentConfig(), **values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(format_config(cfg))
