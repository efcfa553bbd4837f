"""Training configuration and the shipped dataset presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .numerics.optim import ConfigError

PRESETS = ("tmall", "lastfm", "nowplaying")
_ALIASES = {"lambda": "lam", "layers": "L", "factors": "K"}


@dataclass
class TrainConfig:
    d: int = 128
    K: int = 4
    L: int = 2
    epsilon: int = 3
    max_neighbors: int = 12
    d_p: int | None = None
    beta: float = 4.0
    lam: float = 0.02
    dropout: float = 0.2
    batch_size: int = 100
    weight_decay: float = 1e-5
    base_lr: float = 1e-3
    lr_decay: float = 0.1
    lr_every: int = 3
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    ce_mode: str = "binary"
    max_len: int = 50
    leaky_slope: float = 0.2
    weight_scale: str = "raw"
    init_std: float = 0.1

    def __post_init__(self):
        self.validate()

    @property
    def dk(self) -> int:
        return self.d // self.K

    @property
    def pos_dim(self) -> int:
        return self.d_p if self.d_p is not None else self.d // self.K

    def validate(self) -> None:
        if self.K < 1 or self.d < 1 or self.d % self.K:
            raise ConfigError(f"embedding size d={self.d} must be a positive multiple of K={self.K}")
        for name in ("L", "epsilon", "max_neighbors", "batch_size", "lr_every", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_p is not None and self.d_p < 1:
            raise ConfigError("d_p must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("max_epochs must be >= 0 and patience >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.base_lr < 0 or self.weight_decay < 0 or self.beta < 0 or self.lam < 0:
            raise ConfigError("base_lr, weight_decay, beta and lambda must be non-negative")
        if self.ce_mode not in ("binary", "multiclass"):
            raise ConfigError(f"ce_mode must be binary or multiclass, got {self.ce_mode!r}")
        if self.weight_scale not in ("raw", "log1p"):
            raise ConfigError(f"weight_scale must be raw or log1p, got {self.weight_scale!r}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        clean = {}
        for key, val in values.items():
            key = _ALIASES.get(key, key)
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            clean[key] = val
        return cls(**clean)

    @classmethod
    def from_toml(cls, path, **overrides) -> "TrainConfig":
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return Path(str(resources.files("tiedgnn") / "presets" / f"{name}.toml"))


def load_preset(name: str, **overrides) -> TrainConfig:
    return TrainConfig.from_toml(preset_path(name), **overrides)
