"""Run configuration: flat key=value files, CLI overrides, seed fan-out."""
from __future__ import annotations

import os
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .actor_critic import TrainConfig
from .data import ConfigError, SyntheticConfig

SEED_ENV = "SETPOOL_SEED"


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "on"
    distance: str = "plain"
    data: str = ""
    ids: int = 50
    sets_per_id: int = 4
    set_min: int = 2
    set_max: int = 20
    dim: int = 32
    noise: float = 0.4
    outlier_rate: float = 0.15
    profile_rate: float = 0.3
    pose_shift: float = 0.5
    test_fraction: float = 0.5
    hidden: str = "32"
    head_hidden: str = ""
    features: str = "interact"
    gamma: float = 0.9
    lam: float = 0.01
    xi: float = 1.0
    alpha: float = 0.99
    rho_clip: float = 10.0
    lr_pi: float = 0.05
    lr_v: float = 0.01
    lr_h: float = 0.1
    momentum: float = 0.0
    pool_capacity: int = 5000
    minibatch: int = 16
    warmup: int = 32
    episodes: int = 2000
    head_warmup_epochs: int = 0
    head_warmup_lr: float = 0.1
    max_grad_norm: float = 1.0
    workers: int = 1

    def validate(self) -> None:
        self.synthetic().validate()
        choices = {"mode": ("on", "off"), "distance": ("plain", "pgr"), "features": ("raw", "interact")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(key, f"must be one of {allowed}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma", "must lie in [0, 1)")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction", "must lie in (0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", "must lie in [0, 1]")
        for key in ("xi", "rho_clip", "lr_pi", "lr_v", "head_warmup_lr", "max_grad_norm"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, "must be positive")
        for key in ("lam", "lr_h", "momentum"):
            if not getattr(self, key) >= 0:
                raise ConfigError(key, "must be >= 0")
        for key in ("pool_capacity", "minibatch", "warmup", "workers"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.warmup >= self.pool_capacity:
            raise ConfigError("warmup", "must be smaller than pool_capacity")
        for key in ("episodes", "head_warmup_epochs"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be >= 0")
        self.hidden_dims()
        self.head_hidden_dims()

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(self.ids, self.sets_per_id, self.set_min, self.set_max, self.dim,
                               self.noise, self.outlier_rate, self.profile_rate, self.pose_shift)

    def train(self) -> TrainConfig:
        return TrainConfig(self.episodes, self.gamma, self.lr_pi, self.lr_v, self.lr_h, self.momentum,
                           self.alpha, self.xi, self.rho_clip, self.pool_capacity, self.minibatch,
                           self.warmup, self.head_warmup_epochs, self.head_warmup_lr, self.max_grad_norm)

    def _dims(self, key: str) -> tuple[int, ...]:
        text = getattr(self, key).strip()
        if not text:
            return ()
        try:
            dims = tuple(int(x) for x in text.split(","))
        except ValueError:
            raise ConfigError(key, f"expected comma-separated widths, got {text!r}") from None
        if any(w < 1 for w in dims):
            raise ConfigError(key, "widths must be >= 1")
        return dims

    def hidden_dims(self) -> tuple[int, ...]:
        dims = self._dims("hidden")
        if not dims:
            raise ConfigError("hidden", "trunk needs at least one hidden layer")
        return dims

    def head_hidden_dims(self) -> tuple[int, ...]:
        return self._dims("head_hidden")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, value):
    if key not in FIELD_TYPES:
        raise ConfigError(key, "unknown configuration key")
    typ = FIELD_TYPES[key]
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"cannot parse {value!r} as {typ}") from None


def parse_kv_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", "expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = coerce(k, v)
    return out


def build_config(config_file: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides; seed falls back to $SETPOOL_SEED."""
    values: dict = {}
    if config_file:
        values.update(parse_kv_text(Path(config_file).read_text(), config_file))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = coerce(k, v)
    if "seed" not in values and os.environ.get(SEED_ENV):
        values["seed"] = coerce("seed", os.environ[SEED_ENV])
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent stream per named component, derived from the global seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])
