"""Run configuration: defaults < ``key=value`` file < command-line flags."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .losses import LossConfig
from .model import ModelConfig
from .training import TrainConfig, default_schedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # training
    seed: int = 0
    epochs: int = 60
    batch: int = 16
    momentum: float = 0.9
    lr_high: float = 0.05
    lr_low: float = 0.005
    # losses
    lam: float = 1.0
    alpha: float = 1.0
    beta: float = 0.05
    delta: float = 0.5
    softmax_target: str = "class"
    memory_source: str = "head"
    # model
    source: str = "toy"
    input_dim: int = 256
    height: int = 12
    width: int = 12
    channels: int = 64
    tokens: int = 8
    head_scale: float = 4.0
    p1: int = 6
    p2: int = 6
    # ablation switches
    branches: str = "two"
    memory: str = "on"
    loss: str = "tc"
    # evaluation
    metric: str = "cosine"
    protocol: str = "veri"
    trials: int = 10
    # paths
    manifest: str = ""
    out: str = "run"

    def model_config(self):
        if self.branches not in ("one", "two"):
            raise ConfigError(f"branches must be 'one' or 'two', got {self.branches!r}")
        p2 = 0 if self.branches == "one" else self.p2
        if self.branches == "two" and p2 < 1:
            raise ConfigError("two branches need p2 >= 1")
        try:
            return ModelConfig(
                source=self.source, input_dim=self.input_dim, height=self.height, width=self.width,
                channels=self.channels, tokens=self.tokens, p1=self.p1, p2=p2, head_scale=self.head_scale,
            )
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def train_config(self):
        if self.memory not in ("on", "off"):
            raise ConfigError(f"memory must be 'on' or 'off', got {self.memory!r}")
        if self.loss not in ("tc", "triplet"):
            raise ConfigError(f"loss must be 'tc' or 'triplet', got {self.loss!r}")
        try:
            return TrainConfig(
                epochs=self.epochs,
                batch_size=self.batch,
                lr_schedule=default_schedule(self.epochs, self.lr_high, self.lr_low),
                momentum=self.momentum,
                seed=self.seed,
                loss=LossConfig(self.lam, self.alpha, self.beta, self.softmax_target),
                delta=self.delta,
                memory=self.memory == "on",
                loss_kind=self.loss,
                memory_source=self.memory_source,
            )
        except ValueError as err:
            raise ConfigError(str(err)) from None


_ALIASES = {"lambda": "lam", "batch_size": "batch"}


def _key(name):
    name = name.strip().replace("-", "_")
    return _ALIASES.get(name, name)


def _coerce(name, raw):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {name!r} expects {kind}, got {raw!r}") from None
    return str(raw)


def parse_config_file(path):
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        k = _key(k)
        values[k] = _coerce(k, v.strip())
    return values


def load_run_config(path=None, overrides=None):
    """Merge defaults, then the file at ``path``, then ``overrides``."""
    cfg = RunConfig()
    if path:
        cfg = replace(cfg, **parse_config_file(path))
    if overrides:
        cfg = replace(cfg, **{_key(k): _coerce(_key(k), v) for k, v in overrides.items() if v is not None})
    return cfg
