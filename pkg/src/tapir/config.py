"""Run configuration: flat ``key = value`` text with ``[section]`` headers."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from typing import Tuple

from .tensorkit import DEFAULT_SEED


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    lstm_layers: int = 1
    lstm_hidden: int = 256
    ctrl_layers: int = 1
    ctrl_hidden: int = 256
    memory_size: int = 5
    tau: float = 0.5
    reviser_kind: str = "trf"
    reviser_layers: int = 2
    d_model: int = 512
    ffn_dim: int = 2048
    heads: int = 8
    embed_dim: int = 300
    allow_any_memory: bool = False


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 16
    clip: float = 0.0
    epochs: int = 50
    patience: int = 10
    dropout: float = 0.1
    seed: int = DEFAULT_SEED
    unk_prob: float = 0.02
    delay: int = 0
    warmup: int = 5
    decay_points: Tuple[int, ...] = (30, 40, 45)
    weight_decay: float = 0.01
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.98
    val_fraction: float = 0.1
    tapir_lr: float = 1e-3
    tapir_clip: float = 0.0


@dataclass
class SignalConfig:
    epochs: int = 20
    warmup: int = 5
    lr: float = 1e-4
    clip: float = 1.0
    dropout: float = 0.1
    batch: int = 128
    ffn_dim: int = 2048
    d_model: int = 512
    heads: int = 8
    layers: int = 1


@dataclass
class PathsConfig:
    embeddings: str = ""


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    signal: SignalConfig = field(default_factory=SignalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "Config":
        m = self.model
        if not 0.0 <= m.tau <= 1.0:
            raise ConfigError("model.tau must lie in [0, 1]")
        if m.memory_size not in (3, 5, 7) and not m.allow_any_memory:
            raise ConfigError("model.memory_size must be 3, 5 or 7 (set allow_any_memory to override)")
        if m.memory_size < 1:
            raise ConfigError("model.memory_size must be positive")
        if m.reviser_kind not in ("trf", "lt"):
            raise ConfigError("model.reviser_kind must be trf or lt")
        for d, h, name in ((m.d_model, m.heads, "model"), (self.signal.d_model, self.signal.heads, "signal")):
            if d % h:
                raise ConfigError(f"{name}.d_model must be divisible by heads")
        if self.train.delay not in (0, 1, 2):
            raise ConfigError("train.delay must be 0, 1 or 2")
        if self.signal.layers != 1:
            raise ConfigError("signal.layers must be 1: the action generator is a single-layer model")
        if not 0.0 <= self.train.dropout < 1.0 or not 0.0 <= self.signal.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        return self


def _coerce(kind, raw: str):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    if kind in (str, "str"):
        return raw
    if "Tuple" in str(kind):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    raise ValueError(f"unsupported field type {kind}")


def load_config(path) -> Config:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_parser(parser)


def config_from_parser(parser: configparser.ConfigParser) -> Config:
    cfg = Config()
    for section in parser.sections():
        if not hasattr(cfg, section):
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        types = {f.name: f.type for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigError(f"unknown key {section}.{key}")
            try:
                setattr(target, key, _coerce(types[key], raw))
            except ValueError:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from None
    return cfg.validate()


def dump_config(cfg: Config) -> str:
    lines = []
    for section in ("model", "train", "signal", "paths"):
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
