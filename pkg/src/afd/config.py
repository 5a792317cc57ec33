"""Flat ``section.key = value`` run configuration.

Example::

    # comments and blank lines are ignored
    data.source = synthetic
    data.separation = 0.05
    finetune.mode = afd
    finetune.lr_schedule = 0:0.0025, 15:0.00025
    attack.epsilon = 8/255

Every key has a default; values are coerced to the default's type. Unknown
keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any

from afd.attacks import AttackConfig
from afd.errors import ConfigError
from afd.model import Architecture
from afd.training import FineTuneConfig, PretrainConfig

_PRETRAIN = {f.name: getattr(PretrainConfig(), f.name) for f in fields(PretrainConfig)}
_FINETUNE = {f.name: getattr(FineTuneConfig(), f.name) for f in fields(FineTuneConfig) if f.name != "attack"}
_TRAIN_ATTACK = {f.name: getattr(AttackConfig.training(), f.name) for f in fields(AttackConfig)}
_EVAL_ATTACK = {f.name: getattr(AttackConfig.evaluation(), f.name) for f in fields(AttackConfig)}

DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {
        "source": "synthetic",  # or "cifar10"
        "train": (),  # CIFAR-10 binary files
        "test": (),
        "num_classes": 4,
        "samples_per_class": 1250,
        "input_shape": (3, 8, 8),
        "separation": 0.05,
        "noise": 0.1,
        "seed": 0,
        "test_size": 1000,  # synthetic only: held-out tail of the generated set
        "eval_limit": 0,  # 0 = whole test split
    },
    "model": {"feature_dim": 32, "kind": "conv", "channels": (8, 16), "hidden": (64,), "feature_relu": True},
    "pretrain": _PRETRAIN,
    "finetune": _FINETUNE,
    "attack": _TRAIN_ATTACK,
    "eval": _EVAL_ATTACK,
    # one-at-a-time grid around the finetune.* values
    "sweep": {"alpha": (0.01, 0.05, 0.1), "beta": (0.1, 0.25, 0.5), "gamma": (10.0, 25.0, 30.0, 35.0)},
    "run": {
        "pretrained": "",  # checkpoint consumed by finetune
        "checkpoint": "",  # checkpoint consumed by evaluate / dump-features
        "samples": 0,  # dump-features row count, 0 = whole test split
    },
}

def _parse_scalar(text: str, like: Any, key: str):
    t = text.strip()
    try:
        if isinstance(like, bool):
            low = t.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(t)
        if isinstance(like, int):
            return int(t)
        if isinstance(like, float):
            return float(Fraction(t)) if "/" in t else float(t)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return t


def _parse_value(text: str, default: Any, key: str):
    if key == "finetune.lr_schedule":
        pairs = []
        for item in filter(None, (s.strip() for s in text.split(","))):
            if ":" not in item:
                raise ConfigError(f"{key}: expected 'epoch:lr' items, got {item!r}")
            e, v = item.split(":", 1)
            pairs.append((_parse_scalar(e, 0, key), _parse_scalar(v, 0.0, key)))
        return tuple(pairs)
    if isinstance(default, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        like = default[0] if default else ""
        return tuple(_parse_scalar(s, like, key) for s in items)
    return _parse_scalar(text, default, key)


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(f"{x[0]}:{x[1]}" if isinstance(x, tuple) else str(x) for x in v)
    return str(v)


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def set(self, key: str, text: str) -> None:
        section, _, name = key.strip().partition(".")
        if section not in self.values or name not in self.values[section]:
            raise ConfigError(f"unknown configuration key {key.strip()!r}")
        self.values[section][name] = _parse_value(text, DEFAULTS[section][name], key.strip())

    def get(self, key: str) -> Any:
        section, _, name = key.partition(".")
        return self.values[section][name]

    def to_dict(self) -> dict:
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
                for s, sec in self.values.items()}

    def dumps(self) -> str:
        lines = []
        for s, sec in self.values.items():
            for k, v in sec.items():
                lines.append(f"{s}.{k} = {_format_value(v)}")
        return "\n".join(lines) + "\n"

    # typed views -----------------------------------------------------------

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(**self.values["pretrain"])

    def finetune_config(self) -> FineTuneConfig:
        return FineTuneConfig(attack=self.train_attack(), **self.values["finetune"])

    def train_attack(self) -> AttackConfig:
        return AttackConfig(**self.values["attack"])

    def eval_attack(self) -> AttackConfig:
        return AttackConfig(**self.values["eval"])

    def architecture(self, input_shape, num_classes: int) -> Architecture:
        return Architecture(tuple(input_shape), num_classes, **self.values["model"])

    def require(self, *keys: str) -> None:
        """Reject empty or non-existent path settings, naming the key."""
        for key in keys:
            v = self.get(key)
            paths = v if isinstance(v, tuple) else (v,)
            if not paths or any(p == "" for p in paths):
                raise ConfigError(f"missing required setting {key}")
            for p in paths:
                if not Path(p).exists():
                    raise ConfigError(f"{key}: path {p!r} does not exist")


def parse_text(text: str, cfg: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        try:
            cfg.set(key, value)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return cfg


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides, then ``seed``."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        parse_text(text, cfg, str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key, value)
    if seed is not None:
        for key in ("pretrain.seed", "finetune.seed"):
            cfg.set(key, str(seed))
    return cfg
