"""Run configuration and its flat ``key = value`` file format.

Nested dataclasses flatten to dotted keys (``loss.w``, ``encoder.patch_size``).
Tuples are written comma separated, booleans as ``true``/``false``; ``#`` starts
a comment. Unknown keys and values that do not parse as the field's type are
rejected with :class:`~tokenrot.errors.ConfigError`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Tuple

from .augmentation import AugmentationConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .objectives import FRAMEWORKS, LossConfig


@dataclass
class OptimConfig:
    lr: float = 1e-4
    momentum: float = 0.99
    nesterov: bool = True
    #: lr * (1 - step / total) ** poly_exponent; 0 keeps lr constant
    poly_exponent: float = 0.0
    weight_decay: float = 0.0
    ema_momentum: float = 0.996


@dataclass
class RunConfig:
    framework: str = "simtrot_w"
    dataset: str = "data"
    seed: int = 0
    split_seed: int = 0
    split: Tuple[float, float, float] = (0.8, 0.15, 0.05)
    batch_size: int = 2
    epochs: int = 10
    #: cap on optimizer steps (and the poly decay horizon); 0 means epochs decide
    max_steps: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    n_diag_volumes: int = 4
    labeled_fraction: float = 1.0
    pretrained: str = ""
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def validate(self):
        if self.framework not in FRAMEWORKS:
            raise ConfigError(f"unknown framework {self.framework!r}; expected one of {FRAMEWORKS}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.optim.lr < 0:
            raise ConfigError(f"optim.lr must be >= 0, got {self.optim.lr}")
        if not 0 <= self.optim.ema_momentum <= 1:
            raise ConfigError("optim.ema_momentum must lie in [0, 1]")
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("eval_every and checkpoint_every must be >= 0")
        if self.framework == "global_simclr" and self.batch_size < 2:
            raise ConfigError("global_simclr needs batch_size >= 2")
        self.encoder.validate()
        self.aug.validate()
        self.loss.validate()
        return self

    def to_text(self):
        return dump_config(self)

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:10]


def default_pretrain_config() -> RunConfig:
    return RunConfig()


def default_finetune_config() -> RunConfig:
    cfg = RunConfig(framework="simtrot_w")
    cfg.optim = OptimConfig(lr=0.01, momentum=0.99, nesterov=True, poly_exponent=0.9)
    return cfg


# ---------------------------------------------------------------- flat (de)serialization

def _fields(obj):
    hints = typing.get_type_hints(type(obj))
    for f in dataclasses.fields(obj):
        yield f.name, hints[f.name]


def flatten(obj, prefix="") -> dict:
    out = {}
    for name, tp in _fields(obj):
        value = getattr(obj, name)
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, f"{prefix}{name}."))
        else:
            out[prefix + name] = value
    return out


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(":".join(map(format_value, v)) if isinstance(v, tuple) else format_value(v)
                        for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text, tp, key):
    text = text.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
    except ValueError:
        pass
    else:
        raise ConfigError(f"{key}: unsupported field type {tp}")
    raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}")


def parse_value(text: str, tp, key: str):
    if typing.get_origin(tp) in (tuple, Tuple):
        args = typing.get_args(tp)
        inner = args[0]
        if not text.strip():
            items = []
        else:
            items = [t for t in text.split(",")]
        if typing.get_origin(inner) in (tuple, Tuple):
            sub = typing.get_args(inner)[0]
            value = tuple(tuple(_parse_scalar(x, sub, key) for x in item.split(":"))
                          for item in items)
        else:
            value = tuple(_parse_scalar(x, inner, key) for x in items)
        if len(args) > 1 and args[1] is not Ellipsis and len(value) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {text!r}")
        return value
    return _parse_scalar(text, tp, key)


def set_value(obj, key: str, text: str):
    """Set dotted ``key`` on nested dataclass ``obj`` from its text form."""
    parts = key.strip().split(".")
    target = obj
    for p in parts[:-1]:
        sub = getattr(target, p, None) if p in {f.name for f in dataclasses.fields(target)} else None
        if not dataclasses.is_dataclass(sub):
            raise ConfigError(f"unknown config key {key!r}")
        target = sub
    types = dict(_fields(target))
    name = parts[-1]
    if name not in types or dataclasses.is_dataclass(getattr(target, name)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, parse_value(text, types[name], key))


def dump_config(obj) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in flatten(obj).items())


def parse_lines(lines: Iterable[str], source="<config>"):
    pairs = []
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def apply_pairs(obj, pairs):
    for k, v in pairs:
        set_value(obj, k, v)
    return obj


def parse_override(item: str):
    item = item.lstrip("-")
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    k, v = item.split("=", 1)
    return k.strip(), v.strip()


def load_config(path, overrides=(), base=None):
    """Read a config file on top of ``base`` (pre-training defaults by default)
    and apply ``key=value`` overrides."""
    cfg = base if base is not None else default_pretrain_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        apply_pairs(cfg, parse_lines(path.read_text().splitlines(), str(path)))
    apply_pairs(cfg, [parse_override(o) if isinstance(o, str) else o for o in overrides])
    return cfg.validate()


def copy_config(cfg):
    return apply_pairs(type(cfg)(), parse_lines(dump_config(cfg).splitlines()))
