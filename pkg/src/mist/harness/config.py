"""Run configuration and its line-oriented ``key=value`` file format.

Keys are dotted paths (``decoder.heads``, ``loss.gamma``, ``seed``); tuple
values are comma-separated and booleans accept on/off/true/false.  Unknown
keys are errors.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Tuple

from mist.decoder import Ablation, DecoderConfig
from mist.encoder import EncoderConfig
from mist.loss import LossConfig

OUTPUT_ENV = "MIST_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    prob: float = 0.5
    rotation: float = 15.0  # degrees, symmetric
    zoom: float = 0.1  # scale in [1 - zoom, 1 + zoom]
    shift: float = 0.1  # fraction of the side, per axis


@dataclass(frozen=True)
class DataConfig:
    count: int = 80
    val_fraction: float = 0.2
    shapes: str = "mixed"  # mixed | disc | rect
    dir: str = ""  # external image+mask directory; empty -> synthetic


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    image_size: int = 64
    batch_size: int = 4
    epochs: int = 50
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 7
    output_dir: str = "runs"

    def validate(self) -> "RunConfig":
        for name in ("image_size", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive and weight_decay non-negative")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.image_size % 32:
            raise ConfigError(f"image_size {self.image_size} is not divisible by 32")
        if not 2 <= self.decoder.n_classes <= 8:
            raise ConfigError("n_classes must lie in [2, 8]")
        if self.data.shapes not in ("mixed", "disc", "rect"):
            raise ConfigError(f"unknown data.shapes {self.data.shapes!r}")
        if not 0.0 < self.data.val_fraction < 1.0:
            raise ConfigError("data.val_fraction must lie in (0, 1)")
        try:
            self.encoder.validate(self.image_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


# -- flattening -----------------------------------------------------------

def _leaf_fields(cls, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            if tp is Ablation:
                # ablation switches sit directly under decoder.*
                yield from _leaf_fields(tp, prefix)
            else:
                yield from _leaf_fields(tp, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", tp


KEY_TYPES: Dict[str, type] = dict(_leaf_fields(RunConfig))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key: str, text: str):
    tp = KEY_TYPES[key]
    text = text.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("on", "true", "yes", "1"):
                return True
            if low in ("off", "false", "no", "0"):
                return False
            raise ValueError(text)
        if typing.get_origin(tp) is tuple:
            item = typing.get_args(tp)[0]
            return tuple(item(v) for v in text.split(",") if v.strip())
        return tp(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _lookup(cfg, key: str):
    obj = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        obj = getattr(obj, part)
    if isinstance(obj, DecoderConfig) and parts[-1] in Ablation.__dataclass_fields__:
        obj = obj.ablation
    return getattr(obj, parts[-1])


def to_items(cfg: RunConfig) -> List[Tuple[str, str]]:
    return [(key, format_value(_lookup(cfg, key))) for key in KEY_TYPES]


def with_overrides(cfg: RunConfig, overrides: Mapping[str, str]) -> RunConfig:
    """Return ``cfg`` with string-valued overrides applied by dotted key."""
    groups: Dict[str, dict] = {}
    top = {}
    for key, text in overrides.items():
        if key not in KEY_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        value = parse_value(key, text)
        if "." in key:
            section, leaf = key.split(".", 1)
            groups.setdefault(section, {})[leaf] = value
        else:
            top[key] = value
    changes = dict(top)
    try:
        for section, values in groups.items():
            current = getattr(cfg, section)
            if section == "decoder":
                ab = {k: values.pop(k) for k in list(values) if k in Ablation.__dataclass_fields__}
                if ab:
                    values["ablation"] = dataclasses.replace(current.ablation, **ab)
            changes[section] = dataclasses.replace(current, **values)
        return dataclasses.replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_lines(lines: Iterable[str]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for n, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in KEY_TYPES:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in to_items(cfg))


def loads(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    return with_overrides(base, parse_lines(text.splitlines()))


def load(path) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read())


def save(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(cfg))


def output_dir(cfg: RunConfig) -> str:
    return os.environ.get(OUTPUT_ENV) or cfg.output_dir
