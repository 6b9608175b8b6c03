"""Layered run configuration: defaults < config file < command-line overrides.

Config files hold ``section.key = value`` lines (``#`` starts a comment) or a
JSON object of sections. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .decode import GenerationConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    vocab_size: int = 2000
    test_fraction: float = 0.1


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "gen": GenerationConfig,
}
# derived from the vocabulary, never set by hand
_FIXED = {("model", "vocab_size")}


def _fields(section: str) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(SECTIONS[section]) if (section, f.name) not in _FIXED}


def _coerce(section: str, key: str, value):
    field = _fields(section)[key]
    default = field.default
    kind = type(default)
    if isinstance(value, str):
        text = value.strip()
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        if value in (0, 1):
            return bool(value)
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind is str:
        return str(value)
    raise ConfigError(f"{section}.{key}: cannot use {value!r} as {kind.__name__}")


class RunConfig:
    def __init__(self):
        self.values: dict[str, dict] = {s: {} for s in SECTIONS}

    def set(self, dotted: str, value) -> None:
        section, _, key = dotted.strip().partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key {dotted!r} (sections: {', '.join(SECTIONS)})")
        if key not in _fields(section):
            raise ConfigError(f"unknown config key {dotted!r}")
        self.values[section][key] = _coerce(section, key, value)

    def update_from_file(self, path: str | Path) -> None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".json":
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            for section, entries in data.items():
                if not isinstance(entries, dict):
                    raise ConfigError(f"{path}: section {section!r} must be an object")
                for k, v in entries.items():
                    self.set(f"{section}.{k}", v)
            return
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            try:
                self.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None

    def apply_overrides(self, overrides) -> None:
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            self.set(key, value)

    def build(self, section: str, **extra):
        try:
            return SECTIONS[section](**{**self.values[section], **extra})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from exc

    def dump(self) -> str:
        """Every resolved key, defaults included, as ``key = value`` lines."""
        lines = []
        for section in SECTIONS:
            for name, f in _fields(section).items():
                value = self.values[section].get(name, f.default)
                lines.append(f"{section}.{name} = {json.dumps(value)}")
        return "\n".join(lines) + "\n"


def resolve(config_path=None, overrides=None, seed: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if config_path:
        cfg.update_from_file(config_path)
    cfg.apply_overrides(overrides)
    if seed is not None:
        cfg.set("train.seed", seed)
    return cfg
