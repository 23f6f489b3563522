"""Run configuration: INI files with [model], [train] and [paths] sections."""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SEED_ENV = "CMSER_SEED"

# key -> parser, per section; None values mean "unset" and fall through to defaults
SCHEMA = {
    "model": {
        "modalities": str,
        "hidden": int,
        "classifier_hidden": int,
        "n_classes": int,
        "seed": int,
    },
    "train": {
        "design": str,
        "lr": float,
        "lr_min": float,
        "epochs": int,
        "batch_size": int,
        "sml_weight": float,
        "weighted": lambda v: _parse_bool(v),
        "neutral_class": int,
        "max_grad_norm": float,
        "max_frames": int,
        "seed": int,
    },
    "paths": {
        "manifest": str,
        "out": str,
        "train_split": str,
        "dev_split": str,
    },
}


# relative values in these keys are resolved against the config file's directory
_PATH_KEYS = ("manifest", "out")


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=lambda: {s: {} for s in SCHEMA})

    def get(self, section: str, key: str, default=None):
        value = self.values.get(section, {}).get(key)
        return default if value is None else value

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown configuration key [{section}] {key}")
        if value is None:
            return
        try:
            self.values[section][key] = SCHEMA[section][key](value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None

    def update(self, section: str, **kwargs) -> None:
        for key, value in kwargs.items():
            self.set(section, key, value)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section in SCHEMA:
            parser[section] = {k: str(v) for k, v in sorted(self.values[section].items())}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, value in parser[section].items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            if section == "paths" and key in _PATH_KEYS and not Path(value).is_absolute():
                value = str(Path(path).parent / value)
            cfg.set(section, key, value)
    return cfg


def resolve_seed(flag: int | None, cfg: RunConfig | None = None, section: str = "train") -> int:
    """Seed precedence: explicit flag, config file, ``CMSER_SEED``, then 0."""
    if flag is not None:
        return int(flag)
    if cfg is not None and cfg.get(section, "seed") is not None:
        return int(cfg.get(section, "seed"))
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0


def write_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(cfg.to_ini(), encoding="utf-8")
    return path
