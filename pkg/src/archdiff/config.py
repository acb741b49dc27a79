"""Run configuration shared by the command-line tools.

A config file is JSON. Top-level scalar keys are ``space``, ``seed``,
``preset`` (``desk`` or ``full``) and ``threads``; the sections ``sde``,
``scorenet``, ``predictor``, ``sampler``, ``guidance`` and ``bo`` hold the
keys of the matching module configs. Nested sections and dotted keys are
interchangeable::

    {"space": "tiny5", "scorenet": {"steps": 3000}}
    {"space": "tiny5", "scorenet.steps": 3000}

Values are type-checked against the field they set; unknown keys are
rejected. ``--set section.key=value`` flags override file values and are
parsed with the field's type.
"""
from __future__ import annotations

import json
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from archdiff.bo import BoConfig
from archdiff.errors import ConfigError
from archdiff.predictor import PredictorConfig
from archdiff.sampler import GuidanceConfig, SamplerConfig
from archdiff.scorenet import ScoreNetConfig
from archdiff.sde import VeSdeConfig

SECTIONS = {
    "sde": VeSdeConfig,
    "scorenet": ScoreNetConfig,
    "predictor": PredictorConfig,
    "sampler": SamplerConfig,
    "guidance": GuidanceConfig,
    "bo": BoConfig,
}
TOP_LEVEL = {"space": str, "seed": int, "preset": str, "threads": int}
PRESETS = ("desk", "full")
SEED_ENV = "ARCHDIFF_SEED"


def _field_type(cls, name: str):
    hints = typing.get_type_hints(cls)
    return hints[name]


def _coerce(value, tp, key: str):
    """Check (or, for strings from the command line, parse) ``value`` against ``tp``."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None or value == "null":
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        return tuple(_coerce(v, args[0], key) for v in value)
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if tp is float:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported type {tp}")


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            if prefix:
                raise ConfigError(f"{key}: sections nest only one level deep")
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def check_key(key: str, value):
    if "." not in key:
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown config key {key!r}")
        return _coerce(value, TOP_LEVEL[key], key)
    section, name = key.split(".", 1)
    cls = SECTIONS.get(section)
    if cls is None:
        raise ConfigError(f"unknown config section {section!r}")
    if name not in {f.name for f in fields(cls)}:
        raise ConfigError(f"unknown config key {key!r}")
    return _coerce(value, _field_type(cls, name), key)


@dataclass
class RunConfig:
    space: str | None = None
    seed: int | None = None
    preset: str = "desk"
    threads: int = 1
    overrides: dict = field(default_factory=dict)  # dotted section keys

    @classmethod
    def from_tree(cls, tree: dict) -> "RunConfig":
        cfg = cls()
        cfg.update(flatten(tree))
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            tree = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        if not isinstance(tree, dict):
            raise ConfigError(f"{p}: top level must be an object")
        return cls.from_tree(tree)

    def update(self, flat: dict) -> None:
        for key, value in flat.items():
            value = check_key(key, value)
            if "." in key:
                self.overrides[key] = value
            else:
                setattr(self, key, value)
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def apply_sets(self, items: list[str]) -> None:
        flat = {}
        for item in items or ():
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            flat[k.strip()] = v.strip()
        self.update(flat)

    def resolve_seed(self, default: int = 0) -> int:
        if self.seed is None:
            env = os.environ.get(SEED_ENV)
            if env is not None:
                self.seed = _coerce(env, int, SEED_ENV)
            else:
                self.seed = default
        return self.seed

    def section(self, name: str, **defaults):
        """Build the module config for ``name``: preset base, then ``defaults``, then overrides."""
        cls = SECTIONS[name]
        kw = dict(defaults)
        kw.update({k.split(".", 1)[1]: v for k, v in self.overrides.items() if k.startswith(name + ".")})
        if name in ("bo", "sampler"):
            kw.setdefault("threads", self.threads)
        if self.preset == "desk" and hasattr(cls, "desk"):
            return cls.desk(**kw)
        return cls(**kw)

    def resolved(self) -> dict:
        """Every key of every section with its effective value."""
        out = {"space": self.space, "seed": self.seed, "preset": self.preset, "threads": self.threads}
        for name in SECTIONS:
            d = self.section(name).to_dict()
            out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
        return out

    def write_resolved(self, out_dir: str | Path) -> Path:
        p = Path(out_dir) / "config.json"
        p.write_text(json.dumps(self.resolved(), indent=2, sort_keys=True) + "\n")
        return p

