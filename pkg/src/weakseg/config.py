"""TOML run configuration: one section per module config, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .losses import WeakLossConfig
from .phantom import PhantomConfig
from .pipeline import EvalConfig, ScribbleConfig
from .trainer import TrainConfig
from .unet import UNetConfig

SEED_ENV = "WEAKSEG_SEED"


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


@dataclass
class DataSection:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    manifest: str = ""


@dataclass
class ScribbleSection:
    scribble: ScribbleConfig = field(default_factory=ScribbleConfig)
    annotations: str = ""


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    scribble: ScribbleSection = field(default_factory=ScribbleSection)
    model: UNetConfig = field(default_factory=UNetConfig)
    loss: WeakLossConfig = field(default_factory=WeakLossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        checks = [
            ("data", self.data.phantom.validate),
            ("scribble", self.scribble.scribble.validate),
            ("model", self.model.validate),
            ("loss", lambda: self.loss.validate(allow_zero_lambda=True)),
            ("train", self.train.validate),
            ("eval", self.eval.validate),
        ]
        for section, check in checks:
            try:
                check()
            except ValueError as exc:
                raise ConfigError(f"[{section}] {exc}", section) from exc

    def to_dict(self) -> dict:
        return {
            "data": {**_plain(self.data.phantom), "manifest": self.data.manifest},
            "scribble": {**_plain(self.scribble.scribble), "annotations": self.scribble.annotations},
            "model": _plain(self.model),
            "loss": _plain(self.loss),
            "train": _plain(self.train),
            "eval": _plain(self.eval),
        }


def _plain(obj) -> dict:
    def conv(v):
        if isinstance(v, (tuple, list)):
            return [conv(x) for x in v]
        return v

    return {f.name: conv(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def _coerce(key: str, default, value):
    """Convert a TOML value to the type of the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}", key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}", key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}", key)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}", key)
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected an array, got {value!r}", key)
        if len(default) and len(value) != len(default):
            raise ConfigError(f"{key}: expected {len(default)} entries, got {len(value)}", key)
        return tuple(_coerce(f"{key}[{i}]", d, v) for i, (d, v) in enumerate(zip(default, value)))
    return value


def _fill(obj, table: dict, section: str, extra: tuple[str, ...] = ()):
    """Copy ``table`` into dataclass ``obj``; returns leftover keys listed in ``extra``."""
    names = {f.name for f in dataclasses.fields(obj)}
    leftovers = {}
    for key, value in table.items():
        full = f"{section}.{key}"
        if key in extra:
            leftovers[key] = value
            continue
        if key not in names:
            raise ConfigError(f"unknown key '{full}'", full)
        setattr(obj, key, _coerce(full, getattr(obj, key), value))
    return leftovers


SECTIONS = ("data", "scribble", "model", "loss", "train", "eval")


def from_dict(doc: dict, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    for key, value in doc.items():
        if key not in SECTIONS:
            raise ConfigError(f"unknown section '{key}'", key)
        if not isinstance(value, dict):
            raise ConfigError(f"'{key}' must be a table", key)
    cfg = RunConfig()
    rest = _fill(cfg.data.phantom, doc.get("data", {}), "data", ("manifest",))
    if "manifest" in rest:
        cfg.data.manifest = _coerce("data.manifest", "", rest["manifest"])
    rest = _fill(cfg.scribble.scribble, doc.get("scribble", {}), "scribble", ("annotations",))
    if "annotations" in rest:
        cfg.scribble.annotations = _coerce("scribble.annotations", "", rest["annotations"])
    _fill(cfg.model, doc.get("model", {}), "model")
    _fill(cfg.loss, doc.get("loss", {}), "loss")
    _fill(cfg.train, doc.get("train", {}), "train")
    _fill(cfg.eval, doc.get("eval", {}), "eval")
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}", SEED_ENV) from exc
        cfg.data.phantom.seed = seed
        cfg.train.seed = seed
    cfg.validate()
    return cfg


def load_config(path=None, env: dict | None = None) -> RunConfig:
    """Read a TOML file (``None`` gives the defaults)."""
    if path is None:
        return from_dict({}, env)
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not a text file") from exc
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(doc, env)


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "resolved_config.toml"
    path.write_text(dumps(cfg))
    return path
