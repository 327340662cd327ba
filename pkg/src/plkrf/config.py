"""Run configuration: JSON file plus dotted ``--set`` overrides."""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from .data import SynthSpec
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

SEED_ENV = "PLKRF_SEED"


@dataclass
class GenConfig:
    train: int = 8
    val: int = 0
    test: int = 2
    seed: int = 0


@dataclass
class EvalConfig:
    split: str = "test"
    input_views: Optional[list[int]] = None   # None: views 64/128 or 0 and n/2
    samples: int = 64
    max_scenes: Optional[int] = None
    debug_ground_truth: bool = False


@dataclass
class Paths:
    dataset: str = "data"
    checkpoint_dir: str = "runs/train"
    output_dir: str = "runs/out"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthSpec = field(default_factory=SynthSpec)
    gen: GenConfig = field(default_factory=GenConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: Paths = field(default_factory=Paths)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.data.validate()
        if min(self.gen.train, self.gen.val, self.gen.test) < 0:
            raise ConfigError("scene counts must be non-negative")


def _coerce(tp, value, where: str):
    """Convert JSON values to the annotated field type (lists to tuples etc.)."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {value!r}")
        return _build(tp, value, where)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        item = args[0] if args else Any
        items = [_coerce(item, v, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, values: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown config keys under '{where or '<root>'}': {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in values.items()}
    return cls(**kwargs)


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b=v`` to (["a", "b"], v); v is read as JSON, else kept as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def merge(base: dict, path: Sequence[str], value: Any) -> None:
    node = base
    for part in path[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"override path {'.'.join(path)} does not name a config section")
        node = node[part]
    if path[-1] not in node:
        raise ConfigError(f"unknown config key {'.'.join(path)}")
    node[path[-1]] = value


def _deep_update(base: dict, new: dict, where: str = "") -> None:
    for k, v in new.items():
        here = f"{where}.{k}" if where else k
        if k not in base:
            raise ConfigError(f"unknown config key {here}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _deep_update(base[k], v, here)
        else:
            base[k] = v


def load_config(path: Optional[str | os.PathLike] = None, overrides: Sequence[str] = (),
                env: Optional[dict] = None) -> RunConfig:
    """Defaults, then the JSON file, then ``PLKRF_SEED``, then ``--set`` overrides."""
    merged = RunConfig().to_dict()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        try:
            payload = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _deep_update(merged, payload)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from exc
        for section in ("model", "train", "gen"):
            merged[section]["seed"] = seed
    for text in overrides:
        merge(merged, *parse_override(text))
    cfg = _build(RunConfig, merged)
    cfg.validate()
    return cfg


def echo(cfg: RunConfig, out_dir: str | os.PathLike, name: str = "config.json") -> Path:
    """Write the effective config; feeding it back with ``--config`` reproduces the run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
