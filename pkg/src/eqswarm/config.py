"""YAML run configuration mapped onto nested dataclasses, with dotted overrides."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from .crystal import CrystalSynthConfig, RegressionConfig
from .data import SynthConfig
from .loss import LossConfig
from .model import ModelConfig
from .training import TrainConfig, config_hash


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str = ""  # XYZ directory; empty means synthesize
    eval_path: str = ""
    n_train: int = 64
    n_eval: int = 16


@dataclass
class CrystalRunConfig:
    n_base: int = 50
    seed: int = 0
    target: str = "buckingham"
    dataset: str = ""
    checkpoint: str = ""
    synth: CrystalSynthConfig = field(default_factory=CrystalSynthConfig)
    regression: RegressionConfig = field(default_factory=RegressionConfig)


@dataclass
class RunConfig:
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    crystal: CrystalRunConfig = field(default_factory=CrystalRunConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _coerce(value, default, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def build(cls, data: dict | None, prefix: str = ""):
    """Instantiate dataclass ``cls`` from a (possibly partial) mapping,
    rejecting keys that ``cls`` does not define."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
    defaults = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        key = prefix + f.name
        if dataclasses.is_dataclass(hints[f.name]):
            kwargs[f.name] = build(hints[f.name], data[f.name], key + ".")
        else:
            kwargs[f.name] = _coerce(data[f.name], getattr(defaults, f.name), key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from None


def apply_override(tree: dict, dotted: str) -> None:
    """Set ``a.b.c=value`` inside a nested dict; the value is parsed as YAML."""
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r} must look like key.path=value")
    key, raw = dotted.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: '{part}' is not a section")
    node[parts[-1]] = yaml.safe_load(raw)


def parse_yaml(text: str, source: str = "<config>") -> dict:
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: {getattr(exc, 'problem', None) or exc}") from None
    if tree is None:
        return {}
    if not isinstance(tree, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return tree


def load_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    tree: dict[str, Any] = {}
    if path is not None:
        tree = parse_yaml(Path(path).read_text(), str(path))
    for item in overrides:
        apply_override(tree, item)
    return build(RunConfig, tree)


def dump_config(cfg: RunConfig) -> str:
    def plain(obj):
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        return obj
    return yaml.safe_dump(plain(cfg.to_dict()), sort_keys=False)
