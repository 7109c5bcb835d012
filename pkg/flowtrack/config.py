"""Run configuration: one JSON file plus ``--dotted.key=value`` overrides.

Layout (every section optional, defaults below):

    {
      "_comment": "keys starting with an underscore are ignored",
      "schema_version": 1,
      "seed": 0,
      "threads": 0,                      0 -> $FLOWTRACK_THREADS or 1
      "sequences": 1,                    synthetic sequences written by `synth`
      "paths":    {"detections", "groundtruth", "model", "predictions", "output_dir"},
      "graph":    GraphConfig,   "window": WindowConfig,
      "newton":   NewtonOptions, "train":  TrainConfig,  "loss": LossWeights,
      "synth":    SynthConfig,   "cost":   CostConfig,   "formats": FormatsConfig,
      "eval":     EvalConfig,    "gradcheck": GradcheckConfig
    }

Every validation failure raises ConfigError naming the dotted field path.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from flowtrack.common import SCHEMA_VERSION, ConfigError, env_int, env_str
from flowtrack.cost_models import ARCHITECTURES, DEFAULT_HANDCRAFTED_A, DEFAULT_HANDCRAFTED_B, FEATURE_SETS, HANDCRAFTED
from flowtrack.detections_io import FORMATS, SynthConfig
from flowtrack.flow_graph import GraphConfig
from flowtrack.gradcheck import GradcheckConfig
from flowtrack.smoothed_lp import NewtonOptions
from flowtrack.tracking import WindowConfig
from flowtrack.training import LossWeights, TrainConfig

DEFAULT_OUTPUT_DIR = "out"
AUX_SOURCES = ("none", "geometry")


@dataclass(frozen=True)
class PathsConfig:
    detections: str | None = None
    groundtruth: str | None = None
    model: str | None = None
    predictions: str | None = None
    output_dir: str = ""


@dataclass(frozen=True)
class CostConfig:
    architecture: str = "handcrafted_B"
    feature_set: str = "bo"
    handcrafted: dict[str, float] = field(default_factory=dict)
    # Grid for `tune`; empty means training.DEFAULT_GRIDS.
    grid: dict[str, tuple[float, ...]] = field(default_factory=dict)
    aux: str = "none"

    def validate(self, prefix: str = "cost") -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"{prefix}.architecture", f"must be one of {ARCHITECTURES}")
        if self.feature_set not in FEATURE_SETS:
            raise ConfigError(f"{prefix}.feature_set", f"must be one of {tuple(FEATURE_SETS)}")
        if self.aux not in AUX_SOURCES:
            raise ConfigError(f"{prefix}.aux", f"must be one of {AUX_SOURCES}")
        if self.architecture == "twostream" and self.aux == "none":
            raise ConfigError(f"{prefix}.aux", "twostream needs an auxiliary link feature source")
        if self.architecture in HANDCRAFTED:
            known = DEFAULT_HANDCRAFTED_A if self.architecture == "handcrafted_A" else DEFAULT_HANDCRAFTED_B
            for section in ("handcrafted", "grid"):
                for key in getattr(self, section):
                    if key not in known:
                        raise ConfigError(f"{prefix}.{section}.{key}", f"unknown {self.architecture} parameter")


@dataclass(frozen=True)
class FormatsConfig:
    detections: str = "mot"
    groundtruth: str = "mot"
    results: str = "mot"
    classes: tuple[str, ...] | None = None
    object_type: str = "Car"

    def validate(self, prefix: str = "formats") -> None:
        for name in ("detections", "groundtruth", "results"):
            if getattr(self, name) not in FORMATS:
                raise ConfigError(f"{prefix}.{name}", f"must be one of {FORMATS}")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5

    def validate(self, prefix: str = "eval") -> None:
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigError(f"{prefix}.iou_threshold", "must be in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    threads: int = 0
    sequences: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    newton: NewtonOptions = field(default_factory=NewtonOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    synth: SynthConfig = field(default_factory=SynthConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    formats: FormatsConfig = field(default_factory=FormatsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {self.schema_version}, expected {SCHEMA_VERSION}")
        if self.threads < 0:
            raise ConfigError("threads", "must be >= 0")
        if self.sequences < 1:
            raise ConfigError("sequences", "must be >= 1")
        for name in ("graph", "window", "newton", "train", "loss", "synth", "cost", "formats", "eval", "gradcheck"):
            getattr(self, name).validate(name)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------- #
# Building dataclasses from plain data
# --------------------------------------------------------------------------- #
def _type_name(hint: Any) -> str:
    return getattr(hint, "__name__", None) or str(hint).replace("typing.", "")


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        options = [a for a in args if a is not type(None)]
        for option in options:
            try:
                return _coerce(value, option, path)
            except ConfigError:
                continue
        raise ConfigError(path, f"expected {' or '.join(_type_name(o) for o in options)}, got {value!r}")

    if dataclasses.is_dataclass(hint):
        if not isinstance(value, Mapping):
            raise ConfigError(path, f"expected an object, got {value!r}")
        return build(hint, value, path)

    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))

    if origin is dict:
        if not isinstance(value, Mapping):
            raise ConfigError(path, f"expected an object, got {value!r}")
        value_type = args[1] if args else Any
        return {str(k): _coerce(v, value_type, f"{path}.{k}") for k, v in value.items()}

    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def build(cls: type, data: Mapping[str, Any], prefix: str = "") -> Any:
    """Instantiate dataclass ``cls`` from ``data``; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key.startswith("_"):
            continue
        if key not in names:
            raise ConfigError(path, "unknown key")
        kwargs[key] = _coerce(value, hints[key], path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix or "config", str(exc)) from exc


# --------------------------------------------------------------------------- #
# Loading
# --------------------------------------------------------------------------- #
def parse_override(item: str) -> tuple[list[str], Any]:
    """``--train.iterations=50`` -> (["train", "iterations"], 50)."""
    text = item[2:] if item.startswith("--") else item
    if "=" not in text:
        raise ConfigError(text or "override", "overrides take the form --dotted.key=value")
    key, raw = text.split("=", 1)
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(key or "override", "malformed dotted key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _set_path(data: dict, keys: Sequence[str], value: Any) -> None:
    node = data
    for depth, key in enumerate(keys[:-1]):
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        if not isinstance(child, dict):
            raise ConfigError(".".join(keys[: depth + 1]), "is not a section")
        node = child
    node[keys[-1]] = value


def read_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError("config", f"{path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path}: top level must be an object")
    return data


def load_config(path: str | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    data: dict = copy.deepcopy(read_config_file(path)) if path else {}
    for item in overrides:
        keys, value = parse_override(item)
        _set_path(data, keys, value)
    config = build(RunConfig, data)

    paths = config.paths
    if not paths.output_dir:
        paths = dataclasses.replace(paths, output_dir=env_str("FLOWTRACK_OUTPUT_DIR", DEFAULT_OUTPUT_DIR))
    threads = config.threads or max(1, env_int("FLOWTRACK_THREADS", 1))
    config = dataclasses.replace(config, paths=paths, threads=threads)
    config.validate()
    return config
