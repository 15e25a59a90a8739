"""Experiment configuration, readable from flat ``key = value`` files with sections.

Example::

    [experiment]
    method = adc
    T = 5
    seeds = 1993, 0, 1, 2, 3

    [data]
    kind = synthetic
    n_classes = 20

    [train]
    lam = 10
    temperature = 2

    [attack]
    iterations = 3
    m = 100

Sections: experiment, data, network, train, attack, sdc, nme. Unknown keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .train import TrainConfig

METHODS = ("finetune", "lwf", "ncm", "sdc", "adc", "nme")
HEAD_METHODS = ("finetune", "lwf")
DEFAULT_SEEDS = (1993, 0, 1, 2, 3)


@dataclass
class DataSpec:
    kind: str = "synthetic"
    # synthetic clusters
    n_classes: int = 20
    dim: int = 32
    samples_per_class: int = 100
    test_samples_per_class: int = 50
    cluster_spread: float = 1.0
    separation: float | None = None
    seed: int | None = None  # None: reuse the run seed
    # image files
    path: str | None = None
    format: str = "idx"
    labels_path: str | None = None
    test_path: str | None = None
    test_labels_path: str | None = None
    test_fraction: float = 0.2

    @property
    def name(self) -> str:
        if self.kind == "synthetic":
            return f"synthetic{self.n_classes}x{self.dim}"
        return Path(self.path or "images").stem


@dataclass
class NetSpec:
    arch: str = "auto"  # mlp | conv | auto (mlp for synthetic, conv for images)
    hidden: tuple[int, ...] = (64,)
    feature_dim: int | None = None  # None: 32 for mlp, 64 for conv
    conv_channels: int = 8
    kernel: int = 3
    stride: int = 2


@dataclass
class ExperimentConfig:
    method: str = "adc"
    T: int = 5
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    data: DataSpec = field(default_factory=DataSpec)
    net: NetSpec = field(default_factory=NetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    alpha: float | None = None  # None: 0.1 x value range (synthetic) or 25/255 (images)
    iterations: int = 3
    m: int = 100
    sdc_sigma: float = 0.3
    exemplars: int | None = None  # per class, nme only; 0 means "all"
    exemplar_policy: str = "herding"
    oracle_eval: bool = False
    out_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if (self.method == "nme") != (self.exemplars is not None):
            raise ConfigError("exemplars must be set exactly when method = nme")
        if self.exemplars is not None and self.exemplars < 0:
            raise ConfigError("exemplars must be >= 0 (0 = keep everything)")
        if self.iterations < 0 or self.m < 1 or (self.alpha is not None and self.alpha <= 0):
            raise ConfigError("need iterations >= 0, m >= 1 and alpha > 0")
        if self.sdc_sigma <= 0:
            raise ConfigError("sdc_sigma must be positive")
        if self.data.kind not in ("synthetic", "file"):
            raise ConfigError(f"unknown data kind {self.data.kind!r}")
        if self.data.kind == "file" and not self.data.path:
            raise ConfigError("data.path required for file datasets")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# flat-file I/O

_SECTIONS = {
    "experiment": (None, ["method", "T", "seeds", "oracle_eval", "out_dir", "workers"]),
    "data": ("data", None),
    "network": ("net", None),
    "train": ("train", None),
    "attack": (None, ["alpha", "iterations", "m"]),
    "sdc": (None, ["sdc_sigma"]),
    "nme": (None, ["exemplars", "exemplar_policy"]),
}
_KEY_ALIASES = {"sigma": "sdc_sigma", "policy": "exemplar_policy", "lambda": "lam"}


def _parse_value(raw: str, hint: str) -> Any:
    raw = raw.strip()
    if raw.lower() in ("none", "") and "None" in hint:
        return None
    if "tuple" in hint:
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if "bool" in hint:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if "int" in hint and "float" not in hint:
        return int(raw)
    if "float" in hint:
        return float(raw)
    return raw


def _fields(obj) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(obj)}


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep "T" distinct from "t"
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {"data": {}, "net": {}, "train": {}}
    proto = {"data": DataSpec(), "net": NetSpec(), "train": TrainConfig()}
    top_fields = _fields(ExperimentConfig)
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target, allowed = _SECTIONS[section]
        for key, raw in cp.items(section):
            key = _KEY_ALIASES.get(key, key)
            try:
                if target is None:
                    if key not in allowed:
                        raise ConfigError(f"unknown key {key!r} in [{section}]")
                    top[key] = _parse_value(raw, str(top_fields[key].type))
                else:
                    fs = _fields(proto[target])
                    if key not in fs:
                        raise ConfigError(f"unknown key {key!r} in [{section}]")
                    nested[target][key] = _parse_value(raw, str(fs[key].type))
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    return ExperimentConfig(data=DataSpec(**nested["data"]), net=NetSpec(**nested["net"]),
                            train=TrainConfig(**nested["train"]), **top)


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def _fmt(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, (target, keys) in _SECTIONS.items():
        lines.append(f"[{section}]")
        if target is None:
            pairs = [(k, getattr(cfg, k)) for k in keys]
        else:
            obj = getattr(cfg, target)
            pairs = [(f.name, getattr(obj, f.name)) for f in dataclasses.fields(obj)]
        lines += [f"{k} = {_fmt(v)}" for k, v in pairs]
        lines.append("")
    return "\n".join(lines)


def config_snapshot(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
