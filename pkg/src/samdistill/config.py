"""Experiment configuration: nested dataclasses, YAML files and dotted overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, get_origin, get_type_hints

import yaml

from .distill import PerceptualConfig
from .models import BaselineIRConfig, RefinerConfig
from .segmenter import SegmenterConfig


class ConfigError(ValueError):
    """Bad config key or value."""


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.kind != "adam":
            raise ValueError("only the adam optimizer is supported")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class TrainConfig:
    manifest: str | None = None
    val_manifest: str | None = None
    baseline: BaselineIRConfig = field(default_factory=BaselineIRConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    lambda1: float = 0.005
    lambda2: float = 200.0
    relation_vectorize: str = "pool"
    sgr_distance: str = "squared"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 8
    steps: int = 2000
    epochs: int | None = None
    seed: int = 0
    dtype: str = "float32"
    detach_cascade_input: bool = True
    train_teacher: bool = True
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0
    log_every: int = 50
    eval_every: int = 0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.relation_vectorize not in ("flatten", "pool"):
            raise ValueError("relation_vectorize must be 'flatten' or 'pool'")
        if self.sgr_distance not in ("abs", "squared"):
            raise ValueError("sgr_distance must be 'abs' or 'squared'")
        if not self.train_teacher and (self.lambda1 > 0 or self.lambda2 > 0):
            raise ValueError("train_teacher=false requires lambda1 = lambda2 = 0")
        if self.refiner.mask_channels != self.segmenter.n_max:
            raise ValueError(
                f"refiner.mask_channels ({self.refiner.mask_channels}) must equal segmenter.n_max ({self.segmenter.n_max})"
            )

    @property
    def label(self) -> str:
        return "baseline-only" if self.lambda1 == 0 and self.lambda2 == 0 else "distilled"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        return from_dict(cls, d or {})


def valid_keys(cls, prefix: str = "") -> list[str]:
    out = []
    hints = get_type_hints(cls)
    for f in fields(cls):
        sub = _dataclass_type(hints[f.name])
        if sub is not None:
            out += valid_keys(sub, f"{prefix}{f.name}.")
        else:
            out.append(prefix + f.name)
    return out


def dict_keys(cls, prefix: str = "") -> list[str]:
    """Dotted names of free-form mapping fields; overrides may reach inside them."""
    out = []
    hints = get_type_hints(cls)
    for f in fields(cls):
        tp = hints[f.name]
        sub = _dataclass_type(tp)
        if sub is not None:
            out += dict_keys(sub, f"{prefix}{f.name}.")
        elif tp is dict or get_origin(tp) is dict:
            out.append(prefix + f.name)
    return out


def _dataclass_type(tp):
    return tp if isinstance(tp, type) and is_dataclass(tp) else None


def from_dict(cls, d: dict, prefix: str = ""):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(
            f"unknown config keys {[prefix + k for k in unknown]}; valid keys: {', '.join(valid_keys(cls, prefix))}"
        )
    kwargs = {}
    for name, value in d.items():
        sub = _dataclass_type(hints[name])
        kwargs[name] = from_dict(sub, value, f"{prefix}{name}.") if sub is not None else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw) if raw.strip() else None


def apply_overrides(d: dict, overrides: list[str], cls=TrainConfig) -> dict:
    """Apply ``a.b=value`` overrides to a plain config dict (values parsed as YAML scalars)."""
    keys = set(valid_keys(cls))
    open_keys = dict_keys(cls)
    d = yaml.safe_load(yaml.safe_dump(d))  # deep copy
    for text in overrides:
        path, value = parse_override(text)
        dotted = ".".join(path)
        if dotted not in keys and not any(dotted.startswith(k + ".") for k in open_keys):
            raise ConfigError(f"unknown override key {dotted!r}; valid keys: {', '.join(sorted(keys))}")
        node = d
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return d


def load_config(path=None, overrides: list[str] | None = None, cls=TrainConfig):
    d = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        d = yaml.safe_load(p.read_text()) or {}
    d = apply_overrides(d, overrides or [], cls)
    return from_dict(cls, d)


def save_config(cfg, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=False))
    return path
