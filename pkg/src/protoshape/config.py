"""Experiment configuration: nested dataclasses loaded from YAML."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import yaml

from .data import DataConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass
class PretextConfig:
    dim: int = 128
    epochs: int = 30
    lr: float = 1e-3
    batch: int = 64


@dataclass
class PrototypeConfig:
    k: int = 4
    iterations: int = 20
    mode: str = "weighted_mean"   # weighted_mean | densest_cluster


@dataclass
class CompletionConfig:
    grid_resolution: int = 16
    levels: int = 3
    channels: List[int] = field(default_factory=lambda: [8, 16, 32])
    bottleneck_channels: int = 32
    n_sparse: int = 128
    rho: int = 4
    theta: float = 0.3
    hidden: int = 32
    offset_cells: float = 2.0
    sparse_mode: str = "center"
    occupancy_prior: float = 0.1
    epochs: int = 30
    batch: int = 8
    lr: float = 1e-4
    lambda_proj: float = 0.1
    existence_grad: float = 1.0
    val_views: int = 2


@dataclass
class LossConfig:
    spf_levels: int = 3
    use_prior: bool = True
    sampling: str = "cos"          # none | cos | l2
    use_proj: bool = True
    bce_orientation: str = "as_printed"
    render_points: int = 512
    height: int = 64
    width: int = 64
    n_views: int = 8
    eps: float = 1e-8
    difficulty_t: float = 0.25
    difficulty_k: float = 8.0


@dataclass
class EvalConfig:
    split: str = "test"
    f_threshold: float = 0.01
    oracle: bool = False   # score the ground truth against itself


@dataclass
class ExperimentConfig:
    data_root: str = "runs/data"
    out_dir: str = "runs/default"
    seed: int = 0
    workers: int = 0       # threads for per-sample work; 0 = one per CPU
    data: DataConfig = field(default_factory=DataConfig)
    pretext: PretextConfig = field(default_factory=PretextConfig)
    prototype: PrototypeConfig = field(default_factory=PrototypeConfig)
    completion: CompletionConfig = field(default_factory=CompletionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        try:
            self.data.validate()
        except ValueError as e:
            raise ConfigError(f"data: {e}") from e
        c, lo = self.completion, self.loss
        if self.prototype.mode not in ("weighted_mean", "densest_cluster"):
            raise ConfigError("prototype.mode must be weighted_mean or densest_cluster")
        if self.prototype.k < 1 or self.prototype.iterations < 0:
            raise ConfigError("prototype.k must be >= 1 and iterations >= 0")
        if lo.sampling not in ("none", "cos", "l2"):
            raise ConfigError(f"loss.sampling must be none, cos or l2, got {lo.sampling!r}")
        if lo.bce_orientation not in ("as_printed", "standard"):
            raise ConfigError("loss.bce_orientation must be as_printed or standard")
        if not 0 <= lo.spf_levels <= c.levels:
            raise ConfigError(f"loss.spf_levels must lie in [0, {c.levels}]")
        if c.epochs < 0 or c.batch < 1 or c.lr <= 0 or c.val_views < 1:
            raise ConfigError("completion epochs/batch/lr/val_views out of range")
        if c.val_views > self.data.views:
            raise ConfigError("completion.val_views exceeds data.views")
        if self.pretext.epochs < 0 or self.pretext.dim < 1:
            raise ConfigError("pretext epochs/dim out of range")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError("eval.split must be train, val or test")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        # thread count and output location do not change results, so they stay out
        tree = self.to_dict()
        tree.pop("workers")
        tree.pop("out_dir")
        return config_hash(tree)


def config_hash(tree: dict) -> str:
    """sha256 of the canonical (sorted, compact) JSON form, first 16 hex digits."""
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, tree, path: str):
    if not isinstance(tree, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(tree).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(tree) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in tree.items():
        current = getattr(defaults, name)
        where = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), {} if value is None else value, where)
        else:
            kwargs[name] = _coerce(current, value, where)
    return cls(**kwargs)


def _coerce(default, value, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot (1e-4) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        inner = default[0] if default else None
        return [_coerce(inner, v, where) if inner is not None else v for v in value]
    return value


def from_dict(tree: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, tree or {}, "")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read a YAML config; missing keys take their defaults."""
    p = Path(path)
    text = p.read_text()
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: not valid YAML ({e})") from e
    return from_dict(tree or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def override(cfg: ExperimentConfig, changes: dict) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-path overrides, e.g. ``{"loss.use_proj": False}``."""
    tree = cfg.to_dict()
    for dotted, value in changes.items():
        node = tree
        *head, last = dotted.split(".")
        for key in head:
            if not isinstance(node.get(key), dict):
                raise ConfigError(f"unknown key {dotted}")
            node = node[key]
        if last not in node:
            raise ConfigError(f"unknown key {dotted}")
        node[last] = value
    return from_dict(tree)
