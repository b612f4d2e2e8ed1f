"""Training configuration and the TOML experiment file."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ValidationError

GRAPH_SCOPES = ("cumulative", "current_interval")
KD_SCOPES = ("previous", "cumulative")

# lambda1 sweep used for the ablation table
LAMBDA1_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1e-3
    lr_base: float = 5e-4
    lr_incremental: float = 1e-4
    dim: int = 64
    n_layers: int = 3
    batch_size: int = 2048
    max_epochs: int = 200
    patience: int = 10
    seed: int = 2024
    negatives_per_positive: int = 1
    graph_scope: str = "cumulative"
    kd_scope: str = "previous"
    k: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.lambda1 < 0 or self.lambda2 < 0:
            problems.append("lambda1 and lambda2 must be >= 0")
        if self.lr_base <= 0 or self.lr_incremental <= 0:
            problems.append("learning rates must be > 0")
        if self.dim < 1:
            problems.append("dim must be >= 1")
        if self.n_layers < 0:
            problems.append("n_layers must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.max_epochs < 0:
            problems.append("max_epochs must be >= 0")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.negatives_per_positive < 1:
            problems.append("negatives_per_positive must be >= 1")
        if self.graph_scope not in GRAPH_SCOPES:
            problems.append(f"graph_scope must be one of {GRAPH_SCOPES}")
        if self.kd_scope not in KD_SCOPES:
            problems.append(f"kd_scope must be one of {KD_SCOPES}")
        if self.k < 1:
            problems.append("k must be >= 1")
        if problems:
            raise ValidationError("; ".join(problems))

    @property
    def cumulative_graph(self) -> bool:
        return self.graph_scope == "cumulative"

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExperimentConfig:
    """Everything an ``experiment`` run needs: paths, split and training knobs."""

    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str | None = None
    workdir: str = "work"
    min_count: int = 10
    base_fraction: float = 0.6
    n_incremental: int = 4
    lambda1_grid: list[float] = field(default_factory=lambda: [1.0])

    def as_dict(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != "train"}
        d.update(self.train.as_dict())
        return d


_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
_TOP_KEYS = {f.name for f in fields(ExperimentConfig)} - {"train"}


def _coerce(name, value, kind):
    if kind in ("float", float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if kind in ("int", int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{name}: expected an integer, got {value!r}")
        return value
    if kind in ("str", str):
        if not isinstance(value, str):
            raise ValidationError(f"{name}: expected a string, got {value!r}")
        return value
    return value


def config_from_mapping(raw: dict) -> ExperimentConfig:
    """Build a config from a flat key/value mapping; unknown keys are rejected."""
    unknown = sorted(set(raw) - set(_TRAIN_KEYS) - _TOP_KEYS)
    if unknown:
        raise ValidationError(f"unknown config key(s): {', '.join(unknown)}")
    train_kw = {k: _coerce(k, raw[k], _TRAIN_KEYS[k].type) for k in raw if k in _TRAIN_KEYS}
    top = {}
    for k in _TOP_KEYS & set(raw):
        v = raw[k]
        if k == "lambda1_grid":
            if not isinstance(v, list) or not v:
                raise ValidationError("lambda1_grid must be a non-empty list")
            v = [_coerce(k, x, float) for x in v]
            if any(x < 0 for x in v):
                raise ValidationError("lambda1_grid values must be >= 0")
        elif k in ("min_count", "n_incremental"):
            v = _coerce(k, v, int)
        elif k == "base_fraction":
            v = _coerce(k, v, float)
        else:
            v = _coerce(k, v, str)
        top[k] = v
    return ExperimentConfig(train=TrainConfig(**train_kw), **top)


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
    return config_from_mapping(raw)
