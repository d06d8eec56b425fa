"""Experiment configuration: JSON-backed dataclasses with validation and
dotted-path overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .diffusion import TrainConfig
from .model import ModelConfig
from .sampler import DEFAULT_WEIGHT_GRID, SamplerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSetConfig:
    height: int = 32
    width: int = 32
    n_directions: int = 60
    bvalue: float = 1000.0
    noise_sigma: float = 0.02
    n_train: int = 128
    n_val: int = 8
    n_test: int = 16
    seed: int = 0
    scheme_seed: int = 7


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a pipeline run needs; every random stage has its own seed."""

    phantom: PhantomSetConfig = field(default_factory=PhantomSetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    n_input_directions: int = 6
    lambda_obs: float = 0.0
    lambda_coef: float = 0.0
    weight_grid: tuple = (DEFAULT_WEIGHT_GRID, DEFAULT_WEIGHT_GRID)
    sample_seed: int = 100

    def __post_init__(self):
        if self.n_input_directions >= self.phantom.n_directions:
            raise ConfigError(
                f"n_input_directions {self.n_input_directions} must be below the "
                f"target direction count {self.phantom.n_directions} (scale r > 1)"
            )
        if self.n_input_directions < 1:
            raise ConfigError("n_input_directions must be positive")

    @property
    def asr_scale(self) -> float:
        return self.phantom.n_directions / self.n_input_directions


def _to_jsonable(obj):
    if is_dataclass(obj):
        return {k: _to_jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def experiment_to_dict(config: ExperimentConfig) -> dict:
    return _to_jsonable(config)


def experiment_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    try:
        phantom = PhantomSetConfig(**data.pop("phantom", {}))
        model = ModelConfig(**data.pop("model", {}))
        train = TrainConfig(**data.pop("train", {}))
        sampler = SamplerConfig(**data.pop("sampler", {}))
        grid = data.pop("weight_grid", None)
        kwargs = dict(phantom=phantom, model=model, train=train, sampler=sampler)
        if grid is not None:
            kwargs["weight_grid"] = (tuple(grid[0]), tuple(grid[1]))
        kwargs.update(data)
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad experiment config: {exc}") from None


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    return experiment_from_dict(data)


def save_experiment(path, config: ExperimentConfig):
    Path(path).write_text(json.dumps(experiment_to_dict(config), indent=1))


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply `a.b.c=value` overrides to a nested config dict (JSON values)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings allowed
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} crosses a leaf")
        node[keys[-1]] = value
    return data
