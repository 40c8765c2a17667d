"""Run configuration: every module config plus paths and the seed, stored as JSON."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .cost import CostConfig
from .dynamics import VehicleParams
from .encoder import EncoderConfig
from .planner import PlannerConfig

MODES = ("vf", "cf", "eula", "il")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 2
    stage2_epochs: int = 18
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    augment_epsilon: float = 0.1
    augment_prob: float = 0.5
    stage2_iterations: int = 3
    stage1_only: bool = False

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.augment_epsilon < 0 or not 0 <= self.augment_prob <= 1:
            raise ConfigError("augmentation settings out of range")


@dataclass(frozen=True)
class RunConfig:
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mode: str = "vf"
    train_corpus: str | None = None
    eval_corpus: str | None = None
    seed: int = 0
    out_dir: str = "runs"
    closed_loop_seconds: float = 10.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if abs(self.vehicle.dt - 0.1) > 1e-12 and self.vehicle.dt <= 0:
            raise ConfigError("vehicle dt must be positive")

    @property
    def field_mode(self) -> str:
        return "cf" if self.mode == "cf" else "vf"

    def validate_paths(self) -> None:
        for name in ("train_corpus", "eval_corpus"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{name} path does not exist: {p}")

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")


def _to_jsonable(x):
    if isinstance(x, dict):
        return {k: _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    return x


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_NESTED = {
    (RunConfig, "vehicle"): VehicleParams,
    (RunConfig, "encoder"): EncoderConfig,
    (RunConfig, "planner"): PlannerConfig,
    (RunConfig, "cost"): CostConfig,
    (RunConfig, "train"): TrainConfig,
}


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return RunConfig.from_dict(d)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
