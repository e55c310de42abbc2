"""Experiment configuration: JSON documents with an explicit schema version.

Every section is a dataclass; unknown keys are rejected by name and all
defaults are materialized by ``ExperimentConfig.to_dict`` so that reports
echo the fully resolved configuration.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .net import ActivationKind, LossKind
from .train import TrainConfig

SCHEMA_VERSION = 1
METHODS = ("alg1", "vanilla", "l2sp", "labelsmooth", "mixup", "alg1-noproj", "reweight-only", "project-only")
NOISE_SOURCES = ("uniform", "csv", "estimate")
DEFAULT_SIGMAS = [round(0.010 + 0.001 * j, 3) for j in range(11)]


@dataclass
class TaskConfig:
    generator: str = "blobs"
    k: int = 5
    d: int = 20
    n_train: int = 1000
    n_val: int = 250
    n_test: int = 250
    spread: float = 1.0
    center_scale: float = 0.75
    seed: int = 100
    source_perturbation: float = 0.5
    source_seed: int = 200
    source_n: int = 1000
    csv: str | None = None
    source_csv: str | None = None
    label_column: str = "label"

    def validate(self):
        if self.generator not in ("blobs", "csv"):
            raise ConfigError(f"task.generator must be 'blobs' or 'csv', got {self.generator!r}")
        if self.generator == "csv" and not (self.csv and self.source_csv):
            raise ConfigError("task.csv and task.source_csv are required for a csv task")
        if self.k < 2 or self.d < 1:
            raise ConfigError("task needs k >= 2 and d >= 1")
        if min(self.n_train, self.n_val, self.n_test, self.source_n) < 1:
            raise ConfigError("task sizes must be positive")
        if self.spread < 0 or self.center_scale < 0 or self.source_perturbation < 0:
            raise ConfigError("task spread, center_scale and source_perturbation must be nonnegative")


@dataclass
class ArchitectureConfig:
    dims: list = field(default_factory=lambda: [20, 32, 32, 5])
    hidden: str = "tanh"
    output: str = "identity"
    loss: str = "ce"

    def validate(self):
        if len(self.dims) < 2 or any(int(d) < 1 for d in self.dims):
            raise ConfigError("architecture.dims needs at least two positive sizes")
        for key in ("hidden", "output"):
            try:
                ActivationKind(getattr(self, key))
            except ValueError as exc:
                raise ConfigError(f"architecture.{key}: unknown activation {getattr(self, key)!r}") from exc
        try:
            LossKind(self.loss)
        except ValueError as exc:
            raise ConfigError(f"architecture.loss: unknown loss {self.loss!r}") from exc

    def activations(self) -> list[str]:
        return [self.hidden] * (len(self.dims) - 2) + [self.output]


@dataclass
class NoiseConfig:
    source: str = "uniform"
    rho: float = 0.4
    csv: str | None = None
    rates: list = field(default_factory=lambda: [0.4, 0.6])

    def validate(self):
        if self.source not in NOISE_SOURCES:
            raise ConfigError(f"noise.source must be one of {NOISE_SOURCES}, got {self.source!r}")
        if self.source == "csv" and not self.csv:
            raise ConfigError("noise.csv is required when noise.source is 'csv'")
        for r in [self.rho, *self.rates]:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"noise rates must lie in [0, 1], got {r}")


@dataclass
class TrainerConfig:
    method: str = "alg1"
    methods: list = field(default_factory=lambda: ["alg1", "vanilla"])
    early_stopping: list = field(default_factory=lambda: ["vanilla"])
    l2sp: float = 0.01
    label_smoothing: float = 0.1
    mixup: float = 0.2

    def validate(self):
        for m in [self.method, *self.methods, *self.early_stopping]:
            if m not in METHODS:
                raise ConfigError(f"unknown trainer method {m!r}; choose from {METHODS}")
        if self.l2sp < 0:
            raise ConfigError("trainer.l2sp must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("trainer.label_smoothing must lie in [0, 1)")
        if not self.mixup > 0:
            raise ConfigError("trainer.mixup must be positive")


@dataclass
class MeasureConfig:
    enabled: bool = True
    eval_cap: int = 256
    C: float | str = 2.0
    loss: str = "sqerr_prob"
    kl_sigma: float = 0.1
    method: str = "factored"
    sigmas: list = field(default_factory=lambda: list(DEFAULT_SIGMAS))
    draws: int = 500
    half: bool = False
    heatmap_tau: float = 1e-4
    heatmap_per_class: int = 200

    def validate(self):
        if self.eval_cap < 1:
            raise ConfigError("measure.eval_cap must be >= 1")
        if isinstance(self.C, str):
            if self.C != "empirical":
                raise ConfigError("measure.C must be positive or 'empirical'")
        elif not self.C > 0:
            raise ConfigError("measure.C must be positive or 'empirical'")
        try:
            LossKind(self.loss)
        except ValueError as exc:
            raise ConfigError(f"measure.loss: unknown loss {self.loss!r}") from exc
        if self.method not in ("factored", "dense"):
            raise ConfigError("measure.method must be 'factored' or 'dense'")
        if not self.kl_sigma > 0:
            raise ConfigError("measure.kl_sigma must be positive")
        if not self.sigmas or min(self.sigmas) <= 0:
            raise ConfigError("measure.sigmas must be a nonempty list of positive values")
        if self.draws < 2:
            raise ConfigError("measure.draws must be >= 2")
        if not self.heatmap_tau > 0 or self.heatmap_per_class < 1:
            raise ConfigError("measure.heatmap_tau must be positive and heatmap_per_class >= 1")


def _pretrain_default() -> TrainConfig:
    return TrainConfig(epochs=30, lr=1e-2)


def _finetune_default() -> TrainConfig:
    return TrainConfig(epochs=30, lr=1e-2)


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    task: TaskConfig = field(default_factory=TaskConfig)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    pretrain: TrainConfig = field(default_factory=_pretrain_default)
    train: TrainConfig = field(default_factory=_finetune_default)
    measure: MeasureConfig = field(default_factory=MeasureConfig)
    seeds: list = field(default_factory=lambda: list(range(10)))
    checkpoint: str | None = None
    output: str = "out"

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        for part in (self.task, self.architecture, self.noise, self.trainer, self.measure):
            part.validate()
        for part in (self.pretrain, self.train):
            part.validate()
        dims = self.architecture.dims
        if dims[0] != self.task.d or dims[-1] != self.task.k:
            raise ConfigError(f"architecture.dims {dims} does not match task d={self.task.d}, k={self.task.k}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a nonempty list without duplicates")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "task": TaskConfig,
    "architecture": ArchitectureConfig,
    "noise": NoiseConfig,
    "trainer": TrainerConfig,
    "pretrain": TrainConfig,
    "train": TrainConfig,
    "measure": MeasureConfig,
}


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            raise ConfigError(f"unknown config key {where}.{key}" if where else f"unknown config key {key}")
    base = cls() if cls is not TrainConfig else None
    try:
        if cls is TrainConfig:
            defaults = _finetune_default() if where == "train" else _pretrain_default()
            return TrainConfig(**{**dataclasses.asdict(defaults), **doc})
        return dataclasses.replace(base, **doc)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "schema_version" not in doc:
        raise ConfigError("config is missing schema_version")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in doc:
        if key not in top:
            raise ConfigError(f"unknown config key {key}")
    kwargs = {}
    for key, value in doc.items():
        kwargs[key] = _build(_SECTIONS[key], value, key) if key in _SECTIONS else value
    return ExperimentConfig(**kwargs).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from exc
    return config_from_dict(doc)
