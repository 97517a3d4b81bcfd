"""Experiment configuration files (YAML) with strict schema checks.

Example::

    dataset:
      name: mnist            # mnist | fashion | synthetic
      root: /data            # optional, defaults to $CIGN_DATA_ROOT
      train_limit: 1000      # optional, keep the first N training samples
    model:
      architecture: mnist    # mnist | fashion
      variant: cign_fed      # baseline | thin | cign_independent | cign_fed
    schedule:
      epochs: 100
      lambda_balance: 2.0
    seeds: [0, 1, 2]
    output_dir: runs/mnist_cign_fed
    precision: float32
    grid:
      - axis: lambda_f
        values: {start: 0.0, stop: 0.001, step: 5.0e-5}

Unknown keys at any level are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import torch
import yaml

from . import architectures, dataio
from .graph import TreeSpec
from .schedules import FASHION_SCHEDULE, MNIST_SCHEDULE, ScheduleSet


class ConfigError(ValueError):
    pass


DATASETS = ("mnist", "fashion", "synthetic")


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "mnist"
    root: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    synthetic_train: int = 1000
    synthetic_test: int = 500


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "mnist"
    variant: str = "cign_fed"


@dataclass(frozen=True)
class GridAxis:
    axis: str
    values: object


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleSet = field(default_factory=ScheduleSet)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/default"
    precision: str = "float32"
    grid: tuple[GridAxis, ...] = ()

    @property
    def label(self) -> str:
        return f"{self.model.architecture}/{self.model.variant}"

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    def build_tree(self) -> TreeSpec:
        return architectures.build(
            self.model.architecture,
            self.model.variant,
            dropout_f=self.schedule.dropout_f,
            dropout_h=self.schedule.dropout_h,
        )

    def with_schedule(self, schedule: ScheduleSet) -> "ExperimentConfig":
        return dataclasses.replace(self, schedule=schedule)

    def to_dict(self) -> dict:
        return {
            "dataset": dataclasses.asdict(self.dataset),
            "model": dataclasses.asdict(self.model),
            "schedule": self.schedule.to_dict(),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "precision": self.precision,
            "grid": [{"axis": g.axis, "values": g.values} for g in self.grid],
        }


def _strict(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return data


def default_schedule(architecture: str) -> ScheduleSet:
    return FASHION_SCHEDULE if architecture == "fashion" else MNIST_SCHEDULE


def from_dict(data: dict) -> ExperimentConfig:
    data = _strict(ExperimentConfig, data, "config")
    ds = DatasetConfig(**_strict(DatasetConfig, data.get("dataset"), "dataset"))
    if ds.name not in DATASETS:
        raise ConfigError(f"dataset.name must be one of {DATASETS}, got {ds.name!r}")
    model = ModelConfig(**_strict(ModelConfig, data.get("model"), "model"))
    if model.architecture not in architectures.ARCHITECTURES:
        raise ConfigError(f"model.architecture must be one of {architectures.ARCHITECTURES}")
    if model.variant not in architectures.VARIANTS:
        raise ConfigError(f"model.variant must be one of {architectures.VARIANTS}")
    sched_data = _strict(ScheduleSet, data.get("schedule"), "schedule")
    for key in ("lr_milestones", "rho_phases"):
        if key in sched_data:
            sched_data[key] = tuple(tuple(x) for x in sched_data[key])
    try:
        schedule = default_schedule(model.architecture).replace(**sched_data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"schedule: {exc}") from exc
    seeds = data.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    precision = data.get("precision", "float32")
    if precision not in ("float32", "float64"):
        raise ConfigError("precision must be float32 or float64")
    grid = []
    for i, g in enumerate(data.get("grid") or []):
        g = _strict(GridAxis, g, f"grid[{i}]")
        if "axis" not in g or "values" not in g:
            raise ConfigError(f"grid[{i}] needs 'axis' and 'values'")
        if g["axis"] not in ScheduleSet.__dataclass_fields__:
            raise ConfigError(f"grid[{i}].axis {g['axis']!r} is not a schedule field")
        grid.append(GridAxis(g["axis"], g["values"]))
    cfg = ExperimentConfig(
        dataset=ds,
        model=model,
        schedule=schedule,
        seeds=tuple(seeds),
        output_dir=str(data.get("output_dir", "runs/default")),
        precision=precision,
        grid=tuple(grid),
    )
    try:
        tree = cfg.build_tree()
        for node in tree.split_nodes:
            schedule.check_rho(node.k)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)


def load_datasets(cfg: ExperimentConfig) -> tuple[dataio.LabeledDataset, dataio.LabeledDataset]:
    ds = cfg.dataset
    if ds.name == "synthetic":
        train = dataio.make_synthetic(ds.synthetic_train, seed=1)
        test = dataio.make_synthetic(ds.synthetic_test, seed=2, split="test")
    else:
        directory = dataio.dataset_dir(ds.name, ds.root)
        train = dataio.load_split(directory, "train")
        test = dataio.load_split(directory, "test")
    if ds.train_limit:
        train = train.subset(ds.train_limit)
    if ds.test_limit:
        test = test.subset(ds.test_limit)
    return train, test
