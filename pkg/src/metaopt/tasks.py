"""Task bindings: a dataset, an inner architecture and an outer corruption distribution."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corruptions import IDENTITY, CorruptionSpec, sample_train_corruption
from .dataset import DatasetSplits, load_cifar10, make_toy_dataset
from .model import ArchConfig

TASK_NAMES = ("toy", "gaussian", "corruption")
OUTER_SIGMA = 0.05


@dataclass(frozen=True)
class FixedSpec:
    """Outer-objective sampler that always returns the same spec and draws nothing."""

    spec: CorruptionSpec = IDENTITY

    def __call__(self, rng: np.random.Generator) -> CorruptionSpec:
        return self.spec

    def describe(self) -> str:
        return self.spec.label()


@dataclass(frozen=True)
class TrainCorruptions:
    """Uniform over the seven outer-train kinds at severities 1-3."""

    def __call__(self, rng: np.random.Generator) -> CorruptionSpec:
        return sample_train_corruption(rng)

    def describe(self) -> str:
        return "train_corruptions"


@dataclass
class Task:
    name: str
    data: DatasetSplits = field(repr=False)
    arch: ArchConfig
    outer_spec: FixedSpec | TrainCorruptions
    batch_size: int = 64
    valid_batch_size: int = 64

    @property
    def target_spec(self) -> CorruptionSpec:
        """A single representative spec of the outer distribution (used for grid targets)."""
        if isinstance(self.outer_spec, FixedSpec):
            return self.outer_spec.spec
        raise ValueError("the corruption task has no single target spec")


def toy_task(seed: int = 0, n_per_class: int = 1000, batch_size: int = 16, valid_batch_size: int = 64) -> Task:
    data = make_toy_dataset(n_per_class, seed)
    return Task(
        "toy",
        data,
        ArchConfig.toy(),
        FixedSpec(CorruptionSpec.gaussian(OUTER_SIGMA)),
        batch_size=batch_size,
        valid_batch_size=valid_batch_size,
    )


def cifar_task(kind: str, data_dir, batch_size: int = 64, valid_batch_size: int = 64) -> Task:
    data = load_cifar10(data_dir)
    sampler = FixedSpec(CorruptionSpec.gaussian(OUTER_SIGMA)) if kind == "gaussian" else TrainCorruptions()
    return Task(kind, data, ArchConfig(), sampler, batch_size=batch_size, valid_batch_size=valid_batch_size)


def make_task(name: str, data_dir=None, **kwargs) -> Task:
    if name == "toy":
        return toy_task(**kwargs)
    if name in ("gaussian", "corruption"):
        if data_dir is None:
            raise ValueError(f"task {name!r} needs CIFAR-10: pass --data-dir or set METAOPT_DATA_DIR")
        return cifar_task(name, data_dir, **kwargs)
    raise ValueError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
