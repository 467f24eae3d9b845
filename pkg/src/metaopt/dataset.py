"""CIFAR-10 binary ingestion, minibatch sampling, and a synthetic toy task."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
IMAGE_BYTES = 3072
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_VALID_SIZE = 5000
DATA_DIR_ENV = "METAOPT_DATA_DIR"


class IngestionError(ValueError):
    """Malformed or missing dataset files."""


@dataclass(frozen=True)
class ImageBatch:
    images: np.ndarray  # (B, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (B,) int64

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class Split:
    """An immutable image/label store.

    ``images`` may be stored as uint8 with ``scale = 1/255`` to keep CIFAR in
    memory; :meth:`take` always returns float64 in [0, 1].
    """

    images: np.ndarray
    labels: np.ndarray
    scale: float = 1.0

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index) -> ImageBatch:
        images = self.images[index].astype(np.float64)
        if self.scale != 1.0:
            images *= self.scale
        return ImageBatch(images, self.labels[index].astype(np.int64))

    def full(self) -> ImageBatch:
        return self.take(slice(None))


@dataclass(frozen=True)
class DatasetSplits:
    train: Split
    valid: Split
    test: Split
    num_classes: int
    height: int
    width: int
    templates: np.ndarray | None = field(default=None, repr=False)


def _read_batch_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise IngestionError(f"missing CIFAR-10 file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    n_full, rem = divmod(raw.size, RECORD_BYTES)
    if rem:
        offset = n_full * RECORD_BYTES
        raise IngestionError(
            f"{path}: truncated record at byte offset {offset} ({rem} of {RECORD_BYTES} bytes present)"
        )
    records = raw.reshape(n_full, RECORD_BYTES)
    labels = records[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        offset = int(bad[0]) * RECORD_BYTES
        raise IngestionError(f"{path}: label byte {labels[bad[0]]} > 9 at byte offset {offset}")
    images = records[:, 1:].reshape(n_full, 3, 32, 32)
    return images, labels.astype(np.int64)


def resolve_data_dir(flag: str | os.PathLike | None = None) -> Path | None:
    """``--data-dir`` wins over ``METAOPT_DATA_DIR``."""
    if flag:
        return Path(flag)
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else None


def load_cifar10(directory: str | os.PathLike) -> DatasetSplits:
    """Load the binary CIFAR-10 distribution.

    The validation split is the final 5,000 records of the concatenated
    training batches; pixels are kept as uint8 and scaled to [0, 1] on access.
    """
    directory = Path(directory)
    parts = [_read_batch_file(directory / name) for name in CIFAR_TRAIN_FILES]
    train_images = np.concatenate([p[0] for p in parts])
    train_labels = np.concatenate([p[1] for p in parts])
    test_images, test_labels = _read_batch_file(directory / CIFAR_TEST_FILE)
    if len(train_labels) <= CIFAR_VALID_SIZE:
        raise IngestionError(f"{directory}: only {len(train_labels)} training records")
    cut = len(train_labels) - CIFAR_VALID_SIZE
    scale = 1.0 / 255.0
    return DatasetSplits(
        train=Split(train_images[:cut], train_labels[:cut], scale),
        valid=Split(train_images[cut:], train_labels[cut:], scale),
        test=Split(test_images, test_labels, scale),
        num_classes=10,
        height=32,
        width=32,
    )


def sample_indices(n: int, batch_size: int, rng: np.random.Generator, size: tuple[int, ...] = ()) -> np.ndarray:
    if n == 0:
        raise ValueError("cannot sample from an empty split")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return rng.integers(0, n, size=size + (batch_size,))


def sample_minibatch(split: Split, batch_size: int, rng: np.random.Generator) -> ImageBatch:
    """Uniform sample with replacement."""
    return split.take(sample_indices(len(split), batch_size, rng))


# -- toy task -------------------------------------------------------------------

TOY_CLASSES = 4
TOY_SIZE = 8


def _smooth_fields(rng: np.random.Generator, count: int, size: int, n_waves: int = 3) -> np.ndarray:
    """Random low-frequency fields of shape (count, 3, size, size), roughly unit RMS."""
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    fields = np.zeros((count, 3, size, size))
    for _ in range(n_waves):
        fy = rng.uniform(-1.5, 1.5, size=(count, 3, 1, 1))
        fx = rng.uniform(-1.5, 1.5, size=(count, 3, 1, 1))
        phase = rng.uniform(0, 2 * np.pi, size=(count, 3, 1, 1))
        fields += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    fields -= fields.mean(axis=(1, 2, 3), keepdims=True)
    fields /= np.sqrt((fields**2).mean(axis=(1, 2, 3), keepdims=True)) + 1e-12
    return fields


def make_toy_dataset(
    n_per_class: int = 1000,
    rng: np.random.Generator | int | None = 0,
    *,
    size: int = TOY_SIZE,
    signal: float = 0.04,
    n_distractors: int = 6,
    distractor_scale: float = 0.08,
    pixel_noise: float = 0.03,
) -> DatasetSplits:
    """Four classes of 8x8x3 images: a class template plus nuisance variation.

    Each image is ``0.5 + signal * amp * T_k + sum_j c_j D_j + shift + noise``
    clipped to [0, 1], where ``T_k`` is the class template, ``D_j`` are shared
    smooth distractor fields with random coefficients, ``shift`` a per-image
    brightness offset and ``noise`` i.i.d. per-pixel jitter. Splits are
    80/10/10 per class.
    """
    if n_per_class < 10:
        raise ValueError("n_per_class must be >= 10")
    rng = np.random.default_rng(rng)
    templates = _smooth_fields(rng, TOY_CLASSES, size)
    distractors = _smooth_fields(rng, n_distractors, size)
    n = n_per_class * TOY_CLASSES
    labels = np.repeat(np.arange(TOY_CLASSES), n_per_class)
    amp = rng.uniform(0.6, 1.4, size=(n, 1, 1, 1))
    coef = rng.normal(0.0, distractor_scale, size=(n, n_distractors))
    shift = rng.normal(0.0, 0.05, size=(n, 1, 1, 1))
    images = (
        0.5
        + signal * amp * templates[labels]
        + np.einsum("nd,dchw->nchw", coef, distractors)
        + shift
        + rng.normal(0.0, pixel_noise, size=(n, 3, size, size))
    )
    images = np.clip(images, 0.0, 1.0)

    n_train = int(round(0.8 * n_per_class))
    n_valid = int(round(0.1 * n_per_class))
    splits = {"train": [], "valid": [], "test": []}
    for k in range(TOY_CLASSES):
        idx = rng.permutation(np.flatnonzero(labels == k))
        splits["train"].append(idx[:n_train])
        splits["valid"].append(idx[n_train : n_train + n_valid])
        splits["test"].append(idx[n_train + n_valid :])
    out = {}
    for name, parts in splits.items():
        idx = np.sort(np.concatenate(parts))
        out[name] = Split(images[idx], labels[idx])
    return DatasetSplits(
        train=out["train"],
        valid=out["valid"],
        test=out["test"],
        num_classes=TOY_CLASSES,
        height=size,
        width=size,
        templates=0.5 + signal * templates,
    )
