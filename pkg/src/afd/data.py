"""Datasets: CIFAR-10 binary reader/writer, seeded synthetic blobs, batching."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from afd.errors import ConfigError, DataError, FormatError, InputError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


@dataclass
class Dataset:
    images: np.ndarray  # float32 [n, c, h, w] in [0, 1]
    labels: np.ndarray  # int64 [n]
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [n, c, h, w], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("labels outside [0, num_classes)")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


def load_cifar10_binary(paths: str | Path | Sequence[str | Path]) -> Dataset:
    """Read one or more CIFAR-10 ``data_batch_*.bin`` style files."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % CIFAR_RECORD:
            raise FormatError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD} bytes")
        recs = raw.reshape(-1, CIFAR_RECORD)
        lab = recs[:, 0]
        if lab.size and lab.max() > 9:
            bad = int(np.argmax(lab > 9))
            raise FormatError(f"{path}: record {bad} has label byte {lab[bad]} (> 9)")
        labels.append(lab.astype(np.int64))
        images.append(recs[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float32) / np.float32(255))
    if not labels:
        raise InputError("no CIFAR-10 files given")
    return Dataset(np.concatenate(images), np.concatenate(labels), 10)


def cifar10_bytes(ds: Dataset) -> bytes:
    """Serialize a CIFAR-shaped dataset back to the binary record layout."""
    if ds.input_shape != CIFAR_SHAPE:
        raise DataError(f"CIFAR-10 records need images of shape {CIFAR_SHAPE}, got {ds.input_shape}")
    pix = np.rint(ds.images.reshape(len(ds), -1) * 255).astype(np.uint8)
    return np.concatenate([ds.labels.astype(np.uint8)[:, None], pix], axis=1).tobytes()


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    samples_per_class: int = 1000
    input_shape: tuple[int, int, int] = (3, 8, 8)
    separation: float = 0.15
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.separation <= 0:
            raise ConfigError("separation must be positive")
        if self.noise < 0:
            raise ConfigError("noise scale must be non-negative")
        if self.num_classes < 2 or self.samples_per_class < 1:
            raise ConfigError("need at least 2 classes and 1 sample per class")


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    """Class-conditional Gaussian blobs around per-class template images.

    Each class template is ``0.5 + separation * s`` with ``s`` a random sign
    pattern, so templates differ by about ``2 * separation`` on half the pixels.
    Samples add isotropic Gaussian noise and are clipped to [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    d = int(np.prod(spec.input_shape))
    signs = rng.choice(np.array([-1.0, 1.0]), size=(spec.num_classes, d))
    centers = 0.5 + spec.separation * signs
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    noise = rng.standard_normal((labels.size, d)) * spec.noise
    x = np.clip(centers[labels] + noise, 0.0, 1.0).astype(np.float32)
    perm = rng.permutation(labels.size)
    return Dataset(x[perm].reshape(-1, *spec.input_shape), labels[perm], spec.num_classes)


def batches(ds: Dataset, batch_size: int, shuffle_seed: int | None = None
            ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(images, labels, indices)``; the last batch may be partial.

    ``shuffle_seed=None`` keeps dataset order.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(ds)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx], idx
