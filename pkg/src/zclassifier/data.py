"""In-distribution and OOD data sources.

CIFAR-10 is read from the canonical binary batches. The synthetic sources
(Gaussian blobs, Gaussian/uniform noise, shifted blobs) stand in for the
CIFAR-10 / SVHN / noise quartet at desk scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numcore import Rng, rand_uniform

DOMAINS = ("ind", "ood_natural", "ood_gaussian", "ood_uniform")

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class DataFormatError(ValueError):
    pass


@dataclass
class NormStats:
    """Per-channel mean/std. Flat inputs treat each feature as a channel."""

    mean: np.ndarray
    std: np.ndarray

    @staticmethod
    def _axes(inputs: np.ndarray) -> tuple:
        return (0,) if inputs.ndim == 2 else (0,) + tuple(range(2, inputs.ndim))

    @classmethod
    def fit(cls, inputs: np.ndarray) -> "NormStats":
        axes = cls._axes(inputs)
        mean = inputs.mean(axis=axes)
        std = inputs.std(axis=axes)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def apply(self, inputs: np.ndarray) -> np.ndarray:
        shape = (1, -1) + (1,) * (inputs.ndim - 2)
        return (inputs - self.mean.reshape(shape)) / self.std.reshape(shape)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray | None
    domain: str = "ind"
    norm: NormStats | None = None
    name: str = ""

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.inputs):
                raise ValueError("inputs and labels differ in length")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def sample_shape(self) -> tuple:
        return self.inputs.shape[1:]

    def normalized(self, stats: NormStats) -> "Dataset":
        return replace(self, inputs=stats.apply(self.inputs), norm=stats)

    def subset(self, index) -> "Dataset":
        labels = None if self.labels is None else self.labels[index]
        return replace(self, inputs=self.inputs[index], labels=labels)

    def split(self, fraction: float, rng: Rng) -> tuple["Dataset", "Dataset"]:
        """Seeded shuffle, then the first ``1 - fraction`` / last ``fraction``."""
        order = rng.permutation(len(self))
        n_hold = int(round(fraction * len(self)))
        return self.subset(order[:len(self) - n_hold]), self.subset(order[len(self) - n_hold:])

    def to_csv(self, path) -> None:
        flat = self.inputs.reshape(len(self), -1)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = [f"x{i}" for i in range(flat.shape[1])]
            if self.labels is not None:
                header.append("label")
            writer.writerow(header)
            for i, row in enumerate(flat):
                values = [repr(float(v)) for v in row]
                if self.labels is not None:
                    values.append(str(int(self.labels[i])))
                writer.writerow(values)


# CIFAR-10


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``uint8`` pixels ``[N, 3, 32, 32]`` and labels from one batch file."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    return records[:, 1:].reshape((-1,) + CIFAR_SHAPE), labels


def _read_files(root: Path, names, limit):
    images, labels = [], []
    for name in names:
        path = root / name
        if not path.exists():
            raise FileNotFoundError(f"missing CIFAR-10 batch {path}")
        x, y = read_cifar_batch(path)
        images.append(x)
        labels.append(y)
    x, y = np.concatenate(images), np.concatenate(labels)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    return x.astype(np.float64) / 255.0, y


def load_cifar10(root, limit_train: int | None = None, limit_test: int | None = None):
    """Train and test datasets, standardized with train-set channel stats."""
    root = Path(root)
    x_train, y_train = _read_files(root, CIFAR_TRAIN_FILES, limit_train)
    x_test, y_test = _read_files(root, CIFAR_TEST_FILES, limit_test)
    stats = NormStats.fit(x_train)
    train = Dataset(x_train, y_train, "ind", name="cifar10-train").normalized(stats)
    test = Dataset(x_test, y_test, "ind", name="cifar10-test").normalized(stats)
    return train, test


# synthetic sources


@dataclass
class BlobConfig:
    num_classes: int
    n_per_class: int
    dim: int
    spread: float = 1.0
    separation: float = 8.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.spread <= 0:
            raise ValueError("spread must be positive")
        if self.n_per_class < 1 or self.dim < 1:
            raise ValueError("n_per_class and dim must be positive")
        if self.separation < 6:
            raise ValueError("separation below 6 spreads does not guarantee separable blobs")


def blob_centers(num_classes: int, dim: int, spread: float, separation: float = 8.0) -> np.ndarray:
    """Class centers with every pairwise distance ``>= separation * spread``.

    Uses scaled basis vectors (a simplex) when ``num_classes <= dim`` and a
    circle in the first two coordinates otherwise.
    """
    distance = separation * spread
    centers = np.zeros((num_classes, dim))
    if num_classes <= dim:
        centers[np.arange(num_classes), np.arange(num_classes)] = distance / math.sqrt(2)
        return centers
    if dim == 1 and num_classes == 2:
        centers[:, 0] = [-distance / 2, distance / 2]
        return centers
    if dim < 2:
        raise ValueError(f"cannot place {num_classes} separated centers in {dim} dimension(s)")
    radius = distance / (2 * math.sin(math.pi / num_classes))
    angles = 2 * math.pi * np.arange(num_classes) / num_classes
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def _sample_blobs(cfg: BlobConfig, rng: Rng, shift=None) -> tuple[np.ndarray, np.ndarray]:
    centers = blob_centers(cfg.num_classes, cfg.dim, cfg.spread, cfg.separation)
    if shift is not None:
        centers = centers + np.broadcast_to(np.asarray(shift, dtype=np.float64), (cfg.dim,))
    labels = np.repeat(np.arange(cfg.num_classes), cfg.n_per_class)
    noise = rng.normal((len(labels), cfg.dim)) * cfg.spread
    return centers[labels] + noise, labels


def gen_blobs(num_classes: int, n_per_class: int, dim: int, spread: float, seed: int,
              separation: float = 8.0) -> Dataset:
    cfg = BlobConfig(num_classes, n_per_class, dim, spread, separation)
    x, y = _sample_blobs(cfg, Rng(seed).split("blobs"))
    return Dataset(x, y, "ind", name="blobs")


def gen_shifted_blobs(base: BlobConfig, shift, seed: int, labeled: bool = False) -> Dataset:
    """The in-distribution generator with every center translated by ``shift``."""
    x, y = _sample_blobs(base, Rng(seed).split("blobs"), shift=shift)
    return Dataset(x, y if labeled else None, "ood_natural", name="shifted")


def _sample_shape(shape_like) -> tuple:
    if isinstance(shape_like, Dataset):
        return shape_like.sample_shape
    if isinstance(shape_like, (int, np.integer)):
        return (int(shape_like),)
    return tuple(shape_like)


def gen_gaussian_noise(shape_like, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    x = Rng(seed).split("gaussian").normal((n,) + _sample_shape(shape_like))
    return Dataset(x, None, "ood_gaussian", name="gaussian")


def gen_uniform_noise(shape_like, n: int, lo: float, hi: float, seed: int) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    x = rand_uniform(Rng(seed).split("uniform"), (n,) + _sample_shape(shape_like), lo, hi)
    return Dataset(x, None, "ood_uniform", name="uniform")
