"""Datasets, the CIFAR binary loader, synthetic data and forget/remain partitions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .rng import stream

CIFAR_PIXELS = 3 * 32 * 32
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES = ("test_batch.bin",)
CIFAR100_TRAIN_FILES = ("train.bin",)
CIFAR100_TEST_FILES = ("test.bin",)
_SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}


@dataclass
class Dataset:
    """Images in [0, 1] with shape (N, C, H, W) and integer labels in [0, K)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    coarse_labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise InputError(f"images {self.images.shape} and labels {self.labels.shape} are inconsistent")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise InputError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        coarse = None if self.coarse_labels is None else self.coarse_labels[idx]
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split, coarse)


@dataclass(frozen=True)
class ForgetPartition:
    forget: np.ndarray
    remain: np.ndarray
    mode: str
    parameter: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "forget", np.asarray(self.forget, dtype=np.int64))
        object.__setattr__(self, "remain", np.asarray(self.remain, dtype=np.int64))

    @property
    def size(self) -> int:
        return len(self.forget) + len(self.remain)

    def check(self, n: int | None = None) -> None:
        """Raise ``InputError`` unless forget/remain is a disjoint sorted cover of ``range(n)``."""
        n = self.size if n is None else n
        both = np.concatenate([self.forget, self.remain])
        if len(both) != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise InputError("forget and remain do not partition the dataset")
        for idx in (self.forget, self.remain):
            if len(idx) > 1 and np.any(np.diff(idx) <= 0):
                raise InputError("partition indices must be sorted and unique")


# ---------------------------------------------------------------- CIFAR


def _record_layout(variant: str) -> int:
    if variant == "cifar10":
        return 1
    if variant == "cifar100":
        return 2
    raise InputError(f"unknown CIFAR variant {variant!r}")


def read_cifar_file(path: str | Path, variant: str) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Parse one binary batch file into (uint8 images N×3×32×32, fine labels, coarse labels)."""
    path = Path(path)
    nlabel = _record_layout(variant)
    record = nlabel + CIFAR_PIXELS
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise FormatError(f"{path}: cannot read CIFAR file ({exc})") from exc
    if raw.size == 0 or raw.size % record:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of the {record}-byte record length")
    rows = raw.reshape(-1, record)
    images = rows[:, nlabel:].reshape(-1, 3, 32, 32)
    if variant == "cifar10":
        return images, rows[:, 0].astype(np.int64), None
    return images, rows[:, 1].astype(np.int64), rows[:, 0].astype(np.int64)


def _resolve_dir(path: Path, variant: str, first: str) -> Path:
    if (path / first).exists():
        return path
    nested = path / _SUBDIRS[variant]
    if (nested / first).exists():
        return nested
    return path


def _load_split(directory: Path, files, variant: str, k: int, split: str) -> Dataset:
    imgs, fine, coarse = [], [], []
    for name in files:
        f = directory / name
        if not f.exists():
            raise FormatError(f"{f}: missing CIFAR file")
        i, y, c = read_cifar_file(f, variant)
        if y.max() >= k:
            raise FormatError(f"{f}: label {int(y.max())} out of range for {variant}")
        imgs.append(i)
        fine.append(y)
        if c is not None:
            coarse.append(c)
    images = np.concatenate(imgs).astype(np.float32) / np.float32(255.0)
    return Dataset(images, np.concatenate(fine), k, split, np.concatenate(coarse) if coarse else None)


def load_cifar(path: str | Path, variant: str = "cifar10") -> tuple[Dataset, Dataset]:
    """Load the official CIFAR binary release from ``path``; pixels are scaled by 1/255."""
    _record_layout(variant)
    path = Path(path)
    if variant == "cifar10":
        train_files, test_files, k = CIFAR10_TRAIN_FILES, CIFAR10_TEST_FILES, 10
    else:
        train_files, test_files, k = CIFAR100_TRAIN_FILES, CIFAR100_TEST_FILES, 100
    directory = _resolve_dir(path, variant, train_files[0])
    return (_load_split(directory, train_files, variant, k, "train"),
            _load_split(directory, test_files, variant, k, "test"))


def to_cifar_bytes(data: Dataset, variant: str = "cifar10") -> bytes:
    """Serialize back into the binary record format (inverse of :func:`read_cifar_file`)."""
    if data.image_shape != (3, 32, 32):
        raise InputError(f"CIFAR records hold 3x32x32 images, got {data.image_shape}")
    pixels = np.rint(data.images * 255.0).astype(np.uint8).reshape(len(data), -1)
    if variant == "cifar10":
        labels = data.labels.astype(np.uint8)[:, None]
    else:
        _record_layout(variant)
        coarse = data.coarse_labels if data.coarse_labels is not None else np.zeros(len(data), np.int64)
        labels = np.stack([coarse, data.labels], axis=1).astype(np.uint8)
    return np.concatenate([labels, pixels], axis=1).tobytes()


# ---------------------------------------------------------------- synthetic


def _class_means(k: int, shape: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    # smooth patterns: coarse 4x4 random grids upsampled, so class identity survives small shifts
    c, h, w = shape
    gh, gw = max(1, min(4, h)), max(1, min(4, w))
    coarse = rng.uniform(0.15, 0.85, size=(k, c, gh, gw))
    rows = (np.arange(h) * gh) // h
    cols = (np.arange(w) * gw) // w
    return coarse[:, :, rows][:, :, :, cols]


def make_synthetic(
    num_classes: int,
    per_class: int,
    image_shape=(3, 16, 16),
    seed: int = 0,
    noise: float = 0.25,
    split: str = "train",
    pattern_seed: int | None = None,
) -> Dataset:
    """Class-conditional Gaussian images: a per-class mean pattern plus pixel noise, clipped to [0, 1].

    ``pattern_seed`` fixes the class means separately from the noise, so a train
    and a test split can share classes while drawing independent samples.
    """
    if num_classes < 2:
        raise InputError("synthetic data needs at least 2 classes")
    if per_class < 1:
        raise InputError("per_class must be at least 1")
    if noise < 0:
        raise InputError("noise must be non-negative")
    shape = tuple(int(d) for d in image_shape)
    means = _class_means(num_classes, shape, stream(seed if pattern_seed is None else pattern_seed, "synthetic-means"))
    labels = np.repeat(np.arange(num_classes), per_class)
    rng = stream(seed, "synthetic-noise", 0 if split == "train" else 1)
    images = means[labels] + noise * rng.standard_normal((len(labels),) + shape)
    return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels, num_classes, split)


# ---------------------------------------------------------------- partitions


def split_forget(data: Dataset, mode: str, parameter: float, seed: int) -> ForgetPartition:
    """Partition ``data`` into forget and remain index sets.

    ``mode='random'`` forgets ``round(parameter * N)`` samples drawn without
    replacement from the seed's ``forget`` stream; ``mode='classwise'``
    forgets every sample whose label equals ``parameter``.
    """
    n = len(data)
    if mode == "random":
        rate = float(parameter)
        if not 0 < rate <= 1:
            raise InputError(f"forget rate must lie in (0, 1], got {rate}")
        count = math.floor(rate * n + 0.5)
        if count == 0:
            raise InputError(f"forget rate {rate} selects no samples out of {n}")
        forget = np.sort(stream(seed, "forget").choice(n, size=count, replace=False))
    elif mode == "classwise":
        cls = int(parameter)
        if cls != parameter or not 0 <= cls < data.num_classes:
            raise InputError(f"class id must be an integer in [0, {data.num_classes}), got {parameter}")
        forget = np.flatnonzero(data.labels == cls)
        if forget.size == 0:
            raise InputError(f"class {cls} has no samples to forget")
    else:
        raise InputError(f"unknown forget mode {mode!r}")
    mask = np.ones(n, dtype=bool)
    mask[forget] = False
    return ForgetPartition(forget.astype(np.int64), np.flatnonzero(mask), mode, parameter, int(seed))
