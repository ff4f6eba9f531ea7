"""Datasets: CIFAR-10 binary ingestion, synthetic class blobs, splits and batching."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError, UsageError

RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = 10
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)
SPLIT_TAGS = ("train", "val", "test")


@dataclass
class LabeledDataset:
    images: np.ndarray  # float32 [M, C, H, W]
    labels: np.ndarray  # int64 [M]
    class_count: int
    split_tag: str = "train"

    def __post_init__(self) -> None:
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputError(f"images must be 4-D [M,C,H,W], got shape {self.images.shape}")
        if len(self.images) < 1 or len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise InputError(f"labels must lie in [0, {self.class_count})")
        if self.split_tag not in SPLIT_TAGS:
            raise UsageError(f"split_tag must be one of {SPLIT_TAGS}")
        if not np.all(np.isfinite(self.images)):
            raise InputError("images contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split_tag: str | None = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.class_count, split_tag or self.split_tag)

    def with_folded_classes(self, classes: int) -> "LabeledDataset":
        """Map label ``k`` to ``k % classes``."""
        if not 2 <= classes <= self.class_count:
            raise UsageError(f"cannot fold {self.class_count} classes into {classes}")
        return LabeledDataset(self.images, self.labels % classes, classes, self.split_tag)


# CIFAR-10 ------------------------------------------------------------------------


def normalize(raw_u8: np.ndarray) -> np.ndarray:
    x = raw_u8.astype(np.float32) / np.float32(255.0)
    return (x - CIFAR_MEAN[:, None, None]) / CIFAR_STD[:, None, None]


def denormalize(images: np.ndarray) -> np.ndarray:
    """Inverse of the fixed normalisation: pixel values in [0, 1]."""
    return images * CIFAR_STD[:, None, None] + CIFAR_MEAN[:, None, None]


def _read_records(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        blob = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if blob.size == 0 or blob.size % RECORD_BYTES:
        raise FormatError(f"{path}: size {blob.size} is not a positive multiple of {RECORD_BYTES}")
    records = blob.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        bad = int(np.argmax(labels >= CIFAR_CLASSES))
        raise FormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    return records[:, 1:].reshape(-1, *CIFAR_SHAPE), labels


def load_cifar10(paths, limit: int | None = None, split_tag: str = "train") -> LabeledDataset:
    """Read CIFAR-10 binary batch files in order; ``limit`` keeps the first records."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    if not paths:
        raise InputError("no CIFAR-10 files given")
    pixels, labels, total = [], [], 0
    for path in paths:
        if not os.path.isfile(path):
            raise InputError(f"dataset file not found: {path}")
        px, lb = _read_records(path)
        pixels.append(px)
        labels.append(lb)
        total += len(lb)
        if limit is not None and total >= limit:
            break
    raw = np.concatenate(pixels)
    lab = np.concatenate(labels)
    if limit is not None:
        if limit < 1:
            raise UsageError(f"limit must be >= 1, got {limit}")
        raw, lab = raw[:limit], lab[:limit]
    return LabeledDataset(normalize(raw), lab, CIFAR_CLASSES, split_tag)


# Synthetic data --------------------------------------------------------------------


def _class_directions(classes: int, shape, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm, low-frequency mean directions; orthonormal when dimensions allow."""
    c, h, w = shape
    gh, gw = min(h, 4), min(w, 4)
    coarse = rng.standard_normal((gh * gw * c, classes))
    if classes <= coarse.shape[0]:
        coarse, _ = np.linalg.qr(coarse)
    dirs = []
    for k in range(classes):
        grid = coarse[:, k].reshape(c, gh, gw)
        full = np.repeat(np.repeat(grid, -(-h // gh), axis=1), -(-w // gw), axis=2)[:, :h, :w]
        dirs.append(full / np.linalg.norm(full))
    return np.stack(dirs)


def synth_dataset(
    classes: int,
    per_class: int,
    shape=(3, 16, 16),
    seed: int = 0,
    separation: float = 8.0,
    split_tag: str = "train",
) -> LabeledDataset:
    """Gaussian blobs: class ``k`` is ``separation * d_k + N(0, I)``.

    The directions ``d_k`` are orthonormal, so class means sit
    ``separation * sqrt(2)`` apart while the noise has unit variance along
    any direction. Samples come out in a seeded random order.
    """
    if classes < 2:
        raise UsageError(f"classes must be >= 2, got {classes}")
    if per_class < 1:
        raise UsageError(f"per_class must be >= 1, got {per_class}")
    shape = tuple(int(v) for v in shape)
    rng = np.random.default_rng(seed)
    dirs = _class_directions(classes, shape, rng)
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = separation * dirs[labels] + rng.standard_normal((len(labels), *shape))
    return LabeledDataset(images.astype(np.float32), labels, classes, split_tag)


# Splits and batching -------------------------------------------------------------------


def split(dataset: LabeledDataset, val_fraction: float, seed: int = 0, tags=("train", "val")):
    """Stratified split; each class contributes ``round(count * val_fraction)`` samples.

    Both parts keep the original relative sample order.
    """
    if not 0 < val_fraction < 1:
        raise UsageError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    picked = []
    for k in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == k)
        take = int(round(len(members) * val_fraction))
        picked.append(rng.permutation(members)[:take])
    mask = np.zeros(len(dataset), dtype=bool)
    mask[np.concatenate(picked)] = True
    if mask.all() or not mask.any():
        raise UsageError(f"val_fraction {val_fraction} leaves one side of the split empty")
    return dataset.subset(np.flatnonzero(~mask), tags[0]), dataset.subset(np.flatnonzero(mask), tags[1])


class BatchIterator:
    """One epoch of mini-batches; the last batch keeps the remainder.

    The order is a permutation drawn from ``(shuffle_seed, epoch)``, or the
    stored order when ``shuffle`` is false.
    """

    def __init__(self, source: LabeledDataset, batch_size: int, shuffle_seed: int = 0, epoch: int = 0, shuffle: bool = True):
        if batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {batch_size}")
        self.source = source
        self.batch_size = batch_size
        self.shuffle_seed = shuffle_seed
        self.epoch = epoch
        self.shuffle = shuffle

    def order(self) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.source))
        return np.random.default_rng([self.shuffle_seed, self.epoch]).permutation(len(self.source))

    def __len__(self) -> int:
        return -(-len(self.source) // self.batch_size)

    def __iter__(self):
        order = self.order()
        for start in range(0, len(order), self.batch_size):
            idx = order[start : start + self.batch_size]
            yield self.source.images[idx], self.source.labels[idx]
