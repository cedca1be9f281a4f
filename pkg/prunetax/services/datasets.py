"""
Dataset files and splits.

PRND layout (little-endian):

    offset  0  magic      4 bytes  b"PRND"
    offset  4  version    u32      1
    offset  8  count      u32      number of images
    offset 12  channels   u32
    offset 16  height     u32
    offset 20  width      u32
    offset 24  classes    u32
    offset 28  images     count * channels * height * width float32
    then       labels     count u8

Also provides two synthetic generators (class templates plus noise, and
a linearly separable two-class set) for offline runs and tests.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from prunetax.core.config import SplitConfig
from prunetax.core.errors import DatasetFormatError
from prunetax.core.network import Batch
from prunetax.core.storage import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"PRND"
VERSION = 1
HEADER = struct.Struct("<4s6I")


@dataclass
class LabelledData:
    """Images [n, c, h, w] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in self.images.shape[1:])

    def subset(self, indices: np.ndarray) -> LabelledData:
        return LabelledData(self.images[indices], self.labels[indices], self.num_classes)

    def head(self, count: int) -> LabelledData:
        return self.subset(np.arange(min(count, len(self))))

    def astype(self, dtype: np.dtype) -> LabelledData:
        return LabelledData(self.images.astype(dtype, copy=False), self.labels, self.num_classes)

    def batches(self, batch_size: int, limit: Optional[int] = None) -> Iterator[Batch]:
        """Consecutive batches in stored order; the last may be short."""
        produced = 0
        for start in range(0, len(self), batch_size):
            if limit is not None and produced >= limit:
                return
            stop = start + batch_size
            yield Batch(inputs=self.images[start:stop], labels=self.labels[start:stop])
            produced += 1

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> Batch:
        indices = rng.choice(len(self), size=min(batch_size, len(self)), replace=False)
        return Batch(inputs=self.images[indices], labels=self.labels[indices])


@dataclass
class DataSplits:
    retrain: LabelledData
    eval: LabelledData
    test: LabelledData


# =============================================================================
# PRND files
# =============================================================================

def read_dataset(path: Path) -> LabelledData:
    """Read and validate a PRND file."""
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise DatasetFormatError("truncated header", len(data))
    magic, version, count, channels, height, width, classes = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    if min(channels, height, width) == 0:
        raise DatasetFormatError("zero image dimension", 12)
    if classes < 1 or classes > 256:
        raise DatasetFormatError(f"class count {classes} outside 1..256", 24)

    pixels = count * channels * height * width
    label_offset = HEADER.size + 4 * pixels
    expected = label_offset + count
    if len(data) < expected:
        raise DatasetFormatError(f"file holds {len(data)} bytes, header implies {expected}", len(data))
    if len(data) > expected:
        raise DatasetFormatError("trailing bytes after labels", expected)

    images = np.frombuffer(data, dtype="<f4", count=pixels, offset=HEADER.size)
    images = images.reshape(count, channels, height, width).astype(np.float32)
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=label_offset).astype(np.int64)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        raise DatasetFormatError(f"label {labels[bad[0]]} >= class count {classes}", label_offset + int(bad[0]))
    if not np.all(np.isfinite(images)):
        first = int(np.flatnonzero(~np.isfinite(images.reshape(-1)))[0])
        raise DatasetFormatError("non-finite pixel", HEADER.size + 4 * first)
    logger.debug("read %d images %s from %s", count, (channels, height, width), path)
    return LabelledData(images, labels, int(classes))


def encode_dataset(data: LabelledData) -> bytes:
    n, c, h, w = data.images.shape
    header = HEADER.pack(MAGIC, VERSION, n, c, h, w, data.num_classes)
    images = np.ascontiguousarray(data.images, dtype="<f4").tobytes()
    labels = np.asarray(data.labels, dtype=np.uint8).tobytes()
    return header + images + labels


def write_dataset(path: Path, data: LabelledData) -> Path:
    if data.num_classes > 256 or (len(data) and int(data.labels.max()) >= data.num_classes):
        raise DatasetFormatError("labels do not fit the class count", 24)
    return atomic_write_bytes(path, encode_dataset(data), prefix="dataset_")


# =============================================================================
# Synthetic data
# =============================================================================

def make_template_dataset(
    count: int,
    num_classes: int = 10,
    shape: tuple[int, int, int] = (1, 28, 28),
    noise: float = 0.6,
    seed: int = 0,
) -> LabelledData:
    """
    Smooth per-class templates with random gain, shift and noise.

    The templates are drawn once from the seed and upsampled from a
    7x7 grid, so classes differ in low-frequency structure.
    """
    rng = np.random.default_rng(seed)
    c, h, w = shape
    coarse = rng.standard_normal((num_classes, c, 7, 7))
    reps_h, reps_w = -(-h // 7), -(-w // 7)
    templates = np.kron(coarse, np.ones((1, 1, reps_h, reps_w)))[:, :, :h, :w]

    labels = rng.integers(0, num_classes, size=count)
    gains = rng.uniform(0.7, 1.3, size=(count, 1, 1, 1))
    images = templates[labels] * gains
    shifts = rng.integers(-1, 2, size=(count, 2))
    for i, (dy, dx) in enumerate(shifts):
        images[i] = np.roll(images[i], (int(dy), int(dx)), axis=(1, 2))
    images = images + noise * rng.standard_normal(images.shape)
    return LabelledData(images.astype(np.float32), labels.astype(np.int64), num_classes)


def make_separable_dataset(
    count: int,
    shape: tuple[int, int, int] = (1, 8, 8),
    margin: float = 1.0,
    seed: int = 0,
) -> LabelledData:
    """Two classes split by a fixed hyperplane with a margin on each side."""
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(shape)
    direction /= np.linalg.norm(direction)
    images = rng.standard_normal((count,) + tuple(shape))
    labels = rng.integers(0, 2, size=count)
    projection = np.tensordot(images, direction, axes=3)
    # move each point to the correct side, at least `margin` away
    target = np.where(labels == 1, 1.0, -1.0) * (margin + np.abs(projection))
    images += (target - projection)[:, None, None, None] * direction
    return LabelledData(images.astype(np.float32), labels.astype(np.int64), 2)


def make_dataset(kind: str, count: int, seed: int = 0, **options: object) -> LabelledData:
    if kind == "templates":
        return make_template_dataset(count, seed=seed, **options)
    if kind == "separable":
        return make_separable_dataset(count, seed=seed, **options)
    raise KeyError(f"unknown dataset kind '{kind}'; choose from templates, separable")


# =============================================================================
# Splits
# =============================================================================

def split_indices(count: int, split: SplitConfig, seed: int = 0, with_test: bool = True) -> dict[str, np.ndarray]:
    """Disjoint shuffled index sets for retrain/eval(/test)."""
    order = np.random.default_rng(seed).permutation(count)
    n_retrain = int(round(split.retrain * count))
    n_eval = int(round(split.eval * count))
    n_test = int(round(split.test * count)) if with_test else 0
    n_test = min(n_test, count - n_retrain - n_eval)
    parts = {
        "retrain": order[:n_retrain],
        "eval": order[n_retrain:n_retrain + n_eval],
    }
    if with_test:
        parts["test"] = order[n_retrain + n_eval:n_retrain + n_eval + n_test]
    for name, indices in parts.items():
        if indices.size == 0:
            raise DatasetFormatError(f"split '{name}' is empty for {count} samples", 8)
    return parts


def load_splits(
    dataset_path: Path,
    split: SplitConfig,
    seed: int = 0,
    test_path: Optional[Path] = None,
    dtype: np.dtype = np.float32,
) -> DataSplits:
    data = read_dataset(dataset_path).astype(dtype)
    parts = split_indices(len(data), split, seed=seed, with_test=test_path is None)
    test = read_dataset(test_path).astype(dtype) if test_path is not None else data.subset(parts["test"])
    return DataSplits(
        retrain=data.subset(parts["retrain"]),
        eval=data.subset(parts["eval"]),
        test=test,
    )
