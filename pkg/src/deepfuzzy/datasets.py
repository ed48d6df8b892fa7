"""MNIST / CIFAR readers, normalization, augmentation and batching."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DataError, FormatError

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_PIXELS = 3 * 32 * 32
CIFAR_RECORD = {"cifar10": 1 + CIFAR_PIXELS, "cifar100": 2 + CIFAR_PIXELS}
CIFAR_CLASSES = {"cifar10": 10, "cifar100": 100}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "cifar10": {
        "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
        "test": ["test_batch.bin"],
    },
    "cifar100": {"train": ["train.bin"], "test": ["test.bin"]},
}
CIFAR_SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"{self.images.shape[0]} images but labels of shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def input_shape(self):
        return self.images.shape[1:]

    def subset(self, index, split: Optional[str] = None) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes,
                              split or self.split)


@dataclass(frozen=True)
class AugmentPolicy:
    shift_fraction: float = 0.0
    horizontal_flip: bool = False

    def __post_init__(self):
        if not 0.0 <= self.shift_fraction < 1.0:
            raise ConfigurationError(f"shift_fraction must be in [0, 1), got {self.shift_fraction}")


MNIST_AUGMENT = AugmentPolicy(0.10, False)
CIFAR_AUGMENT = AugmentPolicy(0.20, True)


def _read(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _resolve(path):
    """Accept either the raw path or its ``.gz`` sibling."""
    path = os.fspath(path)
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        return path + ".gz"
    return path


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX buffer into a uint8 array."""
    if len(raw) < 4:
        raise FormatError(f"IDX file truncated at byte offset {len(raw)} (no magic)")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"bad IDX magic {magic} at byte offset 0, expected {expected_magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"IDX header truncated at byte offset {len(raw)}, need {header} bytes")
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise FormatError(
            f"IDX payload size mismatch at byte offset {len(raw)}: header {dims} needs "
            f"{header + count} bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist(image_path, label_path, split: str = "train") -> LabeledDataset:
    images = parse_idx(_read(_resolve(image_path)), IDX_IMAGE_MAGIC)
    labels = parse_idx(_read(_resolve(label_path)), IDX_LABEL_MAGIC)
    if images.ndim != 3:
        raise FormatError(f"image IDX must be 3-d, got {images.shape}")
    if labels.shape != (images.shape[0],):
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None] / 255.0
    return LabeledDataset(x, labels.astype(np.int64), 10, split)


def load_cifar(batch_paths: Sequence, variant: str = "cifar10", split: str = "train") -> LabeledDataset:
    if variant not in CIFAR_RECORD:
        raise ConfigurationError(f"unknown CIFAR variant {variant!r}")
    rec = CIFAR_RECORD[variant]
    chunks = []
    for path in batch_paths:
        raw = _read(_resolve(path))
        if len(raw) == 0 or len(raw) % rec:
            raise FormatError(
                f"{path}: {len(raw)} bytes is not a whole number of {rec}-byte {variant} records "
                f"(trailing record starts at byte offset {len(raw) - len(raw) % rec})")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec))
    records = np.concatenate(chunks)
    labels = records[:, rec - CIFAR_PIXELS - 1].astype(np.int64)
    images = records[:, rec - CIFAR_PIXELS:].reshape(-1, 3, 32, 32).astype(np.float64)
    return LabeledDataset(images, labels, CIFAR_CLASSES[variant], split)


def load_dataset(name: str, root, split: str = "train") -> LabeledDataset:
    """Load a named dataset split from its standard file layout under ``root``."""
    root = os.fspath(root)
    if name == "mnist":
        img, lab = MNIST_FILES[split]
        return load_mnist(os.path.join(root, img), os.path.join(root, lab), split)
    if name in CIFAR_FILES:
        base = root
        sub = os.path.join(root, CIFAR_SUBDIRS[name])
        if os.path.isdir(sub):
            base = sub
        paths = [os.path.join(base, f) for f in CIFAR_FILES[name][split]]
        return load_cifar(paths, name, split)
    raise ConfigurationError(f"unknown dataset {name!r}")


def split_train_val(ds: LabeledDataset, val_count: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """Hold out the last ``val_count`` records, keeping order."""
    n = len(ds)
    if val_count < 0 or val_count >= n:
        raise ConfigurationError(f"val_count must be in [0, {n}), got {val_count}")
    cut = n - val_count
    return ds.subset(slice(0, cut), "train"), ds.subset(slice(cut, n), "val")


def normalize_samplewise(ds: LabeledDataset, eps: float = 1e-8) -> LabeledDataset:
    """Per image: subtract its mean and divide by its standard deviation."""
    x = ds.images
    axes = tuple(range(1, x.ndim))
    # centre on the first pixel first so constant images come out exactly zero
    shifted = x - x[(slice(None),) + (slice(0, 1),) * (x.ndim - 1)]
    centred = shifted - shifted.mean(axis=axes, keepdims=True)
    std = centred.std(axis=axes, keepdims=True)
    return replace(ds, images=centred / (std + eps))


def shift_range(fraction: float, size: int) -> int:
    return int(round(fraction * size))


def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate a (C, H, W) image by whole pixels, zero-filling what is vacated."""
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = img[..., ys, xs]
    return out


def augment(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    n, _, h, w = batch.shape
    my = shift_range(policy.shift_fraction, h)
    mx = shift_range(policy.shift_fraction, w)
    dys = rng.integers(-my, my + 1, size=n)
    dxs = rng.integers(-mx, mx + 1, size=n)
    flips = rng.random(n) < 0.5 if policy.horizontal_flip else np.zeros(n, dtype=bool)
    out = np.empty_like(batch)
    for i in range(n):
        img = batch[i, :, :, ::-1] if flips[i] else batch[i]
        out[i] = shift_image(img, int(dys[i]), int(dxs[i]))
    return out


def batches(ds: LabeledDataset, batch_size: int, shuffle: bool = False,
            rng: Optional[np.random.Generator] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    order = np.arange(n)
    if shuffle:
        if rng is None:
            raise ConfigurationError("shuffling needs an rng")
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (used for fixtures and exports)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    header = struct.pack(">I" + "I" * array.ndim, magic, *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.tobytes())
