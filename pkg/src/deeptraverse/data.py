"""Dataset ingestion and batching.

Understands the CIFAR binary batch layout (1 label byte + 3 x 1024 pixel
bytes per record, row-major 32x32; CIFAR-100 adds a coarse label byte) and
the MNIST IDX layout (big-endian headers, magic 0x803 for images and 0x801
for labels, optionally gzipped). Also generates linearly separable
Gaussian blob images for smoke tests.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .tensor import default_dtype

CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W, in [0, 1] until normalized
    labels: np.ndarray  # int64, in [0, num_classes)
    split: str
    num_classes: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    normalized: bool = False

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray


# ---------------------------------------------------------------------------
# CIFAR binary format


def _read_file(path: Path) -> bytes:
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return path.read_bytes()


def _parse_cifar_records(raw: bytes, path: Path, record_size: int, num_classes: int):
    if len(raw) % record_size != 0:
        expected = (len(raw) // record_size + 1) * record_size
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of the {record_size}-byte record "
            f"(nearest whole-record size {expected})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record_size)
    label_col = record_size - 3073
    labels = records[:, label_col].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"{path}: label {labels.max()} out of range for {num_classes} classes")
    pixels = records[:, label_col + 1 :].reshape(-1, 3, 32, 32)
    images = pixels.astype(default_dtype()) / 255.0
    return images, labels


def _cifar_dir(root) -> Path:
    root = Path(root)
    for sub in ("cifar-10-batches-bin", "cifar-100-binary"):
        if (root / sub).is_dir():
            return root / sub
    return root


def load_cifar10(root, split: str) -> Dataset:
    d = _cifar_dir(root)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    parts = []
    for name in names:
        path = d / name
        raw = _read_file(path)
        if len(raw) != 10000 * CIFAR10_RECORD:
            raise FormatError(
                f"{path}: expected {10000 * CIFAR10_RECORD} bytes (10000 records), got {len(raw)}"
            )
        parts.append(_parse_cifar_records(raw, path, CIFAR10_RECORD, 10))
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images=images, labels=labels, split=split, num_classes=10)


def load_cifar100(root, split: str) -> Dataset:
    d = _cifar_dir(root)
    path = d / ("train.bin" if split == "train" else "test.bin")
    raw = _read_file(path)
    images, labels = _parse_cifar_records(raw, path, CIFAR100_RECORD, 100)  # fine label byte
    return Dataset(images=images, labels=labels, split=split, num_classes=100)


def serialize_cifar10(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of the CIFAR-10 parser; pixel floats round back to bytes."""
    n = images.shape[0]
    out = np.empty((n, CIFAR10_RECORD), dtype=np.uint8)
    out[:, 0] = labels.astype(np.uint8)
    out[:, 1:] = np.round(images * 255.0).astype(np.uint8).reshape(n, 3072)
    return out.tobytes()


# ---------------------------------------------------------------------------
# MNIST IDX format


def _open_idx(directory: Path, base: str):
    for name in (base, base + ".gz"):
        path = directory / name
        if path.is_file():
            opener = gzip.open if name.endswith(".gz") else open
            return opener(path, "rb"), path
    raise FileNotFoundError(f"dataset file not found: {directory / base}(.gz)")


def _read_idx_images(directory: Path, base: str) -> np.ndarray:
    fh, path = _open_idx(directory, base)
    with fh:
        header = fh.read(16)
        if len(header) != 16:
            raise FormatError(f"{path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = fh.read()
    if len(raw) != count * rows * cols:
        raise FormatError(f"{path}: expected {count * rows * cols} pixel bytes, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    return pixels.astype(default_dtype()) / 255.0


def _read_idx_labels(directory: Path, base: str) -> np.ndarray:
    fh, path = _open_idx(directory, base)
    with fh:
        header = fh.read(8)
        if len(header) != 8:
            raise FormatError(f"{path}: truncated IDX header")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        raw = fh.read()
    if len(raw) != count:
        raise FormatError(f"{path}: expected {count} label bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_mnist(root, split: str) -> Dataset:
    d = Path(root)
    prefix = "train" if split == "train" else "t10k"
    images = _read_idx_images(d, f"{prefix}-images-idx3-ubyte")
    labels = _read_idx_labels(d, f"{prefix}-labels-idx1-ubyte")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"mnist {split}: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    return Dataset(images=images, labels=labels, split=split, num_classes=10)


# ---------------------------------------------------------------------------
# normalization


def compute_channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    mean = ds.images.mean(axis=(0, 2, 3))
    std = ds.images.std(axis=(0, 2, 3))
    return mean, std


def normalize(ds: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    """Per-channel standardization; guarded so it cannot be applied twice."""
    if ds.normalized:
        raise InputError(f"dataset split {ds.split!r} is already normalized")
    images = (ds.images - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(ds, images=images, mean=mean, std=std, normalized=True)


# ---------------------------------------------------------------------------
# augmentation


def flip_horizontal(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def augment_batch(images: np.ndarray, rng: np.random.Generator, policy: str, pad: int = 4) -> np.ndarray:
    """Per-image random horizontal flip then random crop out of a zero-padded
    canvas. Draws a fixed number of decisions per batch, so a given stream
    position always produces the same batch."""
    if policy == "none":
        return images
    if policy != "standard":
        raise InputError(f"unknown augmentation policy {policy!r}")
    n, c, h, w = images.shape
    flips = rng.random(n) < 0.5
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    canvas = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    canvas[:, :, pad : pad + h, pad : pad + w] = images
    out = np.empty_like(images)
    for i in range(n):
        view = canvas[i, :, :, ::-1] if flips[i] else canvas[i]
        oy, ox = offsets[i]
        out[i] = view[:, oy : oy + h, ox : ox + w]
    return out


# ---------------------------------------------------------------------------
# synthetic data


def blob_class_means(classes: int, channels: int) -> tuple[np.ndarray, float]:
    """Class-by-channel mean levels and the noise sigma; adjacent levels sit
    4 sigma apart so every class pair is separated by at least 3 sigma in
    every channel."""
    levels = np.linspace(0.15, 0.85, classes)
    gap = (0.85 - 0.15) / (classes - 1)
    sigma = gap / 4.0
    means = np.empty((classes, channels))
    for k in range(classes):
        for c in range(channels):
            means[k, c] = levels[(k + c) % classes]
    return means, sigma


def synthetic_blobs(n: int, classes: int, shape: tuple[int, int, int], seed: int, split: str = "train") -> Dataset:
    if classes < 2:
        raise InputError(f"synthetic blobs need >= 2 classes, got {classes}")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    means, sigma = blob_class_means(classes, c)
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    images = means[labels][:, :, None, None] + sigma * rng.standard_normal((n, c, h, w))
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(
        images=images.astype(default_dtype()), labels=labels, split=split, num_classes=classes
    )


# ---------------------------------------------------------------------------
# batching


def iter_batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None):
    """Yield mini-batches; pass a generator to shuffle deterministically."""
    n = len(ds)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(images=ds.images[idx], labels=ds.labels[idx])
