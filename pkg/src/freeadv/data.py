"""Dataset ingestion (IDX, CIFAR-10 binary), synthetic blobs, and batching.

Pixels stay in raw units: IDX and CIFAR data live on [0, 255] so attack
budgets keep their usual pixel meaning. Normalization belongs to the model.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensor import DTYPE

IDX_UBYTE_IMAGES = 0x00000803
IDX_UBYTE_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, ...] float32 within value_range
    labels: np.ndarray  # [N] int64
    value_range: tuple[float, float]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")
        lo, hi = self.value_range
        if not lo < hi:
            raise DataFormatError(f"empty value range {self.value_range}")
        if self.images.size and (self.images.min() < lo or self.images.max() > hi):
            raise DataFormatError(f"pixels outside value range {self.value_range}")

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def head(self, n: int | None) -> "Dataset":
        return self if n is None or n >= len(self) else self.take(np.arange(n))

    def per_class(self, n: int) -> "Dataset":
        """First ``n`` examples of each class, in original order."""
        keep = np.zeros(len(self), dtype=bool)
        for c in range(self.num_classes):
            keep[np.flatnonzero(self.labels == c)[:n]] = True
        return self.take(np.flatnonzero(keep))

    def with_channel_axis(self) -> "Dataset":
        if self.images.ndim != 3:
            return self
        return replace(self, images=self.images[:, None])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update(repr((self.images.shape, self.value_range, self.num_classes)).encode())
        return h.hexdigest()


# --------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file (plain or gzipped) into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 8 != 0x08 or (magic & 0xFF) < 1:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    if expect_magic is not None and magic != expect_magic:
        raise DataFormatError(f"{path}: expected magic 0x{expect_magic:08x}, got 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    actual = len(raw) - header
    if actual != expected:
        raise DataFormatError(f"{path}: payload length mismatch, expected {expected} bytes, got {actual}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    """Write a uint8 array as IDX; gzip if ``path`` ends with .gz."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255 or not np.array_equal(arr, np.round(arr))):
            raise DataFormatError("IDX writer only stores integer values in [0, 255]")
        arr = arr.astype(np.uint8)
    blob = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    images = read_idx(images_path, IDX_UBYTE_IMAGES)
    labels = read_idx(labels_path, IDX_UBYTE_LABELS)
    if len(images) != len(labels):
        raise DataFormatError(
            f"image/label count mismatch: {len(images)} images in {images_path}, "
            f"{len(labels)} labels in {labels_path}"
        )
    return Dataset(images.astype(DTYPE), labels.astype(np.int64), (0.0, 255.0), num_classes, split)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    write_idx(images_path, dataset.images)
    write_idx(labels_path, dataset.labels)


# --------------------------------------------------------------------------
# CIFAR-10 binary


def load_cifar_binary(paths, split: str = "train") -> Dataset:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec.size and rec[:, 0].max() >= 10:
            raise DataFormatError(f"{path}: label {int(rec[:, 0].max())} >= 10")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return Dataset(
        np.concatenate(images).astype(DTYPE), np.concatenate(labels), (0.0, 255.0), 10, split
    )


def write_cifar_binary(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


# --------------------------------------------------------------------------
# Synthetic data


def synth_blobs(
    num_classes: int,
    n_per_class: int,
    dims: int,
    separation: float,
    seed: int,
    std: float = 1.0,
    split: str = "train",
) -> Dataset:
    """Gaussian clusters mapped affinely onto [0, 1].

    Class ``c`` is centred at ``separation / sqrt(2) * e_c`` (pairwise centre
    distance ``separation``) when ``dims >= num_classes``, otherwise at
    ``separation * c * e_0``. The latent box ``[-R, R]`` with
    ``R = (num_classes - 1) * separation + 4 * std`` maps onto [0, 1]; the rare
    samples beyond it are clipped.
    """
    if num_classes < 2 or not separation > 0:
        raise ValueError("need num_classes >= 2 and separation > 0")
    centers = np.zeros((num_classes, dims))
    if dims >= num_classes:
        centers[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2)
    else:
        centers[:, 0] = separation * np.arange(num_classes)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    z = centers[labels] + std * rng.standard_normal((len(labels), dims))
    r = (num_classes - 1) * separation + 4 * std
    x = np.clip((z + r) / (2 * r), 0.0, 1.0).astype(DTYPE)
    order = rng.permutation(len(labels))
    return Dataset(x[order], labels[order].astype(np.int64), (0.0, 1.0), num_classes, split)


# --------------------------------------------------------------------------
# Batching


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    y: np.ndarray
    index: np.ndarray


def batches(dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True) -> list[Batch]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    out = []
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        out.append(Batch(dataset.images[idx], dataset.labels[idx], idx))
    return out


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 2, flip: bool = False) -> np.ndarray:
    """Seeded random crop (zero padding ``pad``) and optional horizontal flip
    for an [N, C, H, W] batch. Off by default everywhere."""
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    for i in range(n):
        a, b = offs[i]
        img = padded[i, :, a : a + h, b : b + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out
