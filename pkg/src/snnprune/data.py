"""Datasets: MNIST in IDX format and seeded Gaussian blobs."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "SNNPRUNE_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class FormatError(ValueError):
    """A dataset file does not follow the expected binary layout."""


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def features(self) -> int:
        return int(np.prod(self.inputs.shape[1:]))

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.inputs[:n], self.labels[:n], self.classes, self.split)


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f"{what}: file too short for an IDX header")
    got, count = struct.unpack(">II", raw[:8])
    if got != magic:
        raise FormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise FormatError(f"{what}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:hdr])
    size = int(np.prod(dims))
    body = raw[hdr:]
    if len(body) != size:
        raise FormatError(f"{what}: expected {size} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] and flattened."""
    images = _parse_idx(_read(images_path), IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_read(labels_path), LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), 10, split)


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as IDX (magic ``0x0800 | ndim``)."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def find_mnist(data_dir=None, split: str = "train"):
    """Locate the IDX pair for ``split`` (plain or .gz) or return None."""
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV, "")
    if not data_dir:
        return None
    found = []
    for stem in MNIST_FILES[split]:
        candidates = [Path(data_dir) / sub / name
                      for sub in ("", "MNIST/raw", "mnist")
                      for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"))]
        hit = next((p for p in candidates if p.exists()), None)
        if hit is None:
            return None
        found.append(hit)
    return tuple(found)


def load_mnist(data_dir=None, split: str = "train") -> Dataset:
    paths = find_mnist(data_dir, split)
    if paths is None:
        where = data_dir or os.environ.get(DATA_DIR_ENV) or f"${DATA_DIR_ENV} (unset)"
        raise FileNotFoundError(f"MNIST {split} IDX files not found under {where}")
    return load_mnist_idx(*paths, split=split)


def synthetic_dataset(seed: int, n: int, classes: int, features: int,
                      spread: float = 0.1, split: str = "train") -> Dataset:
    """Class-conditional Gaussian blobs around seeded means on the unit sphere.

    Labels go round-robin (``i % classes``). Samples are mapped into [0, 1]
    by ``(x + 1) / 2`` and clipped. Train and test splits share the means.
    """
    if n < 1 or classes < 1 or features < 1:
        raise ValueError("n, classes and features must all be >= 1")
    means = np.random.default_rng([seed, 0]).standard_normal((classes, features))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.arange(n) % classes
    x = means[labels] + spread * rng.standard_normal((n, features))
    return Dataset(np.clip((x + 1.0) / 2.0, 0.0, 1.0), labels.astype(np.int64), classes, split)
