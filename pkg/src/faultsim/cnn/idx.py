"""IDX image/label files (the MNIST container format)."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import BadMagic, CountMismatch, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def image(self, i: int) -> np.ndarray:
        return self.images[i]


def _read(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _header(data: bytes, magic: int, ndim: int, path) -> tuple:
    if len(data) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated header")
    found = struct.unpack(">I", data[:4])[0]
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08X}, expected 0x{magic:08X}")
    return struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])


def load_idx(images_path, labels_path) -> Dataset:
    img = _read(images_path)
    n, rows, cols = _header(img, IMAGES_MAGIC, 3, images_path)
    lab = _read(labels_path)
    (m,) = _header(lab, LABELS_MAGIC, 1, labels_path)
    if n != m:
        raise CountMismatch(f"{n} images but {m} labels")
    pixels = np.frombuffer(img, np.uint8, count=n * rows * cols, offset=16) if len(img) >= 16 + n * rows * cols else None
    if pixels is None:
        raise FormatError(f"{images_path}: truncated pixel data")
    if len(lab) < 8 + m:
        raise FormatError(f"{labels_path}: truncated label data")
    labels = np.frombuffer(lab, np.uint8, count=m, offset=8).astype(np.int64)
    images = pixels.reshape(n, 1, rows, cols).astype(np.float32) / np.float32(255.0)
    return Dataset(images.astype(np.float32), labels)


def write_idx(images_path, labels_path, images: np.ndarray, labels) -> None:
    """Write uint8 ``images`` of shape (N, H, W) and their labels."""
    images = np.asarray(images, np.uint8)
    labels = np.asarray(labels, np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())
