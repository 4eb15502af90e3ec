"""Synthetic small-image classification data and the SIDS file format.

SIDS layout (little-endian)::

    magic     4s   b"SIDS"
    version   u8   1
    n         u32  number of images
    channels  u8
    height    u16
    width     u16
    classes   u16
    n_train   u32  first n_train images form the training split
    pixels    u8[n * channels * height * width]   (N, C, H, W) row-major
    labels    u8[n]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SIDS"
VERSION = 1
_HEADER = struct.Struct("<4sBIBHHHI")


@dataclass
class SmallImageDataset:
    images: np.ndarray  # u8 (N, C, H, W)
    labels: np.ndarray  # u8 (N,)
    num_classes: int
    n_train: int

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValueError("images must be u8 with shape (N, C, H, W)")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per image required")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label out of range")
        if not 0 <= self.n_train <= len(self.labels):
            raise ValueError("n_train outside dataset")

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images[:self.n_train], self.labels[:self.n_train]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images[self.n_train:], self.labels[self.n_train:]


def _render(centers, sigmas, colors, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((colors.shape[-1], size, size))
    for (cy, cx), s, col in zip(centers, sigmas, colors):
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += col[:, None, None] * g
    return img


def generate_synthetic(classes: int = 10, samples: int = 600, seed: int = 0, size: int = 16,
                       channels: int = 3, blobs: int = 3, jitter: float = 3.0,
                       noise: float = 1.2, test_fraction: float = 1 / 6) -> SmallImageDataset:
    """Gaussian-blob class prototypes rendered with positional jitter and pixel noise.

    ``samples`` is per class. The output is shuffled; the last
    ``test_fraction`` of it is the held-out split.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    protos = []
    for _ in range(classes):
        centers = rng.uniform(3, size - 3, size=(blobs, 2))
        sigmas = rng.uniform(1.5, 3.0, size=blobs)
        colors = rng.uniform(-1, 1, size=(blobs, channels))
        protos.append((centers, sigmas, colors))
    images = np.empty((classes * samples, channels, size, size), dtype=np.uint8)
    labels = np.repeat(np.arange(classes, dtype=np.uint8), samples)
    for k, (centers, sigmas, colors) in enumerate(protos):
        for i in range(samples):
            c = centers + rng.normal(0, jitter / 2, size=centers.shape)
            amp = rng.uniform(0.8, 1.2)
            img = amp * _render(c, sigmas, colors, size) + rng.normal(0, noise, size=(channels, size, size))
            images[k * samples + i] = np.clip(np.round(128 + 60 * img), 0, 255).astype(np.uint8)
    order = rng.permutation(len(labels))
    n_test = int(round(len(labels) * test_fraction))
    return SmallImageDataset(images[order], labels[order], classes, len(labels) - n_test)


def class_prototypes(data: SmallImageDataset) -> np.ndarray:
    """Per-class mean image of the training split (float)."""
    x, y = data.train
    return np.stack([x[y == k].astype(np.float64).mean(axis=0) for k in range(data.num_classes)])


def nearest_prototype_accuracy(data: SmallImageDataset) -> float:
    protos = class_prototypes(data).reshape(data.num_classes, -1)
    x, y = data.test
    flat = x.reshape(len(x), -1).astype(np.float64)
    d = ((flat[:, None, :] - protos[None]) ** 2).sum(axis=-1)
    return float(np.mean(d.argmin(axis=1) == y))


def save_dataset(data: SmallImageDataset, path: str | Path) -> None:
    n, c, h, w = data.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w, data.num_classes, data.n_train))
        fh.write(np.ascontiguousarray(data.images).tobytes())
        fh.write(data.labels.astype(np.uint8).tobytes())


def load_dataset(path: str | Path) -> SmallImageDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, c, h, w, classes, n_train = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    npix = n * c * h * w
    if len(raw) != _HEADER.size + npix + n:
        raise ValueError(f"{path}: size {len(raw)} does not match header")
    off = _HEADER.size
    images = np.frombuffer(raw, dtype=np.uint8, count=npix, offset=off).reshape(n, c, h, w).copy()
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off + npix).copy()
    return SmallImageDataset(images, labels, classes, n_train)
