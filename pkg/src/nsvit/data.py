"""Labeled image sets: loaders for on-disk formats and a synthetic desk dataset."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import formats
from .errors import UsageError

FORMATS = ("cifar10-binary", "raw-tensor")


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, H, W), pixels in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise UsageError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index])

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.images.astype(dtype), self.labels)

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """Uniform minibatch without replacement (the whole set if it is smaller)."""
        if batch_size >= len(self):
            return self.images, self.labels
        idx = np.sort(rng.choice(len(self), size=batch_size, replace=False))
        return self.images[idx], self.labels[idx]

    def epoch(self, rng: np.random.Generator, batch_size: int):
        """Shuffled minibatches covering the set once; the last may be short."""
        order = rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


def load_dataset(path, fmt: str) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if fmt == "cifar10-binary":
        images, labels = formats.decode_cifar10(buf)
    elif fmt == "raw-tensor":
        images, labels = formats.decode_raw_dataset(buf)
    else:
        raise UsageError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")
    return Dataset(images, labels)


def save_raw_dataset(path, dataset: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(formats.encode_raw_dataset(dataset.images, dataset.labels))


def _class_templates(rng, num_classes, channels, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    templates = np.empty((num_classes, channels, size, size))
    for c in range(num_classes):
        for ch in range(channels):
            field = np.zeros((size, size))
            for _ in range(3):
                fx, fy = rng.integers(1, 4, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                field += rng.normal() * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
            field /= np.abs(field).max() + 1e-12
            templates[c, ch] = 0.5 + 0.35 * field
    return templates


def make_desk_dataset(
    n_train: int = 2000,
    n_test: int = 600,
    rng: np.random.Generator | None = None,
    num_classes: int = 10,
    image_size: int = 32,
    channels: int = 3,
    pixel_noise: float = 0.2,
    max_shift: int = 2,
) -> tuple[Dataset, Dataset]:
    """Synthetic stand-in for a 10-class natural-image benchmark.

    Each class owns a smooth sinusoidal template per channel. A sample is its
    class template with random contrast and brightness, a circular shift of
    up to ``max_shift`` pixels, and i.i.d. Gaussian pixel noise, clipped to
    [0, 1]. Labels are balanced round-robin and then shuffled.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    templates = _class_templates(rng, num_classes, channels, image_size)

    def draw(n):
        labels = rng.permutation(np.arange(n) % num_classes)
        contrast = rng.uniform(0.6, 1.2, size=(n, 1, 1, 1))
        brightness = rng.uniform(-0.1, 0.1, size=(n, 1, 1, 1))
        base = templates[labels]
        images = 0.5 + contrast * (base - 0.5) + brightness
        if max_shift:
            shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
            for i, (dy, dx) in enumerate(shifts):
                images[i] = np.roll(images[i], (dy, dx), axis=(1, 2))
        images += pixel_noise * rng.standard_normal(images.shape)
        return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels.astype(np.int64))

    return draw(n_train), draw(n_test)
