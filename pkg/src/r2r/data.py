"""CIFAR-10 binary loading, colour normalisation and synthetic datasets."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import LabelOutOfRange, MalformedFile, ZeroStd

RECORD = 3073
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
VAL_FILE = "test_batch.bin"


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    num_classes: int = 10

    def astype(self, dtype):
        return replace(self, x_train=self.x_train.astype(dtype), x_val=self.x_val.astype(dtype))


def read_cifar_file(path, num_classes=10):
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % RECORD:
        raise MalformedFile(f"{path}: size {len(raw)} is not a positive multiple of {RECORD}")
    rec = np.frombuffer(raw, np.uint8).reshape(-1, RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= num_classes:
        raise LabelOutOfRange(f"{path}: label {labels.max()} outside [0, {num_classes})")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return images, labels


def load_cifar10(directory) -> Dataset:
    """Five training batches and the test batch (used as the validation split)."""
    d = Path(directory)
    missing = [f for f in TRAIN_FILES + [VAL_FILE] if not (d / f).is_file()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 files missing in {d}: {', '.join(missing)}")
    parts = [read_cifar_file(d / f) for f in TRAIN_FILES]
    xv, yv = read_cifar_file(d / VAL_FILE)
    return Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), xv, yv)


def channel_stats(x):
    x64 = x.astype(np.float64)
    return x64.mean(axis=(0, 2, 3)), x64.std(axis=(0, 2, 3))


def color_normalize(ds: Dataset) -> Dataset:
    """Standardise every channel of both splits with the training split's statistics."""
    mean, std = channel_stats(ds.x_train)
    if np.any(std == 0):
        raise ZeroStd(f"channel(s) {np.flatnonzero(std == 0).tolist()} are constant in the training split")
    dt = ds.x_train.dtype

    def apply(x):
        return ((x.astype(np.float64) - mean[None, :, None, None]) / std[None, :, None, None]).astype(dt)

    return replace(ds, x_train=apply(ds.x_train), x_val=apply(ds.x_val), mean=mean, std=std)


def denormalize(ds: Dataset, x):
    return (x.astype(np.float64) * ds.std[None, :, None, None] + ds.mean[None, :, None, None]).astype(x.dtype)


def synthetic_dataset(seed: int = 0, n: int = 1000, classes: int = 10, difficulty: float = 0.0,
                      n_val: int | None = None, shape=(3, 32, 32)) -> Dataset:
    """Class-conditional Gaussian blobs.

    Each class has a random low-frequency template (a per-channel mean pattern
    on a coarse 4x4 grid, upsampled).  Samples are the template plus i.i.d.
    pixel noise; ``difficulty`` scales the noise and shrinks the templates
    towards a shared mean, so 0 is easy and values near 1 are hard.
    """
    if n < classes:
        raise ValueError("need at least one example per class")
    rng = np.random.default_rng(seed)
    c, h, w = shape
    coarse = rng.normal(0, 1, (classes, c, 4, 4))
    templates = np.kron(coarse, np.ones((1, 1, -(-h // 4), -(-w // 4))))[:, :, :h, :w]
    shared = templates.mean(axis=0, keepdims=True)
    templates = shared + (1.0 - 0.9 * min(max(difficulty, 0.0), 1.0)) * (templates - shared)
    noise = 0.5 + 2.5 * difficulty
    n_val = max(classes, n // 5) if n_val is None else n_val

    def split(count):
        y = np.arange(count) % classes
        rng.shuffle(y)
        x = templates[y] + rng.normal(0, noise, (count, c, h, w))
        return x.astype(np.float32), y.astype(np.int64)

    xt, yt = split(n)
    xv, yv = split(n_val)
    return Dataset(xt, yt, xv, yv, num_classes=classes)


def batches(n: int, batch_size: int, rng=None):
    """Index arrays covering ``range(n)``; shuffled when ``rng`` is given."""
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, batch_size):
        yield idx[s:s + batch_size]
