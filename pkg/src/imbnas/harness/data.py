"""Dataset sources: CIFAR-layout binary records and synthetic Gaussian class clusters."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from imbnas.errors import ConfigError, IngestionError
from imbnas.imbalance import LabeledDataset

CIFAR_IMAGE_BYTES = 3 * 32 * 32
CIFAR_RECORD_BYTES = 1 + CIFAR_IMAGE_BYTES


@dataclass(frozen=True)
class Normalization:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def as_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


def read_cifar_records(path, expected_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw (labels, uint8 images [N, 3, 32, 32]) from a CIFAR-layout binary file."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: no such file")
    raw = path.read_bytes()
    remainder = len(raw) % CIFAR_RECORD_BYTES
    if remainder:
        whole = len(raw) - remainder
        raise IngestionError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES} "
            f"(remainder {remainder} bytes, truncated record)",
            offset=whole,
        )
    if not raw:
        raise IngestionError(f"{path}: empty file", offset=0)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= expected_classes)
    if len(bad):
        i = int(bad[0])
        raise IngestionError(
            f"{path}: record {i} has label {labels[i]} >= expected_classes {expected_classes}",
            offset=i * CIFAR_RECORD_BYTES,
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32).copy()
    return labels, images


def channel_stats(images: np.ndarray) -> Normalization:
    x = images.astype(np.float64) / 255.0
    return Normalization(
        tuple(float(v) for v in x.mean(axis=(0, 2, 3))), tuple(float(v) for v in x.std(axis=(0, 2, 3)))
    )


def ingest_image_dataset(path, expected_classes: int, norm: Normalization | None = None) -> tuple[LabeledDataset, Normalization]:
    """Load CIFAR-layout records as [0,1]-scaled, per-channel standardized float32 features.

    Without ``norm`` the constants are computed from this file; either way they
    are returned so the caller can record them.
    """
    labels, images = read_cifar_records(path, expected_classes)
    if norm is None:
        norm = channel_stats(images)
    x = images.astype(np.float32) / np.float32(255.0)
    mean = np.asarray(norm.mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(norm.std, dtype=np.float32)[None, :, None, None]
    x = (x - mean) / std
    return LabeledDataset(x, labels, expected_classes), norm


def write_cifar_records(path, labels, images) -> None:
    labels = np.asarray(labels)
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.shape[1:] != (3, 32, 32):
        raise ConfigError("images must be uint8 with shape [N, 3, 32, 32]")
    if len(labels) != len(images):
        raise ConfigError("labels and images differ in length")
    if len(labels) and (labels.min() < 0 or labels.max() > 255):
        raise ConfigError("labels must fit in one byte")
    out = np.empty((len(labels), CIFAR_RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = images.reshape(len(images), -1)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(out.tobytes())
    os.replace(tmp, path)


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 10
    per_class: int = 100
    channels: int = 3
    size: int = 8
    separation: float = 1.0
    seed: int = 0

    @property
    def feature_dims(self) -> int:
        return self.channels * self.size * self.size


def class_centers(spec: SynthSpec) -> np.ndarray:
    """Low-frequency per-class mean images: a random 2x2 grid per channel, upsampled."""
    rng = np.random.default_rng([spec.seed, 0])
    block = max(1, spec.size // 2)
    grid = rng.normal(size=(spec.classes, spec.channels, 2, 2))
    up = np.kron(grid, np.ones((1, 1, block, block)))[:, :, : spec.size, : spec.size]
    if up.shape[-1] < spec.size:
        up = np.pad(up, ((0, 0), (0, 0), (0, spec.size - up.shape[2]), (0, spec.size - up.shape[3])), mode="edge")
    return spec.separation * up


def synth_dataset(spec: SynthSpec, split: str = "train") -> LabeledDataset:
    """Gaussian clusters around :func:`class_centers` with unit noise.

    ``split`` selects an independent noise stream so train and test share
    centers but not samples.
    """
    if spec.classes < 2:
        raise ConfigError("synthetic datasets need at least 2 classes")
    if spec.per_class < 1 or spec.size < 1 or spec.channels < 1:
        raise ConfigError("per_class, size and channels must be positive")
    centers = class_centers(spec)
    stream = {"train": 1, "test": 2}.get(split)
    if stream is None:
        raise ConfigError(f"unknown split {split!r}")
    rng = np.random.default_rng([spec.seed, stream])
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    labels = labels[rng.permutation(len(labels))]
    noise = rng.normal(size=(len(labels), spec.channels, spec.size, spec.size))
    features = (centers[labels] + noise).astype(np.float32)
    return LabeledDataset(features, labels, spec.classes)
