"""Long-tailed splits and class re-weighted losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from imbnas.errors import ConfigError, InsufficientDataError

PROFILE_KINDS = ("balance", "exponential", "step")


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if len(self.features) != len(labels):
            raise ConfigError(
                f"features ({len(self.features)}) and labels ({len(labels)}) differ in length"
            )
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def take(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True)
class LongTailProfile:
    kind: str = "balance"
    factor: float = 1.0
    base_count: int = 5000

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ConfigError(f"unknown profile kind {self.kind!r}; expected one of {PROFILE_KINDS}")
        if not 0.0 < self.factor <= 1.0:
            raise ConfigError(f"imbalance factor must lie in (0, 1], got {self.factor}")
        if self.base_count < 1:
            raise ConfigError("base_count must be positive")

    @property
    def label(self) -> str:
        if self.kind == "balance":
            return "balance"
        return f"{self.kind}-{self.factor:g}"


@dataclass(frozen=True)
class ReweightPolicy:
    gamma: float = 0.9999
    lam: float = 1.0
    drw_epoch: int = 0
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.drw_epoch < 0:
            raise ConfigError("drw_epoch must be non-negative")


def _floor_count(x: float) -> int:
    # snap values within rounding noise of an integer so floor matches exact arithmetic
    nearest = round(x)
    if abs(x - nearest) <= 1e-9 * max(1.0, abs(x)):
        return int(nearest)
    return math.floor(x)


def longtail_counts(profile: LongTailProfile, num_classes: int) -> list[int]:
    """Per-class sample counts, head class first.

    >>> longtail_counts(LongTailProfile("step", 0.01, 5000), 4)
    [5000, 5000, 50, 50]
    """
    if num_classes < 1:
        raise ConfigError("num_classes must be positive")
    n_max, mu = profile.base_count, profile.factor
    if profile.kind == "balance" or num_classes == 1:
        return [n_max] * num_classes
    if profile.kind == "exponential":
        counts = [_floor_count(n_max * mu ** (i / (num_classes - 1))) for i in range(num_classes)]
    else:
        head = math.ceil(num_classes / 2)
        counts = [n_max] * head + [_floor_count(n_max * mu)] * (num_classes - head)
    return [max(1, c) for c in counts]


def subsample_indices(labels, counts: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Row indices selecting exactly ``counts[j]`` examples of class j, in original order."""
    labels = np.asarray(labels)
    chosen = []
    for cls, want in enumerate(counts):
        pool = np.flatnonzero(labels == cls)
        if len(pool) < want:
            raise InsufficientDataError(
                f"class {cls} has {len(pool)} examples but {want} were requested "
                f"(short by {want - len(pool)})"
            )
        chosen.append(rng.choice(pool, size=int(want), replace=False))
    return np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)


def subsample(dataset: LabeledDataset, counts: Sequence[int], rng: np.random.Generator) -> LabeledDataset:
    if len(counts) != dataset.num_classes:
        raise ConfigError(f"histogram has {len(counts)} classes, dataset has {dataset.num_classes}")
    return dataset.take(subsample_indices(dataset.labels, counts, rng))


def write_split_index(path, indices, *, source: str, profile: LongTailProfile, seed: int) -> None:
    lines = [
        f"# source: {source}",
        f"# profile: kind={profile.kind} factor={profile.factor!r} base_count={profile.base_count}",
        f"# seed: {seed}",
    ]
    lines += [str(int(i)) for i in indices]
    Path(path).write_text("\n".join(lines) + "\n")


def read_split_index(path) -> tuple[dict[str, str], np.ndarray]:
    header, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            header[key.strip()] = value.strip()
        elif line.strip():
            rows.append(int(line))
    return header, np.asarray(rows, dtype=np.int64)


def effective_weights(counts: Sequence[int], gamma: float, normalize: bool = True) -> np.ndarray:
    """Class weights (1 - gamma) / (1 - gamma**n_j), optionally rescaled to sum to C."""
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma must lie in [0, 1), got {gamma}")
    n = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
    if gamma == 0.0:
        weights = np.ones_like(n)
    else:
        d = 1.0 - gamma
        # 1 - gamma**n computed stably for gamma close to 1
        with np.errstate(divide="ignore"):  # gamma below float resolution gives log1p(-1)
            denom = -np.expm1(n * np.log1p(-d))
        weights = np.where(n == 1.0, 1.0, d / denom)
    if normalize:
        weights = weights * (len(weights) / weights.sum())
    return weights


def inverse_frequency_weights(counts: Sequence[int], normalize: bool = True) -> np.ndarray:
    """The gamma -> 1 limit of :func:`effective_weights`: weights proportional to 1 / n_j."""
    n = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
    weights = 1.0 / n
    if normalize:
        weights = weights * (len(weights) / weights.sum())
    return weights


def drw_weights(epoch: int, policy: ReweightPolicy, counts: Sequence[int]) -> np.ndarray:
    if epoch < policy.drw_epoch:
        return np.ones(len(counts))
    return effective_weights(counts, policy.gamma, policy.normalize)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels, reduction="none").mean()


def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, class_weights) -> torch.Tensor:
    """Batch mean of w[y_i] * CE_i (not normalised by the weight sum)."""
    num_classes = logits.shape[1]
    if len(labels) and int(labels.max()) >= num_classes:
        raise IndexError(f"label {int(labels.max())} out of range for {num_classes} classes")
    w = torch.as_tensor(np.asarray(class_weights), dtype=logits.dtype, device=logits.device)
    if w.shape[0] != num_classes:
        raise ConfigError(f"expected {num_classes} class weights, got {w.shape[0]}")
    nll = F.cross_entropy(logits, labels, reduction="none")
    return (w[labels] * nll).mean()


def total_loss(ce, rw, lam: float):
    return ce + lam * rw


def stratified_holdout(
    dataset: LabeledDataset, fraction: float, rng: np.random.Generator
) -> tuple[LabeledDataset, LabeledDataset]:
    """Split off ``fraction`` of each class (at least one example per non-empty class)."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError("holdout fraction must lie in (0, 1)")
    held = []
    for cls in range(dataset.num_classes):
        pool = np.flatnonzero(dataset.labels == cls)
        if len(pool) == 0:
            continue
        k = max(1, int(round(fraction * len(pool))))
        if k >= len(pool) and len(pool) > 1:
            k = len(pool) - 1
        held.append(rng.choice(pool, size=k, replace=False))
    held_idx = np.sort(np.concatenate(held)) if held else np.empty(0, dtype=np.int64)
    mask = np.ones(len(dataset), dtype=bool)
    mask[held_idx] = False
    return dataset.take(np.flatnonzero(mask)), dataset.take(held_idx)


@dataclass(frozen=True)
class TaskData:
    """Train / validation / test splits of one dataset, plus the calibration subset."""

    name: str
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    calib_size: int = 1024

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def calib(self) -> LabeledDataset:
        n = len(self.train)
        if n <= self.calib_size:
            return self.train
        return self.train.take(np.linspace(0, n - 1, self.calib_size).round().astype(np.int64))


def drw_loss(logits, labels, epoch: int, policy: ReweightPolicy, counts) -> torch.Tensor:
    """Unweighted CE before ``policy.drw_epoch``, effective-number weighted CE from it on."""
    return weighted_cross_entropy(logits, labels, drw_weights(epoch, policy, counts))
