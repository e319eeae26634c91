"""Cell-based search space: choice edges, candidate ops, genotypes, relaxation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from imbnas.errors import ConfigError, GenotypeParseError, NumericError

OP_NAMES: tuple[str, ...] = (
    "zero",
    "skip_connect",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "avg_pool_3x3",
    "max_pool_3x3",
)

_ALIASES = {"skip": "skip_connect", "none": "zero"}


def canonical_op(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    key = _ALIASES.get(key, key)
    if key == "separable_conv_3x3":
        key = "sep_conv_3x3"
    elif key == "separable_conv_5x5":
        key = "sep_conv_5x5"
    if key not in OP_NAMES:
        raise ConfigError(f"unknown candidate op {name!r}; supported: {', '.join(OP_NAMES)}")
    return key


@dataclass(frozen=True)
class SearchSpace:
    num_cells: int
    nodes_per_cell: int
    candidate_ops: tuple[str, ...]
    channel_width: int
    num_classes: int
    in_channels: int = 3
    choice_edges: tuple[tuple[int, int, int], ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self,
            "choice_edges",
            tuple(
                (cell, src, dst)
                for cell in range(self.num_cells)
                for src, dst in itertools.combinations(range(self.nodes_per_cell), 2)
            ),
        )

    @property
    def num_edges(self) -> int:
        return len(self.choice_edges)

    @property
    def num_ops(self) -> int:
        return len(self.candidate_ops)

    @property
    def num_genotypes(self) -> int:
        return self.num_ops**self.num_edges

    def op_index(self, name: str) -> int:
        return self.candidate_ops.index(canonical_op(name))

    def all_genotypes(self) -> Iterator["Genotype"]:
        for combo in itertools.product(range(self.num_ops), repeat=self.num_edges):
            yield Genotype(combo)

    def describe(self) -> dict:
        return {
            "num_cells": self.num_cells,
            "nodes_per_cell": self.nodes_per_cell,
            "candidate_ops": list(self.candidate_ops),
            "channel_width": self.channel_width,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_description(cls, desc: dict) -> "SearchSpace":
        return build_search_space(
            desc["num_cells"],
            desc["nodes_per_cell"],
            desc["candidate_ops"],
            desc["channel_width"],
            desc["num_classes"],
            in_channels=desc.get("in_channels", 3),
        )

    def with_num_classes(self, num_classes: int) -> "SearchSpace":
        desc = self.describe()
        desc["num_classes"] = num_classes
        return SearchSpace.from_description(desc)


def build_search_space(
    num_cells: int,
    nodes_per_cell: int,
    candidate_ops: Sequence[str] = OP_NAMES,
    channel_width: int = 16,
    num_classes: int = 10,
    in_channels: int = 3,
) -> SearchSpace:
    for name, value in [
        ("num_cells", num_cells),
        ("nodes_per_cell", nodes_per_cell),
        ("channel_width", channel_width),
        ("num_classes", num_classes),
        ("in_channels", in_channels),
    ]:
        if int(value) != value or value < 1:
            raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    if nodes_per_cell < 2:
        raise ConfigError("nodes_per_cell must be at least 2")
    if not candidate_ops:
        raise ConfigError("candidate_ops must not be empty")
    ops = tuple(canonical_op(op) for op in candidate_ops)
    if len(set(ops)) != len(ops):
        raise ConfigError(f"duplicate candidate ops in {list(candidate_ops)}")
    return SearchSpace(num_cells, nodes_per_cell, ops, channel_width, num_classes, in_channels)


@dataclass(frozen=True)
class Genotype:
    op_indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "op_indices", tuple(int(i) for i in self.op_indices))

    def __len__(self) -> int:
        return len(self.op_indices)

    def __iter__(self):
        return iter(self.op_indices)

    def __getitem__(self, i):
        return self.op_indices[i]

    @property
    def token(self) -> str:
        return encode_genotype(self)

    def check(self, space: SearchSpace) -> "Genotype":
        if len(self) != space.num_edges:
            raise ConfigError(
                f"genotype has {len(self)} genes but the space has {space.num_edges} choice edges"
            )
        for pos, idx in enumerate(self.op_indices):
            if not 0 <= idx < space.num_ops:
                raise ConfigError(f"op index {idx} at position {pos} out of range [0, {space.num_ops})")
        return self

    def op_names(self, space: SearchSpace) -> list[str]:
        return [space.candidate_ops[i] for i in self.op_indices]


def random_genotype(space: SearchSpace, rng: np.random.Generator) -> Genotype:
    return Genotype(rng.integers(0, space.num_ops, size=space.num_edges).tolist())


@dataclass(frozen=True)
class MixtureParams:
    """Per-edge architecture logits, shape [num_edges, num_ops]."""

    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64)
        if alpha.ndim != 2:
            raise ConfigError(f"alpha must be 2-D, got shape {alpha.shape}")
        if not np.all(np.isfinite(alpha)):
            raise NumericError("mixture parameters must be finite")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def zeros(cls, space: SearchSpace) -> "MixtureParams":
        return cls(np.zeros((space.num_edges, space.num_ops)))

    @classmethod
    def one_hot(cls, space: SearchSpace, genotype: Genotype, magnitude: float = 20.0) -> "MixtureParams":
        alpha = np.full((space.num_edges, space.num_ops), -magnitude)
        alpha[np.arange(space.num_edges), list(genotype)] = magnitude
        return cls(alpha)


def mixture_weights(alpha_row) -> np.ndarray:
    row = np.asarray(alpha_row, dtype=np.float64)
    if np.isnan(row).any():
        raise NumericError("NaN in mixture logits")
    with np.errstate(over="ignore"):
        shifted = row - row.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def derive_genotype(mix: MixtureParams) -> Genotype:
    # np.argmax returns the first maximal index, which is the tie-break we want
    return Genotype(np.argmax(mix.alpha, axis=1).tolist())


def encode_genotype(g: Genotype) -> str:
    return "-".join(str(i) for i in g.op_indices)


def decode_genotype(text: str, space: SearchSpace) -> Genotype:
    text = text.strip()
    parts = text.split("-") if text else []
    indices = []
    for pos, part in enumerate(parts):
        if pos >= space.num_edges:
            raise GenotypeParseError(f"token {text!r} has more than {space.num_edges} genes", pos)
        if not part.isdigit():
            raise GenotypeParseError(f"malformed gene {part!r}", pos)
        idx = int(part)
        if idx >= space.num_ops:
            raise GenotypeParseError(f"op index {idx} out of range [0, {space.num_ops})", pos)
        indices.append(idx)
    if len(indices) != space.num_edges:
        raise GenotypeParseError(f"token {text!r} has {len(indices)} genes, expected {space.num_edges}", len(indices))
    return Genotype(indices)
