"""Evolutionary search over a trained super-network, plus first-order bilevel updates."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from imbnas.errors import ConfigError, NumericError
from imbnas.imbalance import LabeledDataset, weighted_cross_entropy
from imbnas.space import Genotype, MixtureParams, SearchSpace, derive_genotype, random_genotype
from imbnas.supernet import (
    SuperNetwork,
    accuracy,
    forward_with_mixture,
    frozen_stats,
    norm_state,
    recalibrate_norm_stats,
    restore_norm_state,
)

MAX_REDRAWS = 100


@dataclass(frozen=True)
class EvoConfig:
    generations: int = 20
    population: int = 50
    crossover_count: int = 25
    mutation_count: int = 25
    mutation_prob: float = 0.1
    top_k: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.generations < 1 or self.population < 1 or self.top_k < 1:
            raise ConfigError("generations, population and top_k must be positive")
        if self.crossover_count < 0 or self.mutation_count < 0:
            raise ConfigError("crossover_count and mutation_count must be non-negative")
        if self.crossover_count + self.mutation_count > self.population:
            raise ConfigError(
                f"crossover_count + mutation_count ({self.crossover_count + self.mutation_count}) "
                f"exceeds population ({self.population})"
            )
        if self.top_k > self.population:
            raise ConfigError(f"top_k ({self.top_k}) exceeds population ({self.population})")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ConfigError("mutation_prob must lie in [0, 1]")


@dataclass(frozen=True)
class ScoredGenotype:
    genotype: Genotype
    fitness: float
    eval_epoch: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ConfigError(f"fitness {self.fitness} outside [0, 1]")

    @property
    def token(self) -> str:
        return self.genotype.token


def evaluate_fitness(
    net: SuperNetwork,
    genotype: Genotype,
    val: LabeledDataset,
    calib: LabeledDataset,
    eval_epoch: int = 0,
) -> ScoredGenotype:
    """One-shot top-1 validation accuracy with path statistics recalibrated on ``calib``.

    The network's stored normalization statistics are restored afterwards.
    """
    if len(val) == 0:
        raise ConfigError("validation set is empty")
    if val.num_classes != net.space.num_classes:
        raise ConfigError(f"validation data has {val.num_classes} classes, network has {net.space.num_classes}")
    modules = net.path_modules(genotype)
    saved = norm_state(modules)
    try:
        recalibrate_norm_stats(net, genotype, calib)
        acc = accuracy(net, val, genotype)
    finally:
        restore_norm_state(modules, saved)
    return ScoredGenotype(genotype, acc, eval_epoch)


def crossover(a: Genotype, b: Genotype, rng: np.random.Generator) -> Genotype:
    if len(a) != len(b):
        raise ConfigError(f"parents differ in length ({len(a)} vs {len(b)})")
    take_a = rng.random(len(a)) < 0.5
    return Genotype([x if t else y for x, y, t in zip(a, b, take_a)])


def mutate(g: Genotype, p: float, num_ops: int, rng: np.random.Generator) -> Genotype:
    if num_ops < 1:
        raise ConfigError("num_ops must be at least 1")
    flip = rng.random(len(g)) < p
    fresh = rng.integers(0, num_ops, size=len(g))
    return Genotype([int(f) if m else x for x, f, m in zip(g, fresh, flip)])


@dataclass
class EvoResult:
    top_k: list[ScoredGenotype]
    history: list[dict] = field(default_factory=list)
    evaluations: int = 0

    @property
    def best(self) -> ScoredGenotype:
        return self.top_k[0]

    def history_lines(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.history)

    def results_csv(self) -> str:
        rows = ["rank,genotype_token,fitness"]
        rows += [f"{i + 1},{s.token},{s.fitness!r}" for i, s in enumerate(self.top_k)]
        return "\n".join(rows) + "\n"


def run_evolution(space: SearchSpace, fitness: Callable[[Genotype], float], cfg: EvoConfig) -> EvoResult:
    """Evolutionary maximisation of ``fitness`` over ``space``.

    Every evaluated genotype enters a top-k archive (the elites); each later
    generation is built from crossover children and mutants of archive
    members, topped up with fresh uniform samples.
    """
    rng = np.random.default_rng(cfg.seed)
    cache: dict[str, tuple[float, int, int]] = {}  # token -> (fitness, discovery order, generation)
    genotypes: dict[str, Genotype] = {}

    def score(g: Genotype, gen: int) -> float:
        tok = g.token
        if tok not in cache:
            value = float(fitness(g))
            if not np.isfinite(value):
                raise NumericError(f"non-finite fitness for {tok}")
            cache[tok] = (value, len(cache), gen)
            genotypes[tok] = g
        return cache[tok][0]

    def ranked() -> list[str]:
        return sorted(cache, key=lambda t: (-cache[t][0], cache[t][1]))

    def draw(make: Callable[[], Genotype], taken: set[str]) -> Genotype:
        g = make()
        for _ in range(MAX_REDRAWS):
            if g.token not in taken and g.token not in cache:
                break
            g = make()
        return g

    history = []
    for gen in range(cfg.generations):
        population: list[Genotype] = []
        taken: set[str] = set()

        def add(g: Genotype):
            population.append(g)
            taken.add(g.token)

        if gen == 0:
            while len(population) < cfg.population:
                add(draw(lambda: random_genotype(space, rng), taken))
        else:
            elites = [genotypes[t] for t in ranked()[: cfg.top_k]]
            for _ in range(cfg.crossover_count):
                add(
                    draw(
                        lambda: crossover(
                            elites[rng.integers(len(elites))], elites[rng.integers(len(elites))], rng
                        ),
                        taken,
                    )
                )
            for _ in range(cfg.mutation_count):
                add(
                    draw(
                        lambda: mutate(elites[rng.integers(len(elites))], cfg.mutation_prob, space.num_ops, rng),
                        taken,
                    )
                )
            while len(population) < cfg.population:
                add(draw(lambda: random_genotype(space, rng), taken))
        scores = [score(g, gen) for g in population]
        best_tok = ranked()[0]
        history.append(
            {
                "generation": gen,
                "best_fitness": cache[best_tok][0],
                "mean_fitness": float(np.mean(scores)),
                "best_genotype_token": best_tok,
            }
        )
    top = [
        ScoredGenotype(genotypes[t], min(max(cache[t][0], 0.0), 1.0), eval_epoch=cache[t][2])
        for t in ranked()[: cfg.top_k]
    ]
    return EvoResult(top, history, evaluations=len(cache))


def evolve(net: SuperNetwork, val: LabeledDataset, calib: LabeledDataset, cfg: EvoConfig) -> EvoResult:
    return run_evolution(net.space, lambda g: evaluate_fitness(net, g, val, calib).fitness, cfg)


def brute_force_best(space: SearchSpace, fitness: Callable[[Genotype], float]) -> tuple[Genotype, float]:
    best, best_val = None, -np.inf
    for g in space.all_genotypes():
        v = fitness(g)
        if v > best_val:
            best, best_val = g, v
    return best, best_val


# ------------------------------------------------------------------- bilevel


@dataclass
class BilevelState:
    mixture: MixtureParams
    arch_lr: float = 3e-4
    weight_lr: float = 0.025
    step_counter: int = 0


def _mixture_loss(net, alpha, batch, class_weights):
    x, y = batch
    x = torch.as_tensor(x)
    y = torch.as_tensor(y, dtype=torch.int64)
    logits = forward_with_mixture(net, alpha, x)
    if class_weights is None:
        class_weights = np.ones(net.space.num_classes)
    return weighted_cross_entropy(logits, y, class_weights)


def bilevel_step(net: SuperNetwork, state: BilevelState, train_batch, val_batch, class_weights=None):
    """First-order alternation: a weight step on ``train_batch`` then an alpha step on ``val_batch``."""
    params = list(net.parameters())
    snapshot = [p.detach().clone() for p in params]
    dtype = params[0].dtype
    alpha_fixed = torch.as_tensor(np.array(state.mixture.alpha), dtype=dtype)

    net.train()
    loss_w = _mixture_loss(net, alpha_fixed, train_batch, class_weights)
    if not torch.isfinite(loss_w):
        raise NumericError("non-finite loss in weight step")
    net.zero_grad(set_to_none=True)
    loss_w.backward()
    with torch.no_grad():
        for p in params:
            if p.grad is not None:
                p.sub_(state.weight_lr * p.grad)
    net.zero_grad(set_to_none=True)

    alpha = alpha_fixed.clone().requires_grad_(True)
    with frozen_stats([net]):
        loss_a = _mixture_loss(net, alpha, val_batch, class_weights)
    if not torch.isfinite(loss_a):
        with torch.no_grad():
            for p, s in zip(params, snapshot):
                p.copy_(s)
        raise NumericError("non-finite loss in architecture step")
    (grad,) = torch.autograd.grad(loss_a, alpha)
    new_alpha = state.mixture.alpha - state.arch_lr * grad.detach().double().numpy()
    new_state = BilevelState(MixtureParams(new_alpha), state.arch_lr, state.weight_lr, state.step_counter + 1)
    return net, new_state


def alpha_gradient(net: SuperNetwork, alpha: np.ndarray, batch, class_weights=None) -> np.ndarray:
    """Gradient of the mixture-forward loss with respect to alpha (weights fixed)."""
    dtype = next(net.parameters()).dtype
    a = torch.as_tensor(np.array(alpha), dtype=dtype).clone().requires_grad_(True)
    with frozen_stats([net]):
        loss = _mixture_loss(net, a, batch, class_weights)
    (grad,) = torch.autograd.grad(loss, a)
    return grad.double().numpy()


def darts_search(
    net: SuperNetwork,
    train: LabeledDataset,
    val: LabeledDataset,
    steps: int,
    rng: np.random.Generator,
    *,
    batch_size: int = 64,
    arch_lr: float = 3e-3,
    weight_lr: float = 0.025,
    class_weights=None,
) -> tuple[Genotype, BilevelState]:
    state = BilevelState(MixtureParams.zeros(net.space), arch_lr, weight_lr)
    for _ in range(steps):
        ti = rng.choice(len(train), size=min(batch_size, len(train)), replace=False)
        vi = rng.choice(len(val), size=min(batch_size, len(val)), replace=False)
        net, state = bilevel_step(
            net,
            state,
            (train.features[ti], train.labels[ti]),
            (val.features[vi], val.labels[vi]),
            class_weights,
        )
    return derive_genotype(state.mixture), state
