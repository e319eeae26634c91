"""Rank adaptation procedures P0-P3: moving a balanced-source super-network to an imbalanced target."""

from __future__ import annotations

import copy
import enum
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from imbnas.errors import ConfigError, InvariantViolation
from imbnas.imbalance import ReweightPolicy, TaskData
from imbnas.search import EvoConfig, EvoResult, evaluate_fitness, evolve
from imbnas.space import Genotype, SearchSpace
from imbnas.supernet import (
    SubNetwork,
    SuperNetwork,
    TrainLog,
    TrainSchedule,
    accuracy,
    backbone_hash,
    init_subnet,
    init_supernet,
    train_model,
)


class ProcedureKind(str, enum.Enum):
    P0 = "P0"  # retrain source-ranked subnets on the target
    P1 = "P1"  # frozen backbone, classifier retrained with re-weighting
    P2 = "P2"  # backbone and classifier fine-tuned with delayed re-weighting
    P3 = "P3"  # fresh super-network search on the target (paragon)

    @classmethod
    def parse(cls, text: str) -> "ProcedureKind":
        try:
            return cls(text.strip().upper())
        except ValueError:
            raise ConfigError(f"unknown procedure {text!r}; expected one of P0, P1, P2, P3") from None


# Adaptation recipe: 200 epochs at lr 0.01, decayed x0.01 at epoch 100.
ADAPT_SCHEDULE = TrainSchedule(epochs=200, initial_lr=0.01, milestones=(100,), decay_factor=0.01)
# Super-network recipe: 500 epochs at lr 0.1, decayed x0.01 at epochs 300 and 400.
SUPERNET_SCHEDULE = TrainSchedule(epochs=500, initial_lr=0.1, milestones=(300, 400), decay_factor=0.01)
# Stand-alone subnet recipe: 200 epochs at lr 0.1, decayed x0.01 at epochs 160 and 180.
SUBNET_SCHEDULE = TrainSchedule(epochs=200, initial_lr=0.1, milestones=(160, 180), decay_factor=0.01)


def default_policy(kind: ProcedureKind, schedule: TrainSchedule, gamma: float = 0.9999) -> ReweightPolicy:
    if kind is ProcedureKind.P1:
        return ReweightPolicy(gamma=gamma, drw_epoch=0)
    if kind is ProcedureKind.P2:
        return ReweightPolicy(gamma=gamma, drw_epoch=schedule.epochs // 2)
    # P0 retraining and P3 search: re-weight from 70% of the schedule (350 of 500)
    return ReweightPolicy(gamma=gamma, drw_epoch=int(round(0.7 * schedule.epochs)))


@dataclass
class AdaptationRun:
    kind: ProcedureKind
    target: str
    seed: int
    ranking: list[str]
    selected: str
    accuracy: float
    oneshot_accuracy: float | None = None
    val_accuracy: float | None = None
    updates: int = 0
    retrain_updates: int = 0
    seconds: float = 0.0
    profile: str = ""
    factor: float = 1.0
    metrics: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    supernet: SuperNetwork | None = field(default=None, repr=False)
    model: SubNetwork | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "procedure": self.kind.value,
            "profile": self.profile,
            "factor": self.factor,
            "accuracy": self.accuracy,
            "updates": self.updates,
            "seconds": self.seconds,
        }


def _tagged(log: TrainLog, phase: str) -> list[dict]:
    return [{"phase": phase, **rec} for rec in log.epochs]


def genotype_seed(seed: int, g: Genotype) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), len(g), *g.op_indices])


def retrain_and_select(
    space: SearchSpace,
    genotypes: Sequence[Genotype],
    target: TaskData,
    schedule: TrainSchedule,
    policy: ReweightPolicy,
    retrain_seed: int,
) -> tuple[SubNetwork, float, float, int, list[dict]]:
    """Train each genotype from scratch on the target; keep the best by validation accuracy.

    Initialisation and batch order depend only on (retrain_seed, genotype), so
    procedures that select the same architecture obtain the same model.
    Returns (model, val accuracy, test accuracy, parameter updates, metric records).
    """
    if not genotypes:
        raise ConfigError("no genotypes to retrain")
    target_space = space.with_num_classes(target.num_classes)
    best = None
    updates, records = 0, []
    for rank, g in enumerate(genotypes):
        init_rng, train_rng = (np.random.default_rng(s) for s in genotype_seed(retrain_seed, g).spawn(2))
        model = init_subnet(target_space, g, init_rng)
        log = train_model(model, target.train, schedule, policy, train_rng)
        updates += log.updates
        records += [{**rec, "genotype": g.token} for rec in _tagged(log, f"retrain-{rank}")]
        val_acc = accuracy(model, target.val)
        if best is None or val_acc > best[1]:
            best = (model, val_acc)
    model, val_acc = best
    return model, val_acc, accuracy(model, target.test), updates, records


def _adapted_copy(
    source_net: SuperNetwork, num_classes: int, rng: np.random.Generator, reset_head: bool
) -> SuperNetwork:
    """Copy of the source network whose head is fresh when asked or when C differs."""
    net = copy.deepcopy(source_net)
    if reset_head or net.space.num_classes != num_classes:
        net.reset_classifier(num_classes, rng)
    return net


def _oneshot_test_accuracy(net: SuperNetwork, g: Genotype, target: TaskData) -> float:
    return evaluate_fitness(net, g, target.test, target.calib).fitness


@dataclass(frozen=True)
class RetrainSpec:
    """Final from-scratch retraining of the top ``k`` searched genotypes."""

    schedule: TrainSchedule
    policy: ReweightPolicy
    seed: int = 0
    k: int = 1


def _finish(kind, net, result: EvoResult, target, retrain, seed, updates, metrics, t0, reuse=None) -> AdaptationRun:
    ranking = list(reuse) if reuse else [s.genotype for s in result.top_k]
    best = ranking[0]
    oneshot = _oneshot_test_accuracy(net, best, target)
    run = AdaptationRun(
        kind=kind,
        target=target.name,
        seed=seed,
        ranking=[g.token for g in ranking],
        selected=best.token,
        accuracy=oneshot,
        oneshot_accuracy=oneshot,
        updates=updates,
        metrics=metrics,
        history=result.history,
        supernet=net,
    )
    if retrain is not None:
        genos = ranking[: retrain.k]
        model, val_acc, test_acc, r_updates, records = retrain_and_select(
            net.space, genos, target, retrain.schedule, retrain.policy, retrain.seed
        )
        run.selected, run.accuracy, run.val_accuracy = model.genotype.token, test_acc, val_acc
        run.retrain_updates, run.model = r_updates, model
        run.metrics += records
    run.seconds = time.perf_counter() - t0
    return run


def run_p0(
    source_net: SuperNetwork,
    source_topk: Sequence[Genotype],
    target: TaskData,
    schedule: TrainSchedule,
    policy: ReweightPolicy,
    rng: np.random.Generator,
    *,
    seed: int = 0,
    retrain_seed: int | None = None,
) -> AdaptationRun:
    """Retrain the source-ranked subnets from scratch on the target; ranking stays source-fixed."""
    t0 = time.perf_counter()
    if not source_topk:
        raise ConfigError("source_topk must not be empty")
    if retrain_seed is None:
        retrain_seed = int(rng.integers(2**31))
    model, val_acc, test_acc, updates, records = retrain_and_select(
        source_net.space, list(source_topk), target, schedule, policy, retrain_seed
    )
    return AdaptationRun(
        kind=ProcedureKind.P0,
        target=target.name,
        seed=seed,
        ranking=[g.token for g in source_topk],
        selected=model.genotype.token,
        accuracy=test_acc,
        val_accuracy=val_acc,
        retrain_updates=updates,
        metrics=records,
        model=model,
        seconds=time.perf_counter() - t0,
    )


def run_p1(
    source_net: SuperNetwork,
    target: TaskData,
    schedule: TrainSchedule,
    policy: ReweightPolicy,
    evo: EvoConfig,
    rng: np.random.Generator,
    *,
    retrain: RetrainSpec | None = None,
    reset_head: bool = True,
    seed: int = 0,
    reuse_ranking: Sequence[Genotype] | None = None,
) -> AdaptationRun:
    """Freeze the source backbone, retrain only the classifier with re-weighting, then re-rank.

    Passing ``reuse_ranking`` (e.g. the source top-k) keeps that order for the
    final selection instead of the target re-ranking; the search still runs
    and its history is recorded.
    """
    if policy.drw_epoch != 0:
        raise ConfigError(f"P1 re-weights from the first epoch; got drw_epoch={policy.drw_epoch}")
    t0 = time.perf_counter()
    head_rng, train_rng = rng.spawn(2)
    net = _adapted_copy(source_net, target.num_classes, head_rng, reset_head)
    before = backbone_hash(net)
    log = train_model(net, target.train, schedule, policy, train_rng, train_backbone=False)
    if backbone_hash(net) != before:
        raise InvariantViolation("P1 modified the frozen backbone")
    result = evolve(net, target.val, target.calib, evo)
    if backbone_hash(net) != before:
        raise InvariantViolation("P1 search modified the frozen backbone")
    return _finish(
        ProcedureKind.P1, net, result, target, retrain, seed,
        log.updates, _tagged(log, "adapt"), t0, reuse_ranking,
    )


def run_p2(
    source_net: SuperNetwork,
    target: TaskData,
    schedule: TrainSchedule,
    policy: ReweightPolicy,
    evo: EvoConfig,
    rng: np.random.Generator,
    *,
    retrain: RetrainSpec | None = None,
    reset_head: bool = True,
    seed: int = 0,
    reuse_ranking: Sequence[Genotype] | None = None,
) -> AdaptationRun:
    """Fine-tune backbone and classifier on the target with delayed re-weighting, then re-rank."""
    t0 = time.perf_counter()
    head_rng, train_rng = rng.spawn(2)
    net = _adapted_copy(source_net, target.num_classes, head_rng, reset_head)
    log = train_model(net, target.train, schedule, policy, train_rng)
    result = evolve(net, target.val, target.calib, evo)
    return _finish(
        ProcedureKind.P2, net, result, target, retrain, seed,
        log.updates, _tagged(log, "adapt"), t0, reuse_ranking,
    )


def search_pipeline(
    space: SearchSpace,
    data: TaskData,
    schedule: TrainSchedule,
    policy: ReweightPolicy,
    evo: EvoConfig,
    rng: np.random.Generator,
) -> tuple[SuperNetwork, EvoResult, TrainLog]:
    """Train a fresh super-network on ``data`` and rank genotypes by evolutionary search."""
    init_rng, train_rng = rng.spawn(2)
    net = init_supernet(space.with_num_classes(data.num_classes), init_rng)
    log = train_model(net, data.train, schedule, policy, train_rng)
    return net, evolve(net, data.val, data.calib, evo), log


def run_p3(
    space: SearchSpace,
    target: TaskData,
    schedule: TrainSchedule,
    policy: ReweightPolicy,
    evo: EvoConfig,
    rng: np.random.Generator,
    *,
    retrain: RetrainSpec | None = None,
    seed: int = 0,
) -> AdaptationRun:
    """Search directly on the target: fresh super-network, DRW training, evolution, retraining."""
    t0 = time.perf_counter()
    net, result, log = search_pipeline(space, target, schedule, policy, evo, rng)
    return _finish(
        ProcedureKind.P3, net, result, target, retrain, seed,
        log.updates, _tagged(log, "search"), t0,
    )


ORDER = [ProcedureKind.P0, ProcedureKind.P1, ProcedureKind.P2, ProcedureKind.P3]

# Full-scale CIFAR-10 (balanced) -> CIFAR-100 top-1 accuracy in %, exponential factor 0.01.
# Kept for comparison only; desk runs are far smaller and are not expected to match.
FULL_SCALE_REFERENCE = {"P0": 41.18, "P1": 42.37, "P2": 42.02, "P3": 42.32}


def compare_procedures(runs: Sequence[AdaptationRun]) -> list[dict]:
    """Aggregate runs into rows {procedure, profile, mean, std, n, relative_cost}.

    Rows are ordered P0..P3 within each profile, profiles in order of first
    appearance. Cost is total parameter updates relative to P3 on the same
    profile (or to the costliest procedure when P3 is absent).
    """
    if not runs:
        return []
    targets = {r.target for r in runs}
    if len(targets) > 1:
        raise ConfigError(f"runs mix targets {sorted(targets)}")
    profiles = list(dict.fromkeys(r.profile for r in runs))
    rows = []
    for profile in profiles:
        group = [r for r in runs if r.profile == profile]
        cost = {
            k: np.mean([r.updates + r.retrain_updates for r in group if r.kind is k])
            for k in ORDER
            if any(r.kind is k for r in group)
        }
        ref = cost.get(ProcedureKind.P3) or max(cost.values()) or 1.0
        for kind in ORDER:
            accs = [r.accuracy for r in group if r.kind is kind]
            if not accs:
                continue
            rows.append(
                {
                    "procedure": kind.value,
                    "profile": profile,
                    "mean": float(np.mean(accs)),
                    "std": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
                    "n": len(accs),
                    "relative_cost": float(cost[kind] / ref),
                }
            )
    return rows


def ordering_flags(rows: Sequence[dict]) -> dict[str, dict[str, bool]]:
    """Per profile: does P1 beat P2 and P0 on mean accuracy?"""
    flags = {}
    for profile in dict.fromkeys(r["profile"] for r in rows):
        means = {r["procedure"]: r["mean"] for r in rows if r["profile"] == profile}
        flags[profile] = {
            "P1>P2": bool("P1" in means and "P2" in means and means["P1"] > means["P2"]),
            "P1>P0": bool("P1" in means and "P0" in means and means["P1"] > means["P0"]),
        }
    return flags
