"""Experiment configuration: a strict YAML document validated against a published schema."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from imbnas.errors import ConfigError
from imbnas.imbalance import LongTailProfile, ReweightPolicy
from imbnas.search import EvoConfig
from imbnas.space import OP_NAMES, SearchSpace, build_search_space
from imbnas.supernet import TrainSchedule


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SpaceSettings(_Strict):
    num_cells: int = Field(1, ge=1)
    nodes_per_cell: int = Field(3, ge=2)
    candidate_ops: list[str] = Field(default_factory=lambda: list(OP_NAMES))
    channel_width: int = Field(8, ge=1)

    def build(self, num_classes: int, in_channels: int) -> SearchSpace:
        return build_search_space(
            self.num_cells, self.nodes_per_cell, self.candidate_ops, self.channel_width, num_classes, in_channels
        )


class SyntheticSource(_Strict):
    classes: int = Field(10, ge=2)
    per_class: int = Field(200, ge=1)
    test_per_class: int = Field(50, ge=1)
    channels: int = Field(3, ge=1)
    size: int = Field(8, ge=1)
    separation: float = Field(0.5, ge=0)
    seed: int = 0


class CifarSource(_Strict):
    train_path: str
    test_path: str
    classes: int = Field(10, ge=1)


class DatasetSettings(_Strict):
    name: str
    synthetic: Optional[SyntheticSource] = None
    cifar: Optional[CifarSource] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.synthetic is None) == (self.cifar is None):
            raise ValueError("exactly one of 'synthetic' or 'cifar' must be given")
        return self

    @property
    def num_classes(self) -> int:
        return self.synthetic.classes if self.synthetic else self.cifar.classes


class ProfileSettings(_Strict):
    kind: Literal["balance", "exponential", "step"] = "balance"
    factor: float = Field(1.0, gt=0, le=1)
    base_count: int = Field(200, ge=1)

    def build(self) -> LongTailProfile:
        return LongTailProfile(self.kind, self.factor, self.base_count)


class ScheduleSettings(_Strict):
    epochs: int = Field(ge=0)
    initial_lr: float = Field(gt=0)
    milestones: list[int] = Field(default_factory=list)
    decay_factor: float = Field(0.01, gt=0, lt=1)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    batch_size: int = Field(32, ge=1)

    def build(self) -> TrainSchedule:
        try:
            return TrainSchedule(
                self.epochs,
                self.initial_lr,
                tuple(self.milestones),
                self.decay_factor,
                self.momentum,
                self.weight_decay,
                self.batch_size,
            )
        except ConfigError as exc:
            raise ValueError(str(exc)) from None

    @model_validator(mode="after")
    def _valid(self):
        self.build()
        return self


class Schedules(_Strict):
    supernet: ScheduleSettings = ScheduleSettings(epochs=40, initial_lr=0.1, milestones=[24, 32])
    adapt: ScheduleSettings = ScheduleSettings(epochs=16, initial_lr=0.05, milestones=[8])
    retrain: ScheduleSettings = ScheduleSettings(epochs=40, initial_lr=0.1, milestones=[32, 36])


class ReweightSettings(_Strict):
    gamma: float = Field(0.9999, ge=0, lt=1)
    lam: float = Field(1.0, ge=0)
    normalize: bool = True
    supernet_drw_epoch: Optional[int] = Field(None, ge=0)
    p2_drw_epoch: Optional[int] = Field(None, ge=0)
    retrain_drw_epoch: Optional[int] = Field(None, ge=0)

    def policy(self, drw_epoch: int) -> ReweightPolicy:
        return ReweightPolicy(self.gamma, self.lam, drw_epoch, self.normalize)


class EvoSettings(_Strict):
    generations: int = Field(5, ge=1)
    population: int = Field(20, ge=1)
    crossover_count: int = Field(8, ge=0)
    mutation_count: int = Field(8, ge=0)
    mutation_prob: float = Field(0.1, ge=0, le=1)
    top_k: int = Field(5, ge=1)

    def build(self, seed: int) -> EvoConfig:
        return EvoConfig(
            self.generations,
            self.population,
            self.crossover_count,
            self.mutation_count,
            self.mutation_prob,
            self.top_k,
            seed,
        )

    @model_validator(mode="after")
    def _valid(self):
        try:
            self.build(0)
        except ConfigError as exc:
            raise ValueError(str(exc)) from None
        return self


class RankCompareSettings(_Strict):
    enabled: bool = False
    space: SpaceSettings = SpaceSettings(
        num_cells=2, nodes_per_cell=2, candidate_ops=["skip_connect", "sep_conv_3x3", "avg_pool_3x3", "max_pool_3x3"]
    )
    imbalanced: ProfileSettings = ProfileSettings(kind="exponential", factor=0.01)
    schedule: ScheduleSettings = ScheduleSettings(epochs=20, initial_lr=0.1, milestones=[16])


class ExperimentConfig(_Strict):
    name: str = "experiment"
    seeds: list[int] = Field(default_factory=lambda: [0])
    out_dir: str = "runs/experiment"
    space: SpaceSettings = SpaceSettings()
    source: DatasetSettings = DatasetSettings(
        name="synthetic-source", synthetic=SyntheticSource(per_class=150, seed=100)
    )
    target: DatasetSettings = DatasetSettings(name="synthetic-target", synthetic=SyntheticSource(seed=200))
    profiles: list[ProfileSettings] = Field(
        default_factory=lambda: [ProfileSettings(kind="exponential", factor=0.01, base_count=200)]
    )
    val_fraction: float = Field(0.1, gt=0, lt=1)
    calib_size: int = Field(512, ge=1)
    schedules: Schedules = Schedules()
    reweight: ReweightSettings = ReweightSettings()
    evo: EvoSettings = EvoSettings()
    procedures: list[Literal["P0", "P1", "P2", "P3"]] = Field(default_factory=lambda: ["P0", "P1", "P2", "P3"])
    retrain_k: int = Field(1, ge=1)
    reset_head: bool = True
    rerank: bool = True
    rank_compare: RankCompareSettings = RankCompareSettings()

    @model_validator(mode="after")
    def _checks(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        labels = [p.build().label for p in self.profiles]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate profiles {labels}")
        return self

    # derived policies ------------------------------------------------------
    def supernet_policy(self) -> ReweightPolicy:
        epochs = self.schedules.supernet.epochs
        drw = self.reweight.supernet_drw_epoch
        return self.reweight.policy(int(round(0.7 * epochs)) if drw is None else drw)

    def p1_policy(self) -> ReweightPolicy:
        return self.reweight.policy(0)

    def p2_policy(self) -> ReweightPolicy:
        drw = self.reweight.p2_drw_epoch
        return self.reweight.policy(self.schedules.adapt.epochs // 2 if drw is None else drw)

    def retrain_policy(self) -> ReweightPolicy:
        epochs = self.schedules.retrain.epochs
        drw = self.reweight.retrain_drw_epoch
        return self.reweight.policy(int(round(0.8 * epochs)) if drw is None else drw)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from None


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)


def config_schema() -> str:
    return json.dumps(ExperimentConfig.model_json_schema(), indent=2)


def smoke_config(**overrides) -> ExperimentConfig:
    """Small synthetic configuration that finishes in well under a minute per seed."""
    base = ExperimentConfig(name="smoke", seeds=[0], out_dir="runs/smoke")
    data = base.model_dump(mode="json")
    data.update(overrides)
    return parse_config(data)
