"""Experiment orchestration: splits, source search, adaptation procedures, rank transfer."""

from __future__ import annotations

import csv
import io
import json
import platform
import traceback
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

import imbnas
from imbnas.adapt import (
    ORDER,
    AdaptationRun,
    ProcedureKind,
    RetrainSpec,
    compare_procedures,
    genotype_seed,
    run_p0,
    run_p1,
    run_p2,
    run_p3,
    search_pipeline,
)
from imbnas.errors import ConfigError
from imbnas.harness.config import DatasetSettings, ExperimentConfig
from imbnas.harness.data import Normalization, SynthSpec, ingest_image_dataset, synth_dataset
from imbnas.harness.stats import rank_correlation
from imbnas.imbalance import (
    LabeledDataset,
    LongTailProfile,
    TaskData,
    longtail_counts,
    stratified_holdout,
    subsample_indices,
    write_split_index,
)
from imbnas.search import EvoResult
from imbnas.space import Genotype, SearchSpace
from imbnas.supernet import SuperNetwork, accuracy, init_subnet, save_checkpoint_file, train_model

TEST_PROTOCOL = "balanced standard test split of each dataset; fitness on a stratified holdout of the training split"


# ---------------------------------------------------------------- data ----


@dataclass
class LoadedDataset:
    train: LabeledDataset
    test: LabeledDataset
    norm: Normalization | None


def load_dataset(settings: DatasetSettings) -> LoadedDataset:
    if settings.synthetic is not None:
        s = settings.synthetic
        spec = SynthSpec(s.classes, s.per_class, s.channels, s.size, s.separation, s.seed)
        test_spec = SynthSpec(s.classes, s.test_per_class, s.channels, s.size, s.separation, s.seed)
        return LoadedDataset(synth_dataset(spec, "train"), synth_dataset(test_spec, "test"), None)
    c = settings.cifar
    train, norm = ingest_image_dataset(c.train_path, c.classes)
    test, _ = ingest_image_dataset(c.test_path, c.classes, norm)
    return LoadedDataset(train, test, norm)


def _key(label: str) -> int:
    return zlib.crc32(label.encode())


def build_task(
    name: str,
    loaded: LoadedDataset,
    profile: LongTailProfile,
    seed: int,
    val_fraction: float,
    calib_size: int,
) -> tuple[TaskData, np.ndarray]:
    """Subsample ``loaded.train`` to ``profile`` and hold out a stratified validation split.

    Returns the task and the subsample indices into the full training set.
    """
    rng = np.random.default_rng([seed, _key(name), _key(profile.label)])
    counts = longtail_counts(profile, loaded.train.num_classes)
    idx = subsample_indices(loaded.train.labels, counts, rng)
    train, val = stratified_holdout(loaded.train.take(idx), val_fraction, rng)
    return TaskData(name, train, val, loaded.test, calib_size), idx


def source_profile(cfg: ExperimentConfig, loaded: LoadedDataset) -> LongTailProfile:
    """The source is used balanced at its smallest class size."""
    return LongTailProfile("balance", 1.0, int(loaded.train.class_counts().min()))


# ------------------------------------------------------------- writing ----


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _write_run_dir(path: Path, cfg: ExperimentConfig, run: AdaptationRun) -> None:
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.yaml").write_text(cfg.to_yaml())
    _write_jsonl(path / "metrics.jsonl", run.metrics)
    _write_jsonl(path / "history.jsonl", run.history)
    (path / "ranking.txt").write_text("".join(t + "\n" for t in run.ranking))
    model = run.model if run.model is not None else run.supernet
    if model is not None:
        save_checkpoint_file(model, path / "checkpoint.bin")
    record = run.summary()
    record.update(seed=run.seed, selected=run.selected, oneshot_accuracy=run.oneshot_accuracy,
                  retrain_updates=run.retrain_updates)
    (path / "summary.json").write_text(json.dumps(record, sort_keys=True) + "\n")


# ------------------------------------------------------------ pipeline ----


def run_source(cfg: ExperimentConfig, space: SearchSpace, task: TaskData, seed: int, out: Path):
    """Train the source super-network and rank it; writes ``out/source/seed<s>``."""
    rng = np.random.default_rng([seed, _key("source-search")])
    net, result, log = search_pipeline(
        space, task, cfg.schedules.supernet.build(), cfg.supernet_policy(), cfg.evo.build(seed), rng
    )
    d = out / "source" / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint_file(net, d / "checkpoint.bin")
    _write_jsonl(d / "metrics.jsonl", [{"phase": "supernet", **r} for r in log.epochs])
    (d / "history.jsonl").write_text(result.history_lines())
    (d / "topk.csv").write_text(result.results_csv())
    return net, result


def run_procedure(
    kind: ProcedureKind,
    cfg: ExperimentConfig,
    space: SearchSpace,
    source_net: SuperNetwork,
    source_result: EvoResult,
    target: TaskData,
    seed: int,
) -> AdaptationRun:
    rng = np.random.default_rng([seed, _key(target.name), _key(kind.value)])
    retrain = RetrainSpec(cfg.schedules.retrain.build(), cfg.retrain_policy(), seed, cfg.retrain_k)
    source_top = [s.genotype for s in source_result.top_k]
    evo = cfg.evo.build(seed)
    adapt = cfg.schedules.adapt.build()
    reuse = None if cfg.rerank else source_top
    if kind is ProcedureKind.P0:
        return run_p0(source_net, source_top[: cfg.retrain_k], target, retrain.schedule, retrain.policy, rng,
                      seed=seed, retrain_seed=seed)
    if kind is ProcedureKind.P1:
        return run_p1(source_net, target, adapt, cfg.p1_policy(), evo, rng, retrain=retrain,
                      reset_head=cfg.reset_head, seed=seed, reuse_ranking=reuse)
    if kind is ProcedureKind.P2:
        return run_p2(source_net, target, adapt, cfg.p2_policy(), evo, rng, retrain=retrain,
                      reset_head=cfg.reset_head, seed=seed, reuse_ranking=reuse)
    return run_p3(space, target, cfg.schedules.supernet.build(), cfg.supernet_policy(), evo, rng,
                  retrain=retrain, seed=seed)


RUN_FIELDS = ["seed", "profile", "factor", "procedure", "selected", "accuracy", "oneshot_accuracy",
              "updates", "retrain_updates"]


def runs_csv(runs: list[AdaptationRun]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_FIELDS)
    for r in runs:
        w.writerow([r.seed, r.profile, repr(r.factor), r.kind.value, r.selected, _fmt(r.accuracy),
                    "" if r.oneshot_accuracy is None else _fmt(r.oneshot_accuracy), r.updates, r.retrain_updates])
    return buf.getvalue()


def table_csv(rows: list[dict], profiles: list[str]) -> str:
    """Accuracy table CSV: one row per procedure (P0..P3), one column per profile, mean accuracy in %."""
    procs = [k.value for k in ORDER if any(r["procedure"] == k.value for r in rows)]
    if not procs:
        raise ConfigError("no completed runs to tabulate")
    cell = {(r["procedure"], r["profile"]): r for r in rows}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["procedure", *profiles])
    for p in procs:
        w.writerow([p, *(f"{100 * cell[p, prof]['mean']:.2f}" if (p, prof) in cell else "" for prof in profiles)])
    return buf.getvalue()


def comparison_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["procedure", "profile", "mean", "std", "n", "relative_cost"])
    for r in rows:
        w.writerow([r["procedure"], r["profile"], _fmt(r["mean"]), _fmt(r["std"]), r["n"], _fmt(r["relative_cost"])])
    return buf.getvalue()


def comparison_rows(runs: list[AdaptationRun]) -> list[dict]:
    """:func:`compare_procedures` over runs that may come from several targets/profiles."""
    rows = []
    for profile in dict.fromkeys(r.profile for r in runs):
        rows += compare_procedures([r for r in runs if r.profile == profile])
    return rows


def _manifest_base(cfg: ExperimentConfig) -> dict:
    return {
        "artifact_version": imbnas.__version__,
        "config_name": cfg.name,
        "seeds": list(cfg.seeds),
        "test_protocol": TEST_PROTOCOL,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "failures": [],
        "runs": [],
        "class_counts": {},
        "normalization": {},
    }


def _failure(phase: str, exc: BaseException, **where) -> dict:
    return {"phase": phase, **where, "error": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc(limit=5)}


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> Path:
    """Execute the configured pipeline and return the run directory.

    Per seed: train and rank the source super-network, then run every
    configured procedure on every target profile. A failing phase is recorded
    in ``manifest.json`` and the remaining work continues.
    """
    torch.set_num_threads(1)
    out = Path(out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    manifest = _manifest_base(cfg)

    def save_manifest():
        _write_json(out / "manifest.json", manifest)

    try:
        src_data = load_dataset(cfg.source)
        tgt_data = load_dataset(cfg.target)
    except Exception as exc:
        manifest["failures"].append(_failure("load-data", exc))
        save_manifest()
        raise
    for name, loaded in ((cfg.source.name, src_data), (cfg.target.name, tgt_data)):
        manifest["normalization"][name] = loaded.norm.as_dict() if loaded.norm else "synthetic (none)"
    profiles = [p.build() for p in cfg.profiles]
    labels = [p.label for p in profiles]
    for p in profiles:
        manifest["class_counts"][p.label] = longtail_counts(p, tgt_data.train.num_classes)
    space = cfg.space.build(cfg.source.num_classes, src_data.train.features.shape[1])

    runs: list[AdaptationRun] = []
    splits = out / "splits"
    splits.mkdir(exist_ok=True)
    for seed in cfg.seeds:
        src_prof = source_profile(cfg, src_data)
        try:
            src_task, src_idx = build_task(cfg.source.name, src_data, src_prof, seed, cfg.val_fraction, cfg.calib_size)
            write_split_index(splits / f"source_seed{seed}.idx", src_idx, source=cfg.source.name, profile=src_prof, seed=seed)
            net, result = run_source(cfg, space, src_task, seed, out)
        except Exception as exc:
            manifest["failures"].append(_failure("source", exc, seed=seed))
            save_manifest()
            continue
        for profile in profiles:
            try:
                tgt_task, idx = build_task(cfg.target.name, tgt_data, profile, seed, cfg.val_fraction, cfg.calib_size)
                write_split_index(splits / f"{profile.label}_seed{seed}.idx", idx, source=cfg.target.name,
                                  profile=profile, seed=seed)
            except Exception as exc:
                manifest["failures"].append(_failure("split", exc, seed=seed, profile=profile.label))
                continue
            for proc in cfg.procedures:
                kind = ProcedureKind.parse(proc)
                rel = Path(profile.label) / kind.value / f"seed{seed}"
                try:
                    run = run_procedure(kind, cfg, space, net, result, tgt_task, seed)
                    run.profile, run.factor = profile.label, profile.factor
                    _write_run_dir(out / rel, cfg, run)
                except Exception as exc:
                    manifest["failures"].append(_failure("procedure", exc, seed=seed, profile=profile.label,
                                                         procedure=kind.value))
                    save_manifest()
                    continue
                run.supernet = run.model = None
                runs.append(run)
                manifest["runs"].append(str(rel))
                save_manifest()

    order = {k: i for i, k in enumerate(ORDER)}
    runs.sort(key=lambda r: (labels.index(r.profile), order[r.kind], r.seed))
    (out / "runs.csv").write_text(runs_csv(runs))
    if runs:
        rows = comparison_rows(runs)
        (out / "comparison.csv").write_text(comparison_csv(rows))
        (out / "summary.csv").write_text(table_csv(rows, labels))

    if cfg.rank_compare.enabled:
        for seed in cfg.seeds:
            try:
                report = rank_transfer(cfg, seed, tgt_data)
                report.write(out / "rank" / f"seed{seed}")
            except Exception as exc:
                manifest["failures"].append(_failure("rank-compare", exc, seed=seed))
    save_manifest()
    return out


# ------------------------------------------------------- rank transfer ----


@dataclass
class RankReport:
    """Test accuracy of every genotype trained on balanced (A) and imbalanced (B) data."""

    tokens: list[str]
    fitness_balanced: list[float]
    fitness_imbalanced: list[float]
    spearman_rho: float
    kendall_tau: float
    seed: int
    profile: str

    def __post_init__(self):
        if not len(self.tokens) == len(self.fitness_balanced) == len(self.fitness_imbalanced):
            raise ConfigError("rank report columns are not index-aligned")
        for v in (self.spearman_rho, self.kendall_tau):
            if not -1.0 <= v <= 1.0:
                raise ConfigError(f"correlation {v} outside [-1, 1]")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["genotype_token", "fitness_balanced", "fitness_imbalanced"])
        for t, a, b in zip(self.tokens, self.fitness_balanced, self.fitness_imbalanced):
            w.writerow([t, _fmt(a), _fmt(b)])
        return buf.getvalue()

    def write(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        _write_json(directory / "rank_report.json", asdict(self))
        (directory / "rank_report.csv").write_text(self.to_csv())

    @classmethod
    def read(cls, directory) -> "RankReport":
        return cls(**json.loads((Path(directory) / "rank_report.json").read_text()))


def train_and_score(space: SearchSpace, g: Genotype, task: TaskData, cfg: ExperimentConfig, seed: int) -> float:
    """Test accuracy of ``g`` trained from scratch; initialisation depends on (seed, g) only."""
    init_rng, train_rng = (np.random.default_rng(s) for s in genotype_seed(seed, g).spawn(2))
    model = init_subnet(space, g, init_rng)
    rc = cfg.rank_compare
    schedule = rc.schedule.build()
    policy = cfg.reweight.policy(int(round(0.8 * schedule.epochs)))
    train_model(model, task.train, schedule, policy, train_rng)
    return accuracy(model, task.test)


def rank_transfer(cfg: ExperimentConfig, seed: int, loaded: LoadedDataset | None = None) -> RankReport:
    """Exhaustively train the rank-compare space on balanced and imbalanced target data."""
    torch.set_num_threads(1)
    loaded = loaded or load_dataset(cfg.target)
    rc = cfg.rank_compare
    space = rc.space.build(loaded.train.num_classes, loaded.train.features.shape[1])
    imb = rc.imbalanced.build()
    bal = LongTailProfile("balance", 1.0, imb.base_count)
    task_a, _ = build_task(cfg.target.name, loaded, bal, seed, cfg.val_fraction, cfg.calib_size)
    task_b, _ = build_task(cfg.target.name, loaded, imb, seed, cfg.val_fraction, cfg.calib_size)
    genos = list(space.all_genotypes())
    fa = [train_and_score(space, g, task_a, cfg, seed) for g in genos]
    fb = [train_and_score(space, g, task_b, cfg, seed) for g in genos]
    rho, tau = rank_correlation(fa, fb)
    return RankReport([g.token for g in genos], fa, fb, rho, tau, seed, imb.label)

