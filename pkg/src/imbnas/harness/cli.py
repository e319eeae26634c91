"""Command-line entry point: ``imbnas <subcommand> [--config FILE] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from imbnas.adapt import ProcedureKind
from imbnas.errors import (
    CheckpointError,
    ConfigError,
    GenotypeParseError,
    IngestionError,
    InsufficientDataError,
    InvariantViolation,
    NumericError,
)
from imbnas.harness.config import ExperimentConfig, config_schema, load_config, parse_config, smoke_config
from imbnas.harness import runner
from imbnas.imbalance import longtail_counts
from imbnas.search import evolve
from imbnas.supernet import SuperNetwork, init_supernet, load_checkpoint_file, save_checkpoint_file, train_model


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else smoke_config()
    data = cfg.model_dump(mode="json")
    if args.seed is not None:
        data["seeds"] = [args.seed]
    if args.out is not None:
        data["out_dir"] = args.out
    return parse_config(data)


def _emit(rows: list[dict]) -> None:
    """Delimited output on stdout: a header line then one tab-separated line per row."""
    if not rows:
        return
    keys = list(rows[0])
    print("\t".join(keys))
    for r in rows:
        print("\t".join(str(r[k]) for k in keys))


def _source_task(cfg, seed):
    loaded = runner.load_dataset(cfg.source)
    prof = runner.source_profile(cfg, loaded)
    task, _ = runner.build_task(cfg.source.name, loaded, prof, seed, cfg.val_fraction, cfg.calib_size)
    return loaded, task


def _target_task(cfg, seed, label):
    loaded = runner.load_dataset(cfg.target)
    profiles = {p.build().label: p.build() for p in cfg.profiles}
    if label is None:
        label = next(iter(profiles))
    if label not in profiles:
        raise ConfigError(f"profile {label!r} not in config (have {sorted(profiles)})")
    task, _ = runner.build_task(cfg.target.name, loaded, profiles[label], seed, cfg.val_fraction, cfg.calib_size)
    return loaded, task, profiles[label]


def cmd_build_data(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir) / "splits"
    out.mkdir(parents=True, exist_ok=True)
    loaded = runner.load_dataset(cfg.target)
    rows = []
    for seed in cfg.seeds:
        for p in cfg.profiles:
            profile = p.build()
            _, idx = runner.build_task(cfg.target.name, loaded, profile, seed, cfg.val_fraction, cfg.calib_size)
            path = out / f"{profile.label}_seed{seed}.idx"
            runner.write_split_index(path, idx, source=cfg.target.name, profile=profile, seed=seed)
            counts = longtail_counts(profile, loaded.train.num_classes)
            rows.append({"profile": profile.label, "seed": seed, "examples": len(idx),
                         "counts": ",".join(map(str, counts)), "path": str(path)})
    _emit(rows)
    return 0


def cmd_train_supernet(args) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0]
    if args.dataset == "source":
        loaded, task = _source_task(cfg, seed)
    else:
        loaded, task, _ = _target_task(cfg, seed, args.profile)
    space = cfg.space.build(task.num_classes, loaded.train.features.shape[1])
    init_rng, train_rng = np.random.default_rng([seed, 7]).spawn(2)
    net = init_supernet(space, init_rng)
    log = train_model(net, task.train, cfg.schedules.supernet.build(), cfg.supernet_policy(), train_rng)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint_file(net, out / "supernet.bin")
    runner._write_jsonl(out / "supernet_metrics.jsonl", log.epochs)
    _emit([{"checkpoint": str(out / "supernet.bin"), "epochs": len(log), "updates": log.updates,
            "final_loss": f"{log.epochs[-1]['loss']:.6f}" if log.epochs else ""}])
    return 0


def cmd_evo_search(args) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0]
    net = load_checkpoint_file(args.checkpoint)
    if not isinstance(net, SuperNetwork):
        raise CheckpointError("evo-search needs a super-network checkpoint", field="kind")
    if args.dataset == "source":
        _, task = _source_task(cfg, seed)
    else:
        _, task, _ = _target_task(cfg, seed, args.profile)
    result = evolve(net, task.val, task.calib, cfg.evo.build(seed))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.jsonl").write_text(result.history_lines())
    (out / "topk.csv").write_text(result.results_csv())
    sys.stdout.write(result.results_csv())
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    kind = ProcedureKind.parse(args.procedure)
    seed = cfg.seeds[0]
    src_loaded, src_task = _source_task(cfg, seed)
    _, tgt_task, profile = _target_task(cfg, seed, args.profile)
    space = cfg.space.build(cfg.source.num_classes, src_loaded.train.features.shape[1])
    out = Path(cfg.out_dir)
    if args.checkpoint:
        net = load_checkpoint_file(args.checkpoint)
        result = evolve(net, src_task.val, src_task.calib, cfg.evo.build(seed))
    else:
        net, result = runner.run_source(cfg, space, src_task, seed, out)
    run = runner.run_procedure(kind, cfg, space, net, result, tgt_task, seed)
    run.profile, run.factor = profile.label, profile.factor
    rel = Path(profile.label) / kind.value / f"seed{seed}"
    runner._write_run_dir(out / rel, cfg, run)
    s = run.summary()
    s["seconds"] = f"{s['seconds']:.1f}"
    s["accuracy"] = f"{s['accuracy']:.4f}"
    _emit([{**s, "selected": run.selected, "dir": str(out / rel)}])
    return 0


def cmd_rank_compare(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    rows = []
    for seed in cfg.seeds:
        report = runner.rank_transfer(cfg, seed)
        report.write(out / "rank" / f"seed{seed}")
        rows.append({"seed": seed, "profile": report.profile, "n": len(report.tokens),
                     "spearman_rho": f"{report.spearman_rho:.6f}", "kendall_tau": f"{report.kendall_tau:.6f}"})
    _emit(rows)
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    out = runner.run_experiment(cfg)
    manifest = json.loads((out / "manifest.json").read_text())
    if (out / "summary.csv").is_file():
        sys.stdout.write((out / "summary.csv").read_text())
    if args.report:
        from imbnas.harness.report import emit_report

        emit_report([out], out / "report")
    for f in manifest["failures"]:
        print(f"failure: {f['phase']}: {f['error']}", file=sys.stderr)
    return 1 if manifest["failures"] else 0


def cmd_report(args) -> int:
    from imbnas.harness.report import emit_report

    out = args.out or "report"
    written = emit_report(args.runs, out)
    sys.stdout.write(Path(written["table"]).read_text())
    for name, path in written.items():
        print(f"wrote {name}: {path}", file=sys.stderr)
    return 0


def cmd_schema(args) -> int:
    print(config_schema())
    return 0


def cmd_show_config(args) -> int:
    sys.stdout.write(_config(args).to_yaml())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (default: built-in smoke config)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--out", help="output directory (overrides out_dir)")

    p = argparse.ArgumentParser(prog="imbnas", description="Super-network search under class imbalance.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("build-data", parents=[common], help="write split index files per profile and seed")

    s = sub.add_parser("train-supernet", parents=[common], help="train a super-network, save checkpoint")
    s.add_argument("--dataset", choices=["source", "target"], default="source")
    s.add_argument("--profile", help="target profile label, e.g. exponential-0.01")

    s = sub.add_parser("evo-search", parents=[common], help="evolutionary search on a trained super-network")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", choices=["source", "target"], default="source")
    s.add_argument("--profile")

    s = sub.add_parser("adapt", parents=[common], help="run one adaptation procedure on one profile")
    s.add_argument("--procedure", required=True, type=str.lower, choices=["p0", "p1", "p2", "p3"])
    s.add_argument("--profile")
    s.add_argument("--checkpoint", help="source super-network checkpoint (trained if omitted)")

    sub.add_parser("rank-compare", parents=[common], help="balanced vs imbalanced rank correlation")

    s = sub.add_parser("run", parents=[common], help="full experiment: all seeds, profiles, procedures")
    s.add_argument("--report", action="store_true", help="also render the report into <out>/report")

    s = sub.add_parser("report", help="CSV table and plots from run directories")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out")

    sub.add_parser("schema", help="print the config JSON schema")
    sub.add_parser("show-config", parents=[common], help="print the effective config as YAML")
    return p


COMMANDS = {
    "build-data": cmd_build_data,
    "train-supernet": cmd_train_supernet,
    "evo-search": cmd_evo_search,
    "adapt": cmd_adapt,
    "rank-compare": cmd_rank_compare,
    "run": cmd_run,
    "report": cmd_report,
    "schema": cmd_schema,
    "show-config": cmd_show_config,
}

USER_ERRORS = (ConfigError, GenotypeParseError, IngestionError, InsufficientDataError, CheckpointError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, InvariantViolation) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
