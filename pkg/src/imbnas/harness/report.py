"""Report emission from finished run directories: procedure-by-profile CSV and static plots."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from imbnas.adapt import ORDER  # noqa: E402
from imbnas.errors import ConfigError  # noqa: E402
from imbnas.harness.runner import RankReport, comparison_csv, table_csv  # noqa: E402

# Fixed metadata keeps PNG bytes identical across regenerations.
_PNG_META = {"Software": None}


def _read_runs(run_dir: Path) -> list[dict]:
    path = run_dir / "runs.csv"
    if not path.is_file():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _profiles_in_order(run_dirs: list[Path], rows: list[dict]) -> list[str]:
    seen = []
    for d in run_dirs:
        manifest = d / "manifest.json"
        if manifest.is_file():
            seen += list(json.loads(manifest.read_text()).get("class_counts", {}))
    seen += [r["profile"] for r in rows]
    return list(dict.fromkeys(seen))


def collect(run_dirs) -> tuple[list[dict], list[str]]:
    """All per-run records across ``run_dirs`` and the profile order."""
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ConfigError("no run directories given")
    rows = [r for d in run_dirs for r in _read_runs(d)]
    if not rows:
        raise ConfigError(f"no completed runs found in {', '.join(map(str, run_dirs))}")
    return rows, _profiles_in_order(run_dirs, rows)


def aggregate(rows: list[dict], profiles: list[str]) -> list[dict]:
    """Rows {procedure, profile, mean, std, n, relative_cost} in P0..P3 x profile order."""
    groups = defaultdict(list)
    for r in rows:
        groups[r["procedure"], r["profile"]].append(r)
    out = []
    for profile in profiles:
        cost = {
            k.value: np.mean([int(r["updates"]) + int(r["retrain_updates"]) for r in groups[k.value, profile]])
            for k in ORDER
            if groups[k.value, profile]
        }
        if not cost:
            continue
        ref = cost.get("P3") or max(cost.values()) or 1.0
        for k in ORDER:
            g = groups[k.value, profile]
            if not g:
                continue
            acc = [float(r["accuracy"]) for r in g]
            out.append(
                {
                    "procedure": k.value,
                    "profile": profile,
                    "mean": float(np.mean(acc)),
                    "std": float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0,
                    "n": len(acc),
                    "relative_cost": float(cost[k.value] / ref),
                }
            )
    return out


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_fitness_curves(run_dirs: list[Path], path: Path) -> bool:
    """Mean per-generation best fitness for each (profile, procedure) search."""
    curves = defaultdict(list)
    for d in run_dirs:
        for hist in sorted(d.glob("*/*/seed*/history.jsonl")):
            lines = [json.loads(x) for x in hist.read_text().splitlines() if x.strip()]
            if lines:
                profile, proc = hist.parts[-4], hist.parts[-3]
                curves[f"{proc} {profile}"].append([rec["best_fitness"] for rec in lines])
        for hist in sorted(d.glob("source/seed*/history.jsonl")):
            lines = [json.loads(x) for x in hist.read_text().splitlines() if x.strip()]
            if lines:
                curves["source"].append([rec["best_fitness"] for rec in lines])
    if not curves:
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(curves):
        n = min(len(c) for c in curves[label])
        mean = np.mean([c[:n] for c in curves[label]], axis=0)
        ax.plot(np.arange(n), mean, marker="o", label=label)
    ax.set_xlabel("generation")
    ax.set_ylabel("best fitness (validation accuracy)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
    return True


def plot_class_counts(run_dirs: list[Path], path: Path) -> bool:
    counts = {}
    for d in run_dirs:
        manifest = d / "manifest.json"
        if manifest.is_file():
            counts.update(json.loads(manifest.read_text()).get("class_counts", {}))
    if not counts:
        return False
    fig, axes = plt.subplots(1, len(counts), figsize=(3 * len(counts), 3), squeeze=False)
    for ax, (label, c) in zip(axes[0], counts.items()):
        ax.bar(np.arange(len(c)), c)
        ax.set_title(label, fontsize=9)
        ax.set_xlabel("class")
    axes[0][0].set_ylabel("training examples")
    fig.tight_layout()
    _save(fig, path)
    return True


def plot_rank_scatter(report: RankReport, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(report.fitness_balanced, report.fitness_imbalanced)
    ax.set_xlabel("accuracy, trained balanced")
    ax.set_ylabel(f"accuracy, trained {report.profile}")
    ax.set_title(f"rho = {report.spearman_rho:.3f}, tau = {report.kendall_tau:.3f}", fontsize=10)
    fig.tight_layout()
    _save(fig, path)


def emit_report(run_dirs, out) -> dict:
    """Write ``table.csv``, ``comparison.csv`` and PNG plots to ``out``; return what was written."""
    run_dirs = [Path(d) for d in run_dirs]
    rows, profiles = collect(run_dirs)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    agg = aggregate(rows, profiles)
    cols = [p for p in profiles if any(r["profile"] == p for r in agg)]
    (out / "table.csv").write_text(table_csv(agg, cols))
    (out / "comparison.csv").write_text(comparison_csv(agg))
    written = {"table": out / "table.csv", "comparison": out / "comparison.csv"}
    if plot_fitness_curves(run_dirs, out / "fitness_curves.png"):
        written["fitness_curves"] = out / "fitness_curves.png"
    if plot_class_counts(run_dirs, out / "class_counts.png"):
        written["class_counts"] = out / "class_counts.png"
    for d in run_dirs:
        for rdir in sorted(d.glob("rank/seed*")):
            report = RankReport.read(rdir)
            path = out / f"rank_scatter_{d.name}_{rdir.name}.png"
            plot_rank_scatter(report, path)
            written[path.stem] = path
    return written
