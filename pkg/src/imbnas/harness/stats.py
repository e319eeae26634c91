"""Rank correlation and paired comparisons, computed directly at desk scale."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats as sps


class UndefinedCorrelation(ValueError):
    pass


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx, dy = x - x.mean(), y - y.mean()
    return float((dx * dy).sum() / math.sqrt((dx * dx).sum() * (dy * dy).sum()))


def rank_correlation(scores_a: Sequence[float], scores_b: Sequence[float]) -> tuple[float, float]:
    """(Spearman rho, Kendall tau-b), both by direct computation over all pairs."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if len(a) != len(b):
        raise UndefinedCorrelation(f"length mismatch ({len(a)} vs {len(b)})")
    if len(a) < 2:
        raise UndefinedCorrelation("need at least two observations")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedCorrelation("correlation is undefined for a constant sequence")
    rho = _pearson(average_ranks(a), average_ranks(b))

    concordant = discordant = ties_a = ties_b = 0
    n = len(a)
    for i in range(n):
        for j in range(i + 1, n):
            da, db = a[i] - a[j], b[i] - b[j]
            if da == 0 and db == 0:
                ties_a += 1
                ties_b += 1
            elif da == 0:
                ties_a += 1
            elif db == 0:
                ties_b += 1
            elif (da > 0) == (db > 0):
                concordant += 1
            else:
                discordant += 1
    pairs = n * (n - 1) // 2
    tau = (concordant - discordant) / math.sqrt((pairs - ties_a) * (pairs - ties_b))
    return min(1.0, max(-1.0, rho)), min(1.0, max(-1.0, tau))


@dataclass(frozen=True)
class PairedComparison:
    mean_a: float
    mean_b: float
    mean_diff: float
    t_stat: float
    p_worse: float  # one-sided p-value for "a is worse than b"
    alpha: float

    @property
    def non_inferior(self) -> bool:
        return self.p_worse >= self.alpha


def paired_one_sided(a: Sequence[float], b: Sequence[float], alpha: float = 0.1) -> PairedComparison:
    """Paired t-test of H1: mean(a - b) < 0.

    ``non_inferior`` holds when that alternative is not supported at ``alpha``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b) or len(a) < 2:
        raise ValueError("paired comparison needs two equal-length samples of size >= 2")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        t = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        p = 1.0 if mean >= 0.0 else 0.0
    else:
        t = mean / (sd / math.sqrt(len(d)))
        p = float(sps.t.cdf(t, df=len(d) - 1))
    return PairedComparison(float(a.mean()), float(b.mean()), mean, t, p, alpha)
