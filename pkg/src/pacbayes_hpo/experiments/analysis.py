"""Summary statistics over experiment runs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

__all__ = [
    "CorrelationResult",
    "correlate",
    "regularizer_generalization_correlation",
    "correlation_by_seed",
    "generalization_gap",
]


@dataclass(frozen=True)
class CorrelationResult:
    pearson: float
    spearman: float
    n: int
    degenerate: bool
    x: tuple[float, ...] = ()
    y: tuple[float, ...] = ()


def correlate(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """Pearson and Spearman correlation; constant inputs are reported as degenerate (NaN)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be vectors of equal length")
    if x.size < 3:
        raise ValueError("need at least three points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return CorrelationResult(float("nan"), float("nan"), x.size, True, tuple(x), tuple(y))
    return CorrelationResult(float(stats.pearsonr(x, y)[0]), float(stats.spearmanr(x, y)[0]), x.size, False,
                             tuple(x), tuple(y))


def generalization_gap(run, last: int = 5) -> float:
    """Mean of (test loss - validation loss) over the last ``last`` outer steps."""
    recs = run.records[-last:]
    if not recs:
        raise ValueError("run has no records")
    return float(np.mean([r.test_loss - r.val_loss for r in recs]))


def regularizer_generalization_correlation(runs, last: int = 5) -> CorrelationResult:
    """Correlate each run's final regularizer value sqrt(Y) with its generalization gap."""
    if len({r.zeta for r in runs}) < 3:
        raise ValueError("need runs for at least three zeta values")
    runs = sorted(runs, key=lambda r: (r.zeta, r.seed))
    reg = [r.records[-1].sqrt_Y for r in runs]
    gap = [generalization_gap(r, last) for r in runs]
    return correlate(reg, gap)


def correlation_by_seed(runs, last: int = 5) -> dict[int, CorrelationResult]:
    """Grid correlation computed separately for each seed.

    Seeds draw different train/validation splits, which shift the gap by a
    split-dependent offset; pooling them can hide the trend along the grid.
    """
    seeds = sorted({r.seed for r in runs})
    return {s: regularizer_generalization_correlation([r for r in runs if r.seed == s], last) for s in seeds}
