"""Ensemble summaries, rate regression, and the two-sample KS number.

Reductions are deterministic for a fixed seed manifest: summaries work on
replication-indexed arrays, so the result cannot depend on worker
scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .limitlaw import ks_statistic

__all__ = ["Ensemble", "StatsSummary", "RateFit", "ensemble_stats",
           "rate_regression", "ks_two_sample"]


@dataclass(frozen=True)
class Ensemble:
    """Replication-indexed outcomes plus the seed manifest that produced them."""

    samples: np.ndarray
    seed_manifest: tuple[int, ...]
    label: str = ""

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2:
            raise ValueError("samples must be scalar or vector outcomes")
        if len(self.seed_manifest) != s.shape[0]:
            raise ValueError("seed manifest must cover every sample")
        object.__setattr__(self, "samples", s)

    @property
    def count(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class StatsSummary:
    label: str
    count: int
    mean: np.ndarray
    variance: np.ndarray
    ci_half_width: np.ndarray

    def to_record(self, **extra) -> dict:
        rec = {
            "label": self.label,
            "count": self.count,
            "mean": self.mean.tolist(),
            "var": self.variance.tolist(),
            "ci": self.ci_half_width.tolist(),
        }
        rec.update(extra)
        return rec


def ensemble_stats(e: Ensemble) -> StatsSummary:
    """Per-coordinate mean, unbiased variance, and 95% CI half-width."""
    if e.count < 2:
        raise ValueError("variance needs at least two samples")
    mean = e.samples.mean(axis=0)
    var = e.samples.var(axis=0, ddof=1)
    hw = 1.96 * np.sqrt(var / e.count)
    return StatsSummary(label=e.label, count=e.count, mean=mean,
                        variance=var, ci_half_width=hw)


@dataclass(frozen=True)
class RateFit:
    """Least-squares fit of log error against log n."""

    points: tuple[tuple[float, float], ...]
    slope: float
    intercept: float
    r_squared: float

    def to_record(self, **extra) -> dict:
        rec = {
            "points": [list(p) for p in self.points],
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
        }
        rec.update(extra)
        return rec


def rate_regression(points) -> RateFit:
    """Fit error ~ C * n^slope from (n, error) pairs on log-log scale."""
    pts = [(float(n), float(err)) for n, err in points]
    if len(pts) < 3:
        raise ValueError("rate regression needs at least three points")
    ns = np.array([p[0] for p in pts])
    errs = np.array([p[1] for p in pts])
    if np.any(np.diff(ns) <= 0):
        raise ValueError("n values must be strictly increasing")
    if np.any(errs <= 0):
        raise ValueError("errors must be positive")
    x = np.log(ns)
    y = np.log(errs)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(points=tuple(pts), slope=float(slope),
                   intercept=float(intercept), r_squared=r2)


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample KS statistic and asymptotic p-value (effective-size factor)."""
    return ks_statistic(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
