"""Scoring rules for probabilistic runoff predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

SQRT_PI = math.sqrt(math.pi)


def rmse(pairs) -> float:
    """Root mean squared error over (prediction, observed) pairs."""
    arr = np.asarray(list(pairs), dtype=float)
    if arr.size == 0:
        raise ValueError("rmse needs at least one (prediction, observation) pair")
    diff = arr[:, 0] - arr[:, 1]
    return float(np.sqrt(np.mean(diff ** 2)))


def crps_gaussian(mean: float, sd: float, observed: float) -> float:
    """CRPS of a Gaussian forecast, closed form.

    sigma [z(2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi)] with z = (y - mu)/sigma;
    the sd -> 0 limit is the absolute error of the point forecast.
    """
    if sd < 0:
        raise ValueError(f"sd must be nonnegative, got {sd}")
    if sd == 0.0:
        return abs(observed - mean)
    z = (observed - mean) / sd
    return float(sd * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - 1.0 / SQRT_PI))


def coverage(intervals, observations) -> float:
    """Fraction of observations inside their [lo, hi] intervals."""
    intervals = list(intervals)
    observations = list(observations)
    if len(intervals) != len(observations):
        raise ValueError(f"{len(intervals)} intervals vs {len(observations)} observations")
    if not observations:
        raise ValueError("coverage needs at least one pair")
    hits = sum(1 for (lo, hi), y in zip(intervals, observations) if lo <= y <= hi)
    return hits / len(observations)


@dataclass
class TargetScore:
    target_id: str
    n: int
    rmse: float
    crps: float
    coverage: float


@dataclass
class ScoreReport:
    """Per-target scores plus averages over targets."""

    scores: list[TargetScore] = field(default_factory=list)
    failed_targets: list[str] = field(default_factory=list)
    label: str = ""

    def add(self, score: TargetScore) -> None:
        self.scores.append(score)

    @property
    def mean_rmse(self) -> float:
        return float(np.mean([s.rmse for s in self.scores])) if self.scores else math.nan

    @property
    def mean_crps(self) -> float:
        return float(np.mean([s.crps for s in self.scores])) if self.scores else math.nan

    @property
    def mean_coverage(self) -> float:
        return float(np.mean([s.coverage for s in self.scores])) if self.scores else math.nan

    def overall_coverage(self) -> float:
        n = sum(s.n for s in self.scores)
        if n == 0:
            return math.nan
        return float(sum(s.coverage * s.n for s in self.scores) / n)

    def as_rows(self) -> list[dict]:
        rows = [{"target": s.target_id, "n": s.n, "rmse": s.rmse,
                 "crps": s.crps, "coverage": s.coverage} for s in self.scores]
        rows.append({"target": "average", "n": sum(s.n for s in self.scores),
                     "rmse": self.mean_rmse, "crps": self.mean_crps,
                     "coverage": self.mean_coverage})
        return rows


def score_target(target_id: str, predictions, observations) -> TargetScore:
    """Aggregate scores for one target over matched prediction/observation lists."""
    predictions = list(predictions)
    observations = list(observations)
    if len(predictions) != len(observations):
        raise ValueError("prediction/observation length mismatch")
    pairs = [(p.mean, y) for p, y in zip(predictions, observations)]
    crps_vals = [crps_gaussian(p.mean, p.sd_predictive, y)
                 for p, y in zip(predictions, observations)]
    cov = coverage([(p.lo, p.hi) for p in predictions], observations)
    return TargetScore(target_id=target_id, n=len(observations),
                       rmse=rmse(pairs), crps=float(np.mean(crps_vals)), coverage=cov)
