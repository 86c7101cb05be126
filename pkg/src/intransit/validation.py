"""Calibration harness for the Robbins-Monro quantile estimator.

Every repetition draws its sample from its own Philox counter-based stream,
keyed by ``(seed, repetition)``, and all estimators consume that same
sample, so estimator comparisons are paired.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Mapping, Sequence

import numpy as np

from .stats_core import ConstantGamma, LinearGamma, Schedule, empirical_quantiles

_NORMAL = NormalDist()


class TargetDistribution(enum.Enum):
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"
    TRIANGULAR = "triangular"
    EXPONENTIAL = "exponential"

    @classmethod
    def parse(cls, name: str) -> "TargetDistribution":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown distribution {name!r}; choose from {[d.value for d in cls]}") from None

    def exact_quantile(self, alpha: float) -> float:
        if not 0 < alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if self is TargetDistribution.GAUSSIAN:
            return _NORMAL.inv_cdf(alpha)
        if self is TargetDistribution.UNIFORM:
            return alpha
        if self is TargetDistribution.TRIANGULAR:
            return math.sqrt(alpha / 2) if alpha <= 0.5 else 1 - math.sqrt((1 - alpha) / 2)
        return -math.log1p(-alpha)

    def pdf(self, y: float) -> float:
        if self is TargetDistribution.GAUSSIAN:
            return _NORMAL.pdf(y)
        if self is TargetDistribution.UNIFORM:
            return 1.0 if 0 <= y <= 1 else 0.0
        if self is TargetDistribution.TRIANGULAR:
            return 4 * y if 0 <= y <= 0.5 else (4 * (1 - y) if 0.5 < y <= 1 else 0.0)
        return math.exp(-y) if y >= 0 else 0.0

    def interdecile_range(self) -> float:
        return self.exact_quantile(0.9) - self.exact_quantile(0.1)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self is TargetDistribution.GAUSSIAN:
            return rng.standard_normal(size)
        if self is TargetDistribution.UNIFORM:
            return rng.random(size)
        if self is TargetDistribution.TRIANGULAR:
            return rng.triangular(0.0, 0.5, 1.0, size)
        return rng.exponential(1.0, size)


def asymptotic_std(dist: TargetDistribution, alpha: float, capital_n: int) -> float:
    """Large-sample spread of the order-statistic estimator."""
    f = dist.pdf(dist.exact_quantile(alpha))
    return math.sqrt(alpha * (1 - alpha) / ((capital_n + 2) * f * f))


# -- estimators ---------------------------------------------------------------------------

EMPIRICAL = "empirical"
CALIBRATION_ESTIMATORS = ("empirical", "rm-0.5", "rm-0.7", "rm-0.9", "rm-linear")


def parse_estimator(name: str) -> Schedule | None:
    """``None`` for the empirical estimator, otherwise the RM step schedule."""
    if name == EMPIRICAL:
        return None
    if name == "rm-linear":
        return LinearGamma()
    if name.startswith("rm-"):
        return ConstantGamma(float(name[3:]))
    raise ValueError(f"unknown estimator {name!r}")


def repetition_stream(seed: int, repetition: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), repetition]))


def draw_samples(dist: TargetDistribution, n_repeat: int, capital_n: int, seed: int) -> np.ndarray:
    """``[repetition, n]`` sample matrix, row ``r`` from stream ``(seed, r)``."""
    return np.stack([dist.sample(repetition_stream(seed, r), capital_n) for r in range(n_repeat)])


def rm_paths(samples: np.ndarray, alpha: float, schedule: Schedule, c: float = 1.0,
             keep_path: bool = False, clamp: bool = True) -> np.ndarray:
    """Run the recursion on every row of ``samples`` at once.

    ``clamp`` projects each estimate onto the running sample range, as the
    server does by default.  Returns final estimates, or the whole
    ``[row, n]`` path when ``keep_path``.
    """
    rows, capital_n = samples.shape
    q = samples[:, 0].copy()
    lo, hi = q.copy(), q.copy()
    path = np.empty_like(samples) if keep_path else None
    if keep_path:
        path[:, 0] = q
    n = np.arange(1, capital_n, dtype=np.float64)
    steps = c / n ** schedule.exponent(n, capital_n)
    for i in range(1, capital_n):
        y = samples[:, i]
        step = steps[i - 1]
        q = np.where(y <= q, q - step * (1.0 - alpha), q + step * alpha)
        if clamp:
            np.minimum(lo, y, out=lo)
            np.maximum(hi, y, out=hi)
            q = np.minimum(np.maximum(q, lo), hi)
        if keep_path:
            path[:, i] = q
    return path if keep_path else q


def run_trajectories(dist: TargetDistribution, estimator: str, n_traj: int, capital_n: int, alpha: float,
                     seed: int, c: float = 1.0, clamp: bool = True) -> np.ndarray:
    """``[n_traj, capital_n]`` estimate paths ``q(1) .. q(N)``."""
    schedule = parse_estimator(estimator)
    if schedule is None:
        raise ValueError("trajectories are only defined for Robbins-Monro estimators")
    return rm_paths(draw_samples(dist, n_traj, capital_n, seed), alpha, schedule, c, keep_path=True, clamp=clamp)


def run_distribution_study(dist: TargetDistribution, alpha: float, capital_n: int, n_repeat: int, seed: int,
                           estimators: Sequence[str] = CALIBRATION_ESTIMATORS, c: float = 1.0,
                           clamp: bool = True) -> dict[str, np.ndarray]:
    """Final estimate of every estimator over ``n_repeat`` paired repetitions."""
    samples = draw_samples(dist, n_repeat, capital_n, seed)
    out = {}
    for name in estimators:
        schedule = parse_estimator(name)
        if schedule is None:
            out[name] = empirical_quantiles(samples, [alpha], axis=1)[:, 0]
        else:
            out[name] = rm_paths(samples, alpha, schedule, c, clamp=clamp)
    return out


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    bias: float
    std: float
    rmse: float
    band: tuple[float, float]


def summarize(estimates: Sequence[float] | np.ndarray, exact: float, band: tuple[float, float] = (0.05, 0.95)
              ) -> Summary:
    """Bias, spread (population std), RMSE and a central quantile band of the estimates."""
    x = np.asarray(estimates, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no estimates to summarize")
    err = x - exact
    lo, hi = np.quantile(x, band)
    return Summary(int(x.size), float(x.mean()), float(err.mean()), float(x.std()),
                   float(math.sqrt(np.mean(err * err))), (float(lo), float(hi)))


def scale_matched_gain(variance: np.ndarray) -> float:
    """Gain ``C`` of the order of the field's variations: the median per-position std.

    ``C = 1`` suits unit-scale variables; a field whose ensemble spread is
    ``1e-2`` wants steps a hundred times smaller.  ``variance`` is any
    streamed variance field, e.g. from a short pilot study.
    """
    std = np.sqrt(np.maximum(np.asarray(variance, dtype=np.float64), 0.0))
    c = float(np.median(std))
    if not c > 0:
        raise ValueError("pilot field has no spread; cannot scale the gain")
    return c


# -- calibration verdicts -------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationRow:
    dist: TargetDistribution
    exact: float
    summaries: dict[str, Summary]
    mean_tolerance: float

    def mean_ok(self, estimator: str) -> bool:
        return abs(self.summaries[estimator].mean - self.exact) <= self.mean_tolerance

    def rmse_ok(self, estimator: str, factor: float = 2.0) -> bool:
        return self.summaries[estimator].rmse <= factor * self.summaries[EMPIRICAL].rmse


def calibration_row(dist: TargetDistribution, estimates: Mapping[str, np.ndarray], alpha: float) -> CalibrationRow:
    """Summaries plus the bias tolerance ``3 sd_emp / sqrt(R) + 0.05 * interdecile``."""
    exact = dist.exact_quantile(alpha)
    summaries = {k: summarize(v, exact) for k, v in estimates.items()}
    emp = summaries[EMPIRICAL]
    tol = 3 * emp.std / math.sqrt(emp.n) + 0.05 * dist.interdecile_range()
    return CalibrationRow(dist, exact, summaries, tol)


def calibration_table(alpha: float = 0.95, capital_n: int = 1000, n_repeat: int = 200, seed: int = 2018,
                      dists: Sequence[TargetDistribution] = tuple(TargetDistribution),
                      estimators: Sequence[str] = CALIBRATION_ESTIMATORS, clamp: bool = True
                      ) -> list[CalibrationRow]:
    rows = []
    for k, dist in enumerate(dists):
        est = run_distribution_study(dist, alpha, capital_n, n_repeat, seed + k, estimators, clamp=clamp)
        rows.append(calibration_row(dist, est, alpha))
    return rows


def robustness_verdict(rows: Sequence[CalibrationRow]) -> dict[str, object]:
    """Which RM estimators meet the RMSE bound on every distribution, and the ordering facts."""
    rm = [e for e in rows[0].summaries if e != EMPIRICAL]
    passes_all = {e: all(r.rmse_ok(e) for r in rows) for e in rm}
    constant = [e for e in ("rm-0.5", "rm-0.7", "rm-0.9") if e in rm]
    half_best = [r.dist.value for r in rows
                 if constant and all(r.summaries["rm-0.5"].rmse < r.summaries[e].rmse for e in constant[1:])]
    half_not_best = [r.dist.value for r in rows
                     if constant and any(r.summaries["rm-0.5"].rmse > r.summaries[e].rmse for e in constant[1:])]
    linear_never_worst = "rm-linear" in rm and all(
        r.summaries["rm-linear"].rmse < max(r.summaries[e].rmse for e in rm) for r in rows
    )
    return {
        "passes_all": passes_all,
        "constant_universal": [e for e in constant if passes_all[e]],
        "gamma_0.5_best_on": half_best,
        "gamma_0.5_beaten_on": half_not_best,
        "linear_never_worst": linear_never_worst,
    }
