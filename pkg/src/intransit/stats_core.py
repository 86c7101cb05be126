"""One-pass statistics for a single scalar stream.

Moments use the incremental centered-moment updates (Welford for the
variance, extended to the 3rd and 4th centered sums) and the matching
pairwise merge.  Quantiles use the Robbins-Monro recursion

    q(n+1) = q(n) - C / n**gamma(n) * (1{y <= q(n)} - alpha)

seeded with the first observation, where ``gamma(n)`` is either a constant
or the linear ramp from 0.1 at n = 1 to 1.0 at the declared sample size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ConfigError, DataQualityError, InsufficientDataError, ThresholdError

__all__ = [
    "ConstantGamma",
    "LinearGamma",
    "MomentsAccumulator",
    "QuantileEstimator",
    "StatisticsConfig",
    "empirical_quantile",
    "empirical_quantiles",
    "exceedance_probability",
    "gamma_linear",
    "init_quantile",
    "merge_moments",
    "parse_schedule",
    "percentile_orders",
    "rm_update",
    "update_moments",
]


def _check_finite(y: float) -> float:
    y = float(y)
    if not math.isfinite(y):
        raise DataQualityError(y)
    return y


# -- step-exponent schedules -----------------------------------------------------


def gamma_linear(n, capital_n: int):
    """Linear step exponent, 0.1 at ``n == 1`` rising to 1.0 at ``n == capital_n``.

    Works elementwise on integer arrays.  Values of ``n`` past ``capital_n``
    are clamped to 1.0 so that studies extended after a restart keep a
    well-defined (and most conservative) step.
    """
    if capital_n < 2:
        raise ConfigError(f"declared sample size must be >= 2, got {capital_n}")
    if isinstance(n, np.ndarray):
        ramp = 0.1 + 0.9 * (np.minimum(n, capital_n) - 1) / (capital_n - 1)
        return np.where(n >= capital_n, 1.0, ramp)
    if n >= capital_n:
        return 1.0
    return 0.1 + 0.9 * (n - 1) / (capital_n - 1)


@dataclass(frozen=True)
class LinearGamma:
    def exponent(self, n, capital_n: int):
        return gamma_linear(n, capital_n)

    def __str__(self) -> str:
        return "linear"


@dataclass(frozen=True)
class ConstantGamma:
    value: float

    def __post_init__(self) -> None:
        if not 0.0 < self.value <= 1.0:
            raise ConfigError(f"constant gamma must lie in (0, 1], got {self.value}")

    def exponent(self, n, capital_n: int):
        if isinstance(n, np.ndarray):
            return np.full(n.shape, self.value)
        return self.value

    def __str__(self) -> str:
        return f"constant:{self.value:g}"


Schedule = Union[LinearGamma, ConstantGamma]


def parse_schedule(text: str | float | Schedule) -> Schedule:
    """Parse ``"linear"``, ``"constant:0.7"`` or a bare number into a schedule."""
    if isinstance(text, (LinearGamma, ConstantGamma)):
        return text
    if isinstance(text, (int, float)):
        return ConstantGamma(float(text))
    s = text.strip().lower()
    if s == "linear":
        return LinearGamma()
    if s.startswith("constant:"):
        s = s.split(":", 1)[1]
    try:
        return ConstantGamma(float(s))
    except ValueError:
        raise ConfigError(f"unknown gamma schedule {text!r}") from None


def percentile_orders() -> tuple[float, ...]:
    """The 99 orders 0.01, 0.02, ..., 0.99."""
    return tuple(k / 100 for k in range(1, 100))


@dataclass(frozen=True)
class StatisticsConfig:
    """Which statistics to maintain and how the quantile recursion is tuned."""

    declared_n: int
    quantile_orders: tuple[float, ...] = field(default_factory=percentile_orders)
    thresholds: tuple[float, ...] = ()
    gain_c: float = 1.0
    schedule: Schedule = field(default_factory=LinearGamma)
    clamp: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "quantile_orders", tuple(float(a) for a in self.quantile_orders))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "schedule", parse_schedule(self.schedule))
        orders = self.quantile_orders
        if any(not 0.0 < a < 1.0 for a in orders):
            raise ConfigError("quantile orders must lie in (0, 1)")
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise ConfigError("quantile orders must be strictly increasing")
        if len(set(self.thresholds)) != len(self.thresholds):
            raise ConfigError("duplicate exceedance thresholds")
        if not (self.gain_c > 0 and math.isfinite(self.gain_c)):
            raise ConfigError(f"gain constant must be positive, got {self.gain_c}")
        if self.declared_n < 2:
            raise ConfigError(f"declared sample size must be >= 2, got {self.declared_n}")


# -- moments ---------------------------------------------------------------------


@dataclass
class MomentsAccumulator:
    """Count, mean, centered power sums, extrema and exceedance counters."""

    thresholds: tuple[float, ...] = ()
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    m3: float = 0.0
    m4: float = 0.0
    min: float = math.inf
    max: float = -math.inf
    exceed_counts: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if not self.exceed_counts:
            self.exceed_counts = [0] * len(self.thresholds)

    @classmethod
    def from_values(cls, values: Iterable[float], thresholds: Sequence[float] = ()) -> "MomentsAccumulator":
        acc = cls(tuple(thresholds))
        for y in values:
            update_moments(acc, y)
        return acc

    def _require(self, k: int) -> None:
        if self.count < k:
            raise InsufficientDataError(f"need at least {k} samples, have {self.count}")

    @property
    def variance(self) -> float:
        """Unbiased sample variance."""
        self._require(2)
        return self.m2 / (self.count - 1)

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    @property
    def skewness(self) -> float:
        """Sample skewness g1 = sqrt(n) m3 / m2**1.5 (NaN for a constant stream)."""
        self._require(2)
        if self.m2 == 0.0:
            return math.nan
        return math.sqrt(self.count) * self.m3 / self.m2**1.5

    @property
    def kurtosis(self) -> float:
        """Excess kurtosis g2 = n m4 / m2**2 - 3 (NaN for a constant stream)."""
        self._require(2)
        if self.m2 == 0.0:
            return math.nan
        return self.count * self.m4 / (self.m2 * self.m2) - 3.0


def update_moments(acc: MomentsAccumulator, y: float) -> MomentsAccumulator:
    """Fold one sample into ``acc`` in place and return it."""
    y = _check_finite(y)
    n1 = acc.count
    n = n1 + 1
    delta = y - acc.mean
    dn = delta / n
    dn2 = dn * dn
    term1 = delta * dn * n1
    acc.m4 = max(acc.m4 + term1 * dn2 * (n * n - 3 * n + 3) + 6 * dn2 * acc.m2 - 4 * dn * acc.m3, 0.0)
    acc.m3 = acc.m3 + term1 * dn * (n - 2) - 3 * dn * acc.m2
    acc.m2 = acc.m2 + term1
    acc.count = n
    if y < acc.min:
        acc.min = y
    if y > acc.max:
        acc.max = y
    # rounding can push the running mean a hair outside the observed range
    acc.mean = min(max(acc.mean + dn, acc.min), acc.max)
    for i, t in enumerate(acc.thresholds):
        if y > t:
            acc.exceed_counts[i] += 1
    return acc


def merge_moments(a: MomentsAccumulator, b: MomentsAccumulator) -> MomentsAccumulator:
    """Combine accumulators built over disjoint samples into a new one."""
    if a.thresholds != b.thresholds:
        raise ThresholdError(f"threshold lists differ: {a.thresholds} vs {b.thresholds}")
    if b.count == 0:
        return MomentsAccumulator(a.thresholds, a.count, a.mean, a.m2, a.m3, a.m4, a.min, a.max, list(a.exceed_counts))
    if a.count == 0:
        return merge_moments(b, a)
    na, nb = a.count, b.count
    n = na + nb
    delta = b.mean - a.mean
    d2 = delta * delta
    mean = a.mean + delta * nb / n
    m2 = a.m2 + b.m2 + d2 * na * nb / n
    m3 = a.m3 + b.m3 + d2 * delta * na * nb * (na - nb) / (n * n) + 3.0 * delta * (na * b.m2 - nb * a.m2) / n
    m4 = (
        a.m4
        + b.m4
        + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
        + 6.0 * d2 * (na * na * b.m2 + nb * nb * a.m2) / (n * n)
        + 4.0 * delta * (na * b.m3 - nb * a.m3) / n
    )
    lo, hi = min(a.min, b.min), max(a.max, b.max)
    return MomentsAccumulator(
        a.thresholds,
        n,
        min(max(mean, lo), hi),
        m2,
        m3,
        max(m4, 0.0),
        lo,
        hi,
        [x + y for x, y in zip(a.exceed_counts, b.exceed_counts)],
    )


def exceedance_probability(acc: MomentsAccumulator, threshold: float) -> float:
    """Fraction of samples strictly above ``threshold``."""
    try:
        i = acc.thresholds.index(float(threshold))
    except ValueError:
        raise ThresholdError(f"threshold {threshold} is not tracked") from None
    if acc.count == 0:
        raise InsufficientDataError("empty accumulator")
    return acc.exceed_counts[i] / acc.count


# -- Robbins-Monro quantiles -------------------------------------------------------


@dataclass
class QuantileEstimator:
    alpha: float
    q: float
    n: int
    capital_n: int
    c: float = 1.0
    schedule: Schedule = field(default_factory=LinearGamma)
    # running sample range the estimate is projected onto; infinite when projection is off
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.c > 0:
            raise ConfigError(f"gain constant must be positive, got {self.c}")
        if self.n < 1:
            raise ConfigError("estimator must be seeded with one observation")

    def step_size(self) -> float:
        """Magnitude C / n**gamma(n) of the next update."""
        return self.c / self.n ** self.schedule.exponent(self.n, self.capital_n)


def init_quantile(alpha: float, cfg: StatisticsConfig, y1: float) -> QuantileEstimator:
    y1 = _check_finite(y1)
    bounds = (y1, y1) if cfg.clamp else (-math.inf, math.inf)
    return QuantileEstimator(alpha, y1, 1, cfg.declared_n, cfg.gain_c, cfg.schedule, *bounds)


def rm_update(est: QuantileEstimator, y: float) -> QuantileEstimator:
    """Apply one Robbins-Monro step in place; ties count as ``y <= q``.

    With finite bounds the result is projected onto the running sample range
    ``[min Y, max Y]``, which holds every sample quantile.  The projection only
    shortens steps and keeps a constant stream at its value exactly.
    """
    y = _check_finite(y)
    step = est.step_size()
    if y <= est.q:
        q = est.q - step * (1.0 - est.alpha)
    else:
        q = est.q + step * est.alpha
    if math.isfinite(est.lo):
        est.lo, est.hi = min(est.lo, y), max(est.hi, y)
        q = min(max(q, est.lo), est.hi)
    est.q = q
    est.n += 1
    return est


# -- batch oracle --------------------------------------------------------------


def _rank_index(alpha: float, n: int) -> int:
    # 0-based index of order statistic floor(alpha n) + 1, capped at n
    return min(math.floor(alpha * n), n - 1)


def empirical_quantile(sample: Sequence[float], alpha: float) -> float:
    """Order statistic ``Y_(floor(alpha N) + 1)`` of the sample."""
    if len(sample) == 0:
        raise InsufficientDataError("empty sample")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    data = sorted(_check_finite(y) for y in sample)
    return data[_rank_index(alpha, len(data))]


def empirical_quantiles(samples: np.ndarray, alphas: Sequence[float], axis: int = 0) -> np.ndarray:
    """Vectorised :func:`empirical_quantile` along ``axis``.

    The quantile axis is appended last in the result.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[axis]
    if n == 0:
        raise InsufficientDataError("empty sample")
    ordered = np.sort(samples, axis=axis)
    idx = [_rank_index(a, n) for a in alphas]
    return np.moveaxis(np.take(ordered, idx, axis=axis), axis, -1)
