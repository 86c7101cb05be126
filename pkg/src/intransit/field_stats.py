"""Per-cell, per-timestep statistics of one field on one server partition.

State is kept as one dense array per statistic (structure of arrays) laid
out ``[timestep, local_cell]`` so that a chunk for one timestep touches a
contiguous slice.  The update arithmetic mirrors
:func:`intransit.stats_core.update_moments` and
:func:`intransit.stats_core.rm_update` term for term, vectorised over the
cells of the chunk and over every configured quantile order at once.
"""
from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from .errors import DataQualityError, InsufficientDataError, ProtocolViolationError, ThresholdError
from .stats_core import MomentsAccumulator, QuantileEstimator, StatisticsConfig

MOMENT_STATS = ("mean", "variance", "skewness", "kurtosis", "min", "max")

_ARRAYS = ("count", "mean", "m2", "m3", "m4", "vmin", "vmax", "exceed", "q")


def _fmt(x: float) -> str:
    return repr(float(x))


def statistic_names(cfg: StatisticsConfig) -> list[str]:
    """Every statistic a field maintains, in export order."""
    names = list(MOMENT_STATS)
    names += [f"exceedance_{_fmt(t)}" for t in cfg.thresholds]
    names += [f"quantile_{_fmt(a)}" for a in cfg.quantile_orders]
    return names


def parse_statistic(name: str) -> tuple[str, float | None]:
    """Split ``"quantile_0.95"`` into ``("quantile", 0.95)``; plain moments have no parameter."""
    if name in MOMENT_STATS:
        return name, None
    kind, _, param = name.partition("_")
    if kind in ("quantile", "exceedance") and param:
        try:
            return kind, float(param)
        except ValueError:
            pass
    raise ValueError(f"unknown statistic {name!r}")


class FieldStatistics:
    """Statistics of one named field over a half-open global cell range."""

    def __init__(self, field_name: str, cell_range: tuple[int, int], n_timesteps: int, cfg: StatisticsConfig) -> None:
        start, stop = int(cell_range[0]), int(cell_range[1])
        if not 0 <= start < stop:
            raise ValueError(f"bad cell range {cell_range}")
        if n_timesteps < 1:
            raise ValueError("need at least one timestep")
        self.field_name = field_name
        self.cell_range = (start, stop)
        self.n_timesteps = int(n_timesteps)
        self.cfg = cfg
        self._alphas = np.asarray(cfg.quantile_orders, dtype=np.float64)
        self._thresholds = np.asarray(cfg.thresholds, dtype=np.float64)
        shape = (self.n_timesteps, stop - start)
        self.count = np.zeros(shape, dtype=np.int64)
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)
        self.m3 = np.zeros(shape)
        self.m4 = np.zeros(shape)
        self.vmin = np.full(shape, np.inf)
        self.vmax = np.full(shape, -np.inf)
        self.exceed = np.zeros(shape + (len(self._thresholds),), dtype=np.int64)
        self.q = np.full(shape + (len(self._alphas),), np.nan)
        # step C / n**gamma(n) for n = 1 .. declared_n; index 0 is unused
        n = np.arange(1, cfg.declared_n + 1)
        self._steps = np.concatenate(([np.nan], cfg.gain_c / n ** cfg.schedule.exponent(n, cfg.declared_n)))

    @property
    def n_cells(self) -> int:
        return self.cell_range[1] - self.cell_range[0]

    @property
    def nbytes(self) -> int:
        return sum(getattr(self, name).nbytes for name in _ARRAYS)

    def ingest_chunk(self, timestep: int, global_cell_offset: int, values: Sequence[float] | np.ndarray) -> None:
        """Fold one sample per cell for ``[offset, offset + len(values))`` at ``timestep``."""
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim != 1 or vals.size == 0:
            raise ProtocolViolationError("chunk must be a non-empty 1-D array")
        lo = int(global_cell_offset) - self.cell_range[0]
        hi = lo + vals.size
        if lo < 0 or hi > self.n_cells:
            raise ProtocolViolationError(
                f"cells [{global_cell_offset}, {global_cell_offset + vals.size}) outside partition {self.cell_range}"
            )
        if not 0 <= timestep < self.n_timesteps:
            raise ProtocolViolationError(f"timestep {timestep} outside [0, {self.n_timesteps})")
        if not np.isfinite(vals).all():
            i = int(np.argmax(~np.isfinite(vals)))
            raise DataQualityError(float(vals[i]), cell=int(global_cell_offset) + i, timestep=int(timestep))

        # views into the accumulators, updated in place (m4 before m3 before m2)
        t, s = int(timestep), slice(lo, hi)
        n1 = self.count[t, s].copy()
        mean, m2, m3, m4 = self.mean[t, s], self.m2[t, s], self.m3[t, s], self.m4[t, s]
        vmin, vmax = self.vmin[t, s], self.vmax[t, s]
        n1m = n1 - 1
        delta = vals - mean
        dn = delta / (n1 + 1)
        dn2 = dn * dn
        term1 = delta * dn * n1
        # n^2 - 3n + 3 with n = n1 + 1 is n1 (n1 - 1) + 1
        m4 += term1 * dn2 * (n1 * n1m + 1)
        m4 += 6 * dn2 * m2
        m4 -= 4 * dn * m3
        np.maximum(m4, 0.0, out=m4)
        m3 += term1 * dn * n1m
        m3 -= 3 * dn * m2
        m2 += term1
        np.minimum(vmin, vals, out=vmin)
        np.maximum(vmax, vals, out=vmax)
        mean += dn
        np.maximum(mean, vmin, out=mean)
        np.minimum(mean, vmax, out=mean)
        if self._thresholds.size:
            self.exceed[t, s] += vals[:, None] > self._thresholds

        if self._alphas.size:
            q = self.q[t, s]
            big_n = self.cfg.declared_n
            if n1.max() < big_n:
                step = self._steps[n1]
            else:
                # past the declared size the exponent stays at its final value
                nn = np.maximum(n1, 1)
                step = self.cfg.gain_c / nn ** self.cfg.schedule.exponent(nn, big_n)
            y = vals[:, None]
            updated = np.where(
                y <= q,
                q - step[:, None] * (1.0 - self._alphas),
                q + step[:, None] * self._alphas,
            )
            if self.cfg.clamp:
                updated = np.minimum(np.maximum(updated, vmin[:, None]), vmax[:, None])
            fresh = n1 == 0
            if fresh.any():
                updated[fresh] = y[fresh]
            self.q[t, s] = updated
        self.count[t, s] += 1

    # -- queries ------------------------------------------------------------------

    def _need(self, t: int | slice, k: int) -> None:
        c = self.count[t]
        if c.size == 0 or c.min() < k:
            raise InsufficientDataError(
                f"{self.field_name}: statistic needs >= {k} samples per cell, minimum count is {int(c.min())}"
            )

    def snapshot_statistic(self, stat: str, timestep: int | None = None) -> np.ndarray:
        """Dense per-cell values of ``stat`` at ``timestep`` (all timesteps if ``None``).

        Skewness and kurtosis are NaN where the samples are all equal.
        """
        t = slice(None) if timestep is None else int(timestep)
        if timestep is not None and not 0 <= timestep < self.n_timesteps:
            raise ProtocolViolationError(f"timestep {timestep} outside [0, {self.n_timesteps})")
        kind, param = parse_statistic(stat)
        if kind in ("variance", "skewness", "kurtosis"):
            self._need(t, 2)
        else:
            self._need(t, 1)
        count = self.count[t].astype(np.float64)
        if kind == "mean":
            return self.mean[t].copy()
        if kind == "min":
            return self.vmin[t].copy()
        if kind == "max":
            return self.vmax[t].copy()
        m2 = self.m2[t]
        if kind == "variance":
            return m2 / (count - 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            if kind == "skewness":
                out = np.sqrt(count) * self.m3[t] / m2**1.5
            elif kind == "kurtosis":
                out = count * self.m4[t] / (m2 * m2) - 3.0
            else:
                out = None
        if out is not None:
            return np.where(m2 == 0.0, np.nan, out)
        if kind == "exceedance":
            idx = self._index(self.cfg.thresholds, param, "threshold")
            return self.exceed[t][..., idx] / count
        idx = self._index(self.cfg.quantile_orders, param, "quantile order")
        return self.q[t][..., idx].copy()

    @staticmethod
    def _index(values: tuple[float, ...], param: float, what: str) -> int:
        for i, v in enumerate(values):
            if v == param:
                return i
        raise ThresholdError(f"{what} {param} is not tracked")

    def moments_at(self, cell: int, timestep: int) -> MomentsAccumulator:
        """Scalar view of the accumulator at a global cell (a copy)."""
        t, i = timestep, cell - self.cell_range[0]
        return MomentsAccumulator(
            self.cfg.thresholds,
            int(self.count[t, i]),
            float(self.mean[t, i]),
            float(self.m2[t, i]),
            float(self.m3[t, i]),
            float(self.m4[t, i]),
            float(self.vmin[t, i]),
            float(self.vmax[t, i]),
            [int(c) for c in self.exceed[t, i]],
        )

    def estimators_at(self, cell: int, timestep: int) -> list[QuantileEstimator]:
        t, i = timestep, cell - self.cell_range[0]
        n = int(self.count[t, i])
        if n == 0:
            return []
        cfg = self.cfg
        bounds = (float(self.vmin[t, i]), float(self.vmax[t, i])) if cfg.clamp else (-np.inf, np.inf)
        return [
            QuantileEstimator(a, float(q), n, cfg.declared_n, cfg.gain_c, cfg.schedule, *bounds)
            for a, q in zip(cfg.quantile_orders, self.q[t, i])
        ]

    # -- persistence helpers ------------------------------------------------------------

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in _ARRAYS:
            yield name, getattr(self, name)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in _ARRAYS:
            mine = getattr(self, name)
            theirs = arrays[name]
            if theirs.shape != mine.shape or theirs.dtype != mine.dtype:
                raise ValueError(f"array {name}: expected {mine.shape}/{mine.dtype}, got {theirs.shape}/{theirs.dtype}")
            mine[...] = theirs

    def equals(self, other: "FieldStatistics") -> bool:
        """Bit-exact equality of every array (NaNs compare equal)."""
        return all(
            np.array_equal(a, getattr(other, name), equal_nan=a.dtype.kind == "f") for name, a in self.arrays()
        )


def inter_percentile_range(upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """Upper minus lower percentile map, clamped at zero where independent
    estimates cross."""
    return np.maximum(np.asarray(upper) - np.asarray(lower), 0.0)


def quantile_monotonicity_violations(q: np.ndarray) -> tuple[int, int]:
    """Count positions where estimates decrease along the last (order) axis.

    Returns ``(violations, comparisons)``.
    """
    if q.shape[-1] < 2:
        return 0, 0
    d = np.diff(q, axis=-1)
    return int(np.count_nonzero(d < 0)), int(math.prod(d.shape))
