"""On-disk statistic fields and the queries built on them.

Binary field file (little-endian)::

    offset  size  field
    0       4     magic  b"ITQX"
    4       1     format version (1)
    5       3     reserved (zero)
    8       4     header length H
    12      H     UTF-8 JSON header: {"field", "statistic", "dtype", "shape"}
    12+H    ...   raw array, C order, shape [timestep, cell] in global cell order

An export directory holds ``<field>/<statistic>.bin`` for every statistic,
``<field>/count.bin`` and ``manifest.json``; the manifest is written last
and carries ``"complete": true`` for a finished study.
"""
from __future__ import annotations

import csv
import json
import os
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import ExportError
from .field_stats import inter_percentile_range, parse_statistic, quantile_monotonicity_violations

MAGIC = b"ITQX"
VERSION = 1
_HEAD = struct.Struct("<4sB3xI")
MANIFEST = "manifest.json"


def write_field(path: str | os.PathLike, array: np.ndarray, **meta) -> None:
    arr = np.ascontiguousarray(array)
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    header = json.dumps({**meta, "dtype": arr.dtype.str, "shape": list(arr.shape)}).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        fh.write(arr.tobytes())


def read_field(path: str | os.PathLike) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise ExportError(f"{path}: file too short")
    magic, version, hlen = _HEAD.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise ExportError(f"{path}: not a version-{VERSION} field file")
    meta = json.loads(raw[_HEAD.size : _HEAD.size + hlen])
    dtype = np.dtype(meta["dtype"])
    shape = tuple(meta["shape"])
    body = raw[_HEAD.size + hlen :]
    if len(body) != dtype.itemsize * int(np.prod(shape)):
        raise ExportError(f"{path}: payload size does not match header")
    return meta, np.frombuffer(body, dtype=dtype).reshape(shape)


def write_export(
    out_dir: str | os.PathLike,
    fields: Mapping[str, Mapping[str, np.ndarray]],
    counts: Mapping[str, np.ndarray],
    manifest: dict,
) -> Path:
    """Write every ``fields[field][statistic]`` array, then the manifest.

    The directory is assembled under a temporary name and renamed into
    place, so readers never observe a half-written export.
    """
    out = Path(out_dir)
    tmp = out.with_name(out.name + ".tmp")
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    violations = {}
    for fname, stats in fields.items():
        (tmp / fname).mkdir()
        for stat, arr in stats.items():
            write_field(tmp / fname / f"{stat}.bin", arr, field=fname, statistic=stat)
        write_field(tmp / fname / "count.bin", counts[fname], field=fname, statistic="count")
        q = _quantile_stack(stats)
        if q is not None:
            bad, total = quantile_monotonicity_violations(q)
            violations[fname] = {"violations": bad, "comparisons": total, "rate": bad / total if total else 0.0}
    manifest = {**manifest, "fields": list(fields), "statistics": {f: list(s) for f, s in fields.items()},
                "monotonicity": violations}
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1))
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)
    return out


def _quantile_stack(stats: Mapping[str, np.ndarray]) -> np.ndarray | None:
    qs = sorted((parse_statistic(n)[1], a) for n, a in stats.items() if n.startswith("quantile_"))
    if not qs:
        return None
    return np.stack([a for _, a in qs], axis=-1)


@dataclass
class Export:
    """Read-only view of an export directory."""

    root: Path
    manifest: dict

    @classmethod
    def open(cls, path: str | os.PathLike, *, require_complete: bool = True) -> "Export":
        root = Path(path)
        try:
            manifest = json.loads((root / MANIFEST).read_text())
        except FileNotFoundError:
            raise ExportError(f"{root}: no manifest, export missing or incomplete") from None
        if require_complete and not manifest.get("complete"):
            raise ExportError(f"{root}: export is not complete")
        return cls(root, manifest)

    @property
    def fields(self) -> list[str]:
        return list(self.manifest["fields"])

    def statistics(self, field: str) -> list[str]:
        return list(self.manifest["statistics"][self._field(field)])

    def _field(self, field: str | None) -> str:
        if field is None:
            return self.fields[0]
        if field not in self.manifest["fields"]:
            raise ExportError(f"unknown field {field!r}")
        return field

    def load(self, statistic: str, field: str | None = None) -> np.ndarray:
        """Array of shape ``[timestep, cell]``."""
        field = self._field(field)
        path = self.root / field / f"{statistic}.bin"
        if not path.exists():
            raise ExportError(f"statistic {statistic!r} not exported for field {field!r}")
        return read_field(path)[1]

    def counts(self, field: str | None = None) -> np.ndarray:
        return read_field(self.root / self._field(field) / "count.bin")[1]

    def quantile_orders(self, field: str | None = None) -> list[tuple[float, str]]:
        names = [n for n in self.statistics(self._field(field)) if n.startswith("quantile_")]
        return sorted((parse_statistic(n)[1], n) for n in names)

    def quantile_name(self, alpha: float, field: str | None = None) -> str:
        for a, name in self.quantile_orders(field):
            if abs(a - alpha) < 1e-12:
                return name
        raise ExportError(f"no quantile of order {alpha} in export")


def probe(export: Export, cell: int, field: str | None = None) -> list[tuple[int, float, float]]:
    """Rows ``(timestep, alpha, value)`` for every exported quantile at one cell."""
    n_cells = export.manifest["n_cells"]
    if not 0 <= cell < n_cells:
        raise ExportError(f"cell {cell} outside [0, {n_cells})")
    rows = []
    series = [(a, export.load(name, field)[:, cell]) for a, name in export.quantile_orders(field)]
    n_t = export.manifest["n_timesteps"]
    for t in range(n_t):
        rows += [(t, a, float(s[t])) for a, s in series]
    return rows


def export_range(export: Export, lower: float, upper: float, timestep: int, field: str | None = None) -> np.ndarray:
    """Per-cell ``q_upper - q_lower`` at one timestep, clamped at zero."""
    if not 0 <= timestep < export.manifest["n_timesteps"]:
        raise ExportError(f"timestep {timestep} outside the study")
    hi = export.load(export.quantile_name(upper, field), field)[timestep]
    lo = export.load(export.quantile_name(lower, field), field)[timestep]
    return inter_percentile_range(hi, lo)


def iter_rows(export: Export, field: str | None = None, statistics: Iterable[str] | None = None) -> Iterator[tuple]:
    """``(cell, timestep, statistic, value)`` rows, one per exported value."""
    names = list(statistics) if statistics is not None else export.statistics(field)
    for name in names:
        arr = export.load(name, field)
        for t in range(arr.shape[0]):
            for c, v in enumerate(arr[t].tolist()):
                yield c, t, name, v


def write_csv(export: Export, path: str | os.PathLike, field: str | None = None,
              statistics: Iterable[str] | None = None) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "timestep", "statistic", "value"])
        for row in iter_rows(export, field, statistics):
            w.writerow((row[0], row[1], row[2], repr(row[3])))
            n += 1
    return n
