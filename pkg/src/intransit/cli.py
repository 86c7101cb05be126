"""Command-line entry point: ``intransit <command> ...``.

Commands print tab-separated tables with a header row so their output can
go straight into a plotting tool.  Exit codes: 0 success, 2 configuration
error, 3 study failure, 4 I/O or export error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .config import StudyConfig
from .errors import ConfigError, ExportError, StudyFailedError
from .export import Export, export_range, probe, write_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STUDY = 3
EXIT_IO = 4


def _table(out: TextIO, header: Sequence[str], rows) -> None:
    out.write("\t".join(header) + "\n")
    for row in rows:
        out.write("\t".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- commands -------------------------------------------------------------------------------


def cmd_run_study(args, out: TextIO) -> int:
    from .launcher import launch_study

    overrides = {
        "n_sims": args.sims,
        "seed": args.seed,
        "max_concurrent": args.max_concurrent,
        "output_dir": args.output,
        "store_raw": True if args.store_raw else None,
        "log_messages": True if args.log_messages else None,
    }
    try:
        cfg = StudyConfig.load(args.config, **overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = launch_study(args.config, overrides={k: v for k, v in overrides.items() if v is not None})
    export = Export.open(cfg.output_path / "export")
    _table(out, ["key", "value"], [
        ("sims", report.n_sims),
        ("wall_time_s", round(report.wall_time, 3)),
        ("max_running", report.max_running),
        ("retries", sum(report.retries.values())),
        ("server_restarts", report.server_restarts),
        ("statistics", len(export.statistics(None))),
        ("export", str(export.root)),
    ])
    return EXIT_OK


def cmd_validate(args, out: TextIO) -> int:
    from .validation import (
        CALIBRATION_ESTIMATORS,
        TargetDistribution,
        calibration_row,
        robustness_verdict,
        run_distribution_study,
    )

    estimators = tuple(args.estimators.split(",")) if args.estimators else CALIBRATION_ESTIMATORS
    if "empirical" not in estimators:
        estimators = ("empirical",) + estimators
    if args.all_dists:
        dists = list(TargetDistribution)
    else:
        try:
            dists = [TargetDistribution.parse(args.dist)]
        except ValueError as exc:
            print(exc, file=sys.stderr)
            return EXIT_CONFIG
    rows = []
    raw = {}
    for k, dist in enumerate(dists):
        est = run_distribution_study(dist, args.alpha, args.n, args.repeats, args.seed + k, estimators, args.c,
                                     clamp=not args.no_clamp)
        raw[dist.value] = est
        rows.append(calibration_row(dist, est, args.alpha))
    table = []
    for r in rows:
        for name, s in r.summaries.items():
            line = [r.dist.value, name, r.exact, s.mean, s.bias, s.std, s.rmse]
            if args.repeats > 1:
                line += [s.band[0], s.band[1], r.mean_ok(name), r.rmse_ok(name)]
            table.append(line)
    header = ["distribution", "estimator", "exact", "mean", "bias", "std", "rmse"]
    if args.repeats > 1:
        header += ["band_lo", "band_hi", "bias_ok", "rmse_ok"]
    _table(out, header, table)
    if args.all_dists and args.repeats > 1:
        v = robustness_verdict(rows)
        out.write("\n")
        _table(out, ["verdict", "value"], [(k, v[k]) for k in v])
    if args.raw_out:
        # one row per repetition so the estimator densities can be re-plotted
        with open(args.raw_out, "w") as fh:
            _table(fh, ["distribution", "estimator", "repetition", "estimate"],
                   ((d, e, i, float(x)) for d, ests in raw.items() for e, xs in ests.items()
                    for i, x in enumerate(xs)))
    return EXIT_OK


def cmd_probe(args, out: TextIO) -> int:
    export = Export.open(args.export)
    _table(out, ["timestep", "alpha", "value"], probe(export, args.cell, args.field))
    return EXIT_OK


def cmd_export_range(args, out: TextIO) -> int:
    export = Export.open(args.export)
    field = export_range(export, args.lower, args.upper, args.timestep, args.field)
    if args.out:
        np.save(args.out, field)
    _table(out, ["cell", "range"], enumerate(field.tolist()))
    return EXIT_OK


def cmd_export_csv(args, out: TextIO) -> int:
    export = Export.open(args.export)
    stats = args.stats.split(",") if args.stats else None
    n = write_csv(export, args.out, args.field, stats)
    out.write(f"{n} rows written to {args.out}\n")
    return EXIT_OK


def cmd_check(args, out: TextIO) -> int:
    export = Export.open(args.export)
    rows = []
    for field in export.fields:
        counts = export.counts(field)
        mono = export.manifest["monotonicity"].get(field, {})
        rows.append((field, int(counts.min()), int(counts.max()), mono.get("violations", 0),
                     mono.get("comparisons", 0), mono.get("rate", 0.0)))
    _table(out, ["field", "count_min", "count_max", "violations", "comparisons", "rate"], rows)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="intransit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-study", help="run a full ensemble study")
    p.add_argument("--config", required=True)
    p.add_argument("--sims", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-concurrent", type=int, default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--store-raw", action="store_true", help="also keep every raw sample (small studies only)")
    p.add_argument("--log-messages", action="store_true", help="keep a replayable log of applied messages")
    p.set_defaults(func=cmd_run_study)

    p = sub.add_parser("validate", help="quantile estimator calibration study")
    p.add_argument("--dist", default="gaussian")
    p.add_argument("--all-dists", action="store_true")
    p.add_argument("--alpha", type=float, default=0.95)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--seed", type=int, default=2018)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--no-clamp", action="store_true", help="do not project estimates onto the sample range")
    p.add_argument("--estimators", default=None, help="comma list, e.g. empirical,rm-0.6,rm-linear")
    p.add_argument("--raw-out", default=None, help="write every final estimate to this file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("probe", help="all quantiles at one cell over time")
    p.add_argument("--export", required=True)
    p.add_argument("--cell", type=int, required=True)
    p.add_argument("--field", default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("export-range", help="inter-percentile range field at one timestep")
    p.add_argument("--export", required=True)
    p.add_argument("--lower", type=float, required=True)
    p.add_argument("--upper", type=float, required=True)
    p.add_argument("--timestep", type=int, required=True)
    p.add_argument("--field", default=None)
    p.add_argument("--out", default=None, help="also save the field as .npy")
    p.set_defaults(func=cmd_export_range)

    p = sub.add_parser("export-csv", help="tabular (cell, timestep, statistic, value) export")
    p.add_argument("--export", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--field", default=None)
    p.add_argument("--stats", default=None)
    p.set_defaults(func=cmd_export_csv)

    p = sub.add_parser("check", help="count audit and quantile monotonicity report")
    p.add_argument("--export", required=True)
    p.set_defaults(func=cmd_check)
    return ap


def main(argv: Sequence[str] | None = None, out: TextIO | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = out or sys.stdout
    try:
        return args.func(args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StudyFailedError as exc:
        print(f"study failed: {exc}", file=sys.stderr)
        return EXIT_STUDY
    except (ExportError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
