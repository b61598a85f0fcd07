"""Command-line entry point: ``zjack simulate | hist | sweep``.

Exit codes: 0 success, 2 configuration error, 3 when some estimator lost
more than 20% of its trials to solver failures (the CSV is still written).
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError
from .sim import (
    FAMILIES,
    ExperimentConfig,
    dump_histogram,
    preset_grid,
    run_experiment,
    write_histogram,
    write_rows,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UNRELIABLE = 3

_FAMILY_CHOICES = [f.replace("_", "-") for f in FAMILIES]


def _family(s: str) -> str:
    f = s.replace("-", "_")
    if f not in FAMILIES:
        raise argparse.ArgumentTypeError(f"unknown family {s!r}; choose from {', '.join(_FAMILY_CHOICES)}")
    return f


def _estimators(s: str) -> tuple[str, ...]:
    out = tuple(e.strip() for e in s.split(",") if e.strip())
    if not out:
        raise argparse.ArgumentTypeError("empty estimator list")
    return out


def build_parser() -> argparse.ArgumentParser:
    # argparse exits with 2 on usage errors, matching the config-error code
    p = argparse.ArgumentParser(prog="zjack", description="Jackknife-corrected Z-estimator simulations.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dims=True):
        sp.add_argument("--family", type=_family, required=True, metavar="{" + ",".join(_FAMILY_CHOICES) + "}")
        if dims:
            sp.add_argument("--n", type=int, required=True)
            g = sp.add_mutually_exclusive_group(required=True)
            g.add_argument("--dim", type=int)
            g.add_argument("--dim-exponent", type=float)
        sp.add_argument("--trials", type=int, default=1000)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--bootstrap-replicates", type=int, default=500)
        sp.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: $ZJACK_WORKERS or the CPU count)")
        sp.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="run one experiment and write the metrics CSV")
    common(s)
    s.add_argument("--estimators", type=_estimators, default=None,
                   help="comma-separated, e.g. plugin,jackknife,kline")

    h = sub.add_parser("hist", help="per-trial rescaled errors for one estimator")
    common(h)
    h.add_argument("--estimator", required=True)

    w = sub.add_parser("sweep", help="run a preset grid of experiments")
    common(w, dims=False)
    w.add_argument("--preset", choices=["fixed-n", "vary-n"], required=True)
    w.add_argument("--estimators", type=_estimators, default=None)
    return p


def _config(args, **over) -> ExperimentConfig:
    kw = dict(family=args.family, trials=args.trials, seed=args.seed,
              bootstrap_replicates=args.bootstrap_replicates, workers=args.workers)
    if hasattr(args, "n"):
        kw.update(n=args.n, dim=args.dim, dim_exponent=args.dim_exponent)
    kw.update(over)
    return ExperimentConfig(**kw)


def _warn_unreliable(report) -> bool:
    bad = report.unreliable
    for e in bad:
        print(f"warning: {e} excluded {report.excluded[e]} of {report.config.trials} trials; "
              "results are unreliable", file=sys.stderr)
    return bool(bad)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            report = run_experiment(_config(args, estimators=args.estimators))
            report.write_csv(args.out)
            return EXIT_UNRELIABLE if _warn_unreliable(report) else EXIT_OK
        if args.command == "hist":
            cfg = _config(args, estimators=(args.estimator,))
            report = run_experiment(cfg)
            write_histogram(args.out, dump_histogram(cfg, args.estimator, report=report))
            return EXIT_UNRELIABLE if _warn_unreliable(report) else EXIT_OK
        # sweep
        grid = preset_grid(args.preset, args.family)
        if not grid:
            raise ConfigError(f"preset {args.preset!r} has no valid grid points for {args.family!r}")
        flagged = False
        for i, (n, r) in enumerate(grid):
            report = run_experiment(_config(args, n=n, dim_exponent=r, estimators=args.estimators))
            write_rows(args.out, report.rows, append=i > 0)
            flagged |= _warn_unreliable(report)
        return EXIT_UNRELIABLE if flagged else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
