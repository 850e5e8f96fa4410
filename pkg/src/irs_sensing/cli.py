"""Command-line entry point: ``irs-sensing run <config.yaml> [options]``.

Exit codes: 0 on success, 2 for configuration errors, 3 for failures while
running. The output root defaults to ``$IRS_SENSING_OUTPUT`` or ``results``.
"""

import argparse
import logging
import sys

from .collab import SCHEMES
from .config import OUTPUT_ENV, ConfigError, override, parse_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def build_parser():
    # argparse exits with status 2 on usage errors, the same code as a bad config
    p = argparse.ArgumentParser(prog="irs-sensing",
                                description="IRS-assisted collaborative spectrum sensing")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment file and write figure CSVs")
    run.add_argument("config", help="YAML experiment file (may be empty for the full defaults)")
    run.add_argument("--seed-override", type=int, metavar="SEED",
                     help="run a single seed instead of the configured list")
    run.add_argument("--out", metavar="DIR",
                     help=f"output directory (default: ${OUTPUT_ENV} or ./results)")
    run.add_argument("--schemes", metavar="A,B",
                     help=f"comma-separated subset of {','.join(SCHEMES)}")
    run.add_argument("--desk-scale", action="store_true",
                     help="reduced profile: 8 bands of 32 points, 4 SUs, 2000/500 samples")
    run.add_argument("--workers", type=int, help="parallel worker processes")
    run.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    plot = sub.add_parser("plot-data", help="turn figure CSVs into per-curve x,y files")
    plot.add_argument("csv_dir")
    plot.add_argument("--out", metavar="DIR")
    return p


def _apply_flags(cfg, args):
    changes = {}
    if args.seed_override is not None:
        changes["seeds"] = (args.seed_override,)
    if args.schemes:
        schemes = tuple(s.strip() for s in args.schemes.split(",") if s.strip())
        changes["schemes"] = schemes
        changes["no_irs_schemes"] = tuple(s for s in cfg.no_irs_schemes if s in schemes)
    if args.out:
        changes["output_dir"] = args.out
    if args.workers is not None:
        changes["workers"] = args.workers
    return override(cfg, **changes) if changes else cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING if getattr(args, "quiet", False) else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr)
    from . import experiment  # deferred so `--help` stays fast

    if args.command == "plot-data":
        try:
            paths = experiment.emit_plot_data(args.csv_dir, args.out)
        except experiment.PlotDataError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"wrote {len(paths)} series files")
        return EXIT_OK

    try:
        cfg = _apply_flags(parse_config(args.config, desk_scale=args.desk_scale), args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out = experiment.run_experiment(cfg)
    except Exception as e:  # any failure after a valid config is a runtime failure
        logging.getLogger(__name__).debug("run failed", exc_info=True)
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"results written to {out}")
    return EXIT_OK
