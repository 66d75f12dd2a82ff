"""Command-line entry point: ``ccalab <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ExperimentConfig, load_config
from .errors import CCALabError
from .pipeline import run_pipeline

STAGE_FOR = {"pretrain": "pretrain", "align": "align", "eval": "eval", "sweep": "sweep", "run": "sweep"}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--out", help="output directory (overrides run.out_dir)")
    p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for sweep points")
    p.add_argument("--record-every", type=int, help="trajectory record interval (overrides run.record_every)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccalab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("pretrain", "generate the true distribution and pretrain by maximum likelihood"),
                           ("align", "run through the alignment stage"),
                           ("eval", "run through evaluation"),
                           ("sweep", "run through the trade-off sweeps"),
                           ("run", "full pipeline")):
        _add_run_flags(sub.add_parser(name, help=helptext))
    v = sub.add_parser("verify", help="run the invariant suite on built-in fixtures")
    v.add_argument("--corrupt-logit", action="store_true", help=argparse.SUPPRESS)
    e = sub.add_parser("emit-plot-data", help="write tidy CSV from metrics/trajectory JSON-lines files")
    e.add_argument("files", nargs="*")
    e.add_argument("--kind", choices=("tradeoff_curve", "trajectory"), default="tradeoff_curve")
    e.add_argument("--output", "-o", help="CSV path (default: stdout)")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.record_every is not None and args.record_every < 1:
        raise CCALabError("--record-every must be >= 1")
    return cfg.with_overrides(out_dir=args.out, seed=args.seed, record_every=args.record_every)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "verify":
            from .verify import format_report, run_checks

            results = run_checks(corrupt_logit=args.corrupt_logit)
            sys.stdout.write(format_report(results))
            return 0 if all(r.passed for r in results) else 1
        if args.command == "emit-plot-data":
            from .io import atomic_write_text
            from .plotdata import emit_plot_data

            text = emit_plot_data(args.files, args.kind)
            if args.output:
                atomic_write_text(args.output, text)
            else:
                sys.stdout.write(text)
            return 0
        return run_pipeline(_config(args), until=STAGE_FOR[args.command], jobs=args.jobs)
    except (CCALabError, OSError) as e:
        print(f"ccalab: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
