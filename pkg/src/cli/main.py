"""Command-line front door: run, compare, plot, verify.

Exit codes: 0 success, 1 failed criteria or nothing to compare,
2 invalid configuration, 3 numeric or capacity abort.
"""
import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from src.core.errors import CapacityError, ConfigurationError, InputError, NumericError
from src.core.logging_setup import configure_logging
from src.experiments.charts import CHARTS, plot_run
from src.experiments.config import load_config
from src.experiments.runner import compare_runs, run_experiment
from src.experiments.verify import AcceptanceSuite

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def format_validation_error(err: ValidationError) -> str:
    parts = []
    for item in err.errors():
        field = ".".join(str(p) for p in item.get("loc", ())) or "config"
        parts.append(f"{field}: {item.get('msg')}")
    return "; ".join(parts)


def cmd_run(opts) -> int:
    config = load_config(opts.config, {"method": opts.method, "seed": opts.seed})
    result = run_experiment(config)
    logger.info(f"Metrics written to {result.out_dir / 'metrics.json'}")
    return EXIT_OK


def cmd_compare(opts) -> int:
    try:
        table = compare_runs(opts.runs, opts.out)
    except InputError as e:
        sys.stderr.write(f"{e}\n")
        return EXIT_FAILED
    logger.info(f"Compared {len(table)} run(s) into {opts.out}")
    return EXIT_OK


def cmd_plot(opts) -> int:
    plot_run(opts.run, opts.what, opts.out)
    return EXIT_OK


def cmd_verify(opts) -> int:
    only = [int(c) for c in opts.only.split(",")] if opts.only else None
    suite = AcceptanceSuite(seed=opts.seed, inject_fault=opts.inject_fault)
    results = suite.run(opts.suite, only)
    failed = [r["name"] for r in results if not r["passed"]]
    if failed:
        sys.stderr.write(f"failed criteria: {', '.join(failed)}\n")
        return EXIT_FAILED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptcl", description="Continual learning with dynamic pruning and freezing")
    parser.add_argument("--log-level", default="INFO", help="logging level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from an INI config")
    run.add_argument("-c", "--config", metavar="FILE", required=True, help="experiment config (INI)")
    run.add_argument("-m", "--method", metavar="M", default=None, help="override the configured method")
    run.add_argument("-s", "--seed", metavar="N", type=int, default=None, help="override the configured seed")
    run.set_defaults(func=cmd_run)

    compare = sub.add_parser("compare", help="tabulate metrics of completed runs")
    compare.add_argument("--runs", metavar="DIR", nargs="+", required=True, help="run directories")
    compare.add_argument("-o", "--out", metavar="OUT", default="table.csv", help="output CSV (default: table.csv)")
    compare.set_defaults(func=cmd_compare)

    plot = sub.add_parser("plot", help="render an SVG chart from a run directory")
    plot.add_argument("--run", metavar="DIR", required=True, help="run directory")
    plot.add_argument("--what", choices=CHARTS, required=True, help="chart kind")
    plot.add_argument("-o", "--out", metavar="OUT", required=True, help="output SVG file")
    plot.set_defaults(func=cmd_plot)

    verify = sub.add_parser("verify", help="run the acceptance suite")
    verify.add_argument("--suite", choices=("quick", "full"), default="quick", help="suite (default: quick)")
    verify.add_argument("--only", metavar="IDS", default=None, help="comma-separated criterion numbers")
    verify.add_argument("-s", "--seed", metavar="N", type=int, default=5, help="seed (default: 5)")
    verify.add_argument("--inject-fault", action="store_true", default=False,
                        help="corrupt a frozen weight mid-sequence (negative control)")
    verify.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    opts = build_parser().parse_args(argv)
    configure_logging(opts.log_level)
    try:
        return opts.func(opts)
    except ValidationError as e:
        sys.stderr.write(f"invalid config: {format_validation_error(e)}\n")
        return EXIT_CONFIG
    except (ConfigurationError, FileNotFoundError) as e:
        sys.stderr.write(f"invalid config: {e}\n")
        return EXIT_CONFIG
    except (NumericError, CapacityError) as e:
        logger.error(f"Run aborted: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
