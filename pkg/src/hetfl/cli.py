"""Command-line entry point with `run` and `verify` subcommands."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .data import DataError
from .harness import (
    ConfigError,
    HarnessError,
    ComparisonReport,
    emit_outputs,
    load_config,
    run_comparison,
)
from .optimizer import OptimizerError
from .timing import ProfileError
from .verify import CHECKS, run_checks

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ACCEPTANCE = 2

logger = logging.getLogger("hetfl")


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetfl", description="Federated learning simulator with delay-aware client sampling.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate every scheme on every seed and write CSV reports")
    run.add_argument("--config", help="flat key = value config file")
    run.add_argument("--seeds", help="comma-separated master seeds, e.g. 0,1,2")
    run.add_argument("--schemes", help="comma-separated subset of proposed,statistical,uniform,weighted,full")
    run.add_argument("--out", help="output directory (default from config)")
    run.add_argument("--cold-restart", action="store_true", help="restart proposed sampling from the initial model")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    run.add_argument(
        "--require-speedup",
        type=float,
        metavar="RATIO",
        help="exit 2 unless proposed beats every other scheme and is RATIO times faster than uniform",
    )

    verify = sub.add_parser("verify", help="run the built-in oracle and property checks")
    verify.add_argument(
        "--only",
        help="comma-separated check numbers: "
        + ", ".join(f"{n}={name}" for n, name, _ in CHECKS),
    )
    return parser


def _print_report(report: ComparisonReport, out=None) -> None:
    out = out or sys.stdout

    def fmt(x, fmt_spec=".1f"):
        return "NA" if x is None else format(x, fmt_spec)

    print(f"target loss {report.target_loss}, seeds {','.join(map(str, report.seeds))}", file=out)
    print(f"{'scheme':<12} {'reached':>8} {'time (s)':>18} {'rounds':>16} {'vs proposed':>12}", file=out)
    for r in report.rows:
        time_s = f"{fmt(r.time_mean)} ± {fmt(r.time_std)}"
        rounds = f"{fmt(r.rounds_mean)} ± {fmt(r.rounds_std)}"
        print(
            f"{r.scheme:<12} {r.reached:>3}/{r.seeds:<4} {time_s:>18} {rounds:>16} {fmt(r.ratio_vs_proposed, '.3f'):>12}",
            file=out,
        )


def speedup_holds(report: ComparisonReport, min_ratio: float) -> tuple[bool, str]:
    """Proposed must have the lowest mean time and at least ``min_ratio`` vs uniform."""
    names = [r.scheme for r in report.rows]
    if "proposed" not in names:
        return False, "proposed scheme was not run"
    proposed = report.row("proposed")
    if proposed.time_mean is None:
        return False, "proposed never reached the target"
    for r in report.rows:
        if r.scheme == "proposed":
            continue
        if r.time_mean is not None and r.time_mean <= proposed.time_mean:
            return False, f"{r.scheme} was not slower than proposed"
    if "uniform" in names:
        ratio = report.row("uniform").ratio_vs_proposed
        if ratio is not None and ratio < min_ratio:
            return False, f"uniform/proposed time ratio {ratio:.3f} < {min_ratio}"
    return True, "proposed is fastest"


def cmd_run(args) -> int:
    overrides = _parse_set(args.set)
    if args.seeds:
        overrides["seeds"] = args.seeds
    if args.schemes:
        overrides["schemes"] = args.schemes
    if args.out:
        overrides["out_dir"] = args.out
    if args.cold_restart:
        overrides["cold_restart"] = "true"
    config = load_config(args.config, overrides)
    report = run_comparison(config)
    paths = emit_outputs(report, report.segments, config.out_dir, config)
    _print_report(report)
    print(f"wrote {paths['rounds']}, {paths['report']}, {paths['config']}")
    if args.require_speedup is not None:
        ok, why = speedup_holds(report, args.require_speedup)
        print(f"speedup check: {'PASS' if ok else 'FAIL'} ({why})")
        if not ok:
            return EXIT_ACCEPTANCE
    return EXIT_OK


def cmd_verify(args) -> int:
    only = None
    if args.only:
        try:
            only = {int(s) for s in args.only.split(",") if s.strip()}
        except ValueError:
            raise ConfigError(f"--only expects check numbers, got {args.only!r}") from None
    results = run_checks(only)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_ACCEPTANCE if failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_verify(args)
    except (ConfigError, HarnessError, DataError, ProfileError, OptimizerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
