"""Command-line verbs: ``run``, ``table``, ``gradcheck`` and ``selftest``."""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path
from typing import NoReturn, TextIO

from coopsubnet.checkpoint import CheckpointError
from coopsubnet.checks import CheckResult, gradient_suite, selftest_suite
from coopsubnet.config import ConfigurationError, ExperimentConfig, Settings
from coopsubnet.data import FormatError
from coopsubnet.diffcore import ContractError, ShapeError
from coopsubnet.experiment import DatasetSource, run_experiment
from coopsubnet.reporting import ReportFormat, compare_table, emit_results, load_results

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIGURATION = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise ConfigurationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="coopsubnet",
        description="Train and compare cooperating-subnetwork regularization variants.",
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = commands.add_parser("run", help="run every (variant, fraction, seed) of a config")
    run.add_argument("config", type=Path)
    run.add_argument("--data-root", type=Path, help="directory holding the MNIST IDX files")
    run.add_argument("--output-dir", type=Path, help="where results and checkpoints go")
    run.add_argument("--workers", type=int, help="parallel runs (1-64)")
    run.add_argument(
        "--format",
        choices=[fmt.value for fmt in ReportFormat],
        default=ReportFormat.CSV.value,
        help="result file format",
    )

    table = commands.add_parser("table", help="print the comparison table of a report")
    table.add_argument("report", type=Path, help="results.csv or results.json")

    commands.add_parser("gradcheck", help="check every gradient against finite differences")
    commands.add_parser("selftest", help="check the metrics against brute-force oracles")
    return parser


def _resolve_settings(
    settings: Settings, config: ExperimentConfig, args: argparse.Namespace
) -> Settings:
    # Flag, then config file, then environment.
    workers = args.workers or config.workers or settings.workers
    if not 1 <= workers <= 64:
        raise ConfigurationError(f"workers must be between 1 and 64, got {workers}")
    return replace(
        settings,
        data_root=args.data_root or settings.data_root,
        output_dir=args.output_dir or config.output_dir or settings.output_dir,
        workers=workers,
    )


def _report_checks(results: list[CheckResult], out: TextIO) -> int:
    for result in results:
        status = "ok" if result.passed else "FAILED"
        out.write(
            f"{result.name:<36} {status:<6} error={result.error:.3g} "
            f"tolerance={result.tolerance:.1g}\n"
        )
    failed = [result.name for result in results if not result.passed]
    if failed:
        LOGGER.error("%d check(s) failed: %s", len(failed), ", ".join(failed))
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _dispatch(
    args: argparse.Namespace,
    settings: Settings,
    source: DatasetSource | None,
    out: TextIO,
) -> int:
    if args.command == "gradcheck":
        return _report_checks(gradient_suite(), out)
    if args.command == "selftest":
        return _report_checks(selftest_suite(), out)
    if args.command == "table":
        out.write(compare_table(load_results(args.report)))
        return EXIT_OK

    config = ExperimentConfig.load(args.config)
    resolved = _resolve_settings(settings, config, args)
    report = run_experiment(config, resolved, source=source)
    for path in emit_results(report, resolved.output_dir, ReportFormat(args.format)):
        out.write(f"wrote {path}\n")
    if len({(row.variant, row.bottleneck) for row in report.aggregates}) > 1:
        try:
            out.write(compare_table(report))
        except ContractError as exc:
            LOGGER.info("No comparison table: %s", exc)
    return EXIT_OK


def main(
    argv: Sequence[str] | None = None,
    *,
    settings: Settings | None = None,
    source: DatasetSource | None = None,
    out: TextIO | None = None,
) -> int:
    """Run one verb; returns the process exit code."""
    stream = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        return _dispatch(args, settings or Settings.from_env(), source, stream)
    except ConfigurationError as exc:
        LOGGER.error("Invalid configuration: %s", exc)
        for problem in exc.problems:
            sys.stderr.write(f"error: {problem}\n")
        return EXIT_CONFIGURATION
    except (FormatError, CheckpointError, ShapeError, ContractError, OSError) as exc:
        LOGGER.error("Run failed: %s", exc, extra={"error_type": type(exc).__name__})
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME
