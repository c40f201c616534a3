"""Seed aggregation, CSV/JSON result files and the variant-by-fraction comparison table."""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from enum import StrEnum
from pathlib import Path
from typing import Any

import pandas as pd

from coopsubnet.diffcore import ContractError
from coopsubnet.models import AggregateRow, ExperimentReport, RunRow, Task

LOGGER = logging.getLogger(__name__)

ROW_COLUMNS = (
    "task",
    "variant",
    "fraction",
    "seed",
    "metric",
    "coop_loss",
    "wall_seconds",
    "bottleneck",
    "config_hash",
    "dice",
    "precision",
    "recall",
    "f1",
)
AGGREGATE_COLUMNS = (
    "task",
    "variant",
    "bottleneck",
    "fraction",
    "runs",
    "metric_mean",
    "metric_std",
    "coop_loss_mean",
    "config_hash",
)
_OPTIONAL_FLOATS = ("coop_loss", "dice", "precision", "recall", "f1")
RESULTS_CSV = "results.csv"
AGGREGATES_CSV = "aggregates.csv"
HARNESS_TXT = "harness.txt"
RESULTS_JSON = "results.json"
BEST_MARK = " *"


class ReportFormat(StrEnum):
    CSV = "csv"
    JSON = "json"


def _rows_frame(rows: Sequence[RunRow]) -> pd.DataFrame:
    frame = pd.DataFrame([row.to_api_dict() for row in rows], columns=list(ROW_COLUMNS))
    frame["bottleneck"] = pd.array([row.bottleneck for row in rows], dtype="Int64")
    for column in _OPTIONAL_FLOATS:
        frame[column] = frame[column].astype("float64")
    return frame


def _optional_float(value: Any) -> float | None:
    return None if pd.isna(value) else float(value)


def _optional_int(value: Any) -> int | None:
    return None if pd.isna(value) else int(value)


def aggregate(rows: Sequence[RunRow]) -> tuple[AggregateRow, ...]:
    """Mean and sample standard deviation (ddof 1, 0.0 for one run) per table cell."""
    if not rows:
        return ()
    frame = _rows_frame(rows)
    hashes = sorted(set(frame["config_hash"]))
    if len(hashes) > 1:
        raise ContractError(f"rows from different configs cannot be merged: {', '.join(hashes)}")
    summary = (
        frame.groupby(["task", "variant", "bottleneck", "fraction"], dropna=False, sort=False)
        .agg(
            runs=("metric", "size"),
            metric_mean=("metric", "mean"),
            metric_std=("metric", "std"),
            coop_loss_mean=("coop_loss", "mean"),
            config_hash=("config_hash", "first"),
        )
        .reset_index()
    )
    aggregates = [
        AggregateRow(
            task=str(record["task"]),
            variant=str(record["variant"]),
            bottleneck=_optional_int(record["bottleneck"]),
            fraction=float(record["fraction"]),
            runs=int(record["runs"]),
            metric_mean=float(record["metric_mean"]),
            metric_std=0.0 if int(record["runs"]) == 1 else float(record["metric_std"]),
            coop_loss_mean=_optional_float(record["coop_loss_mean"]),
            config_hash=str(record["config_hash"]),
        )
        for record in summary.to_dict("records")
    ]
    return tuple(
        sorted(aggregates, key=lambda a: (a.task, a.variant, a.bottleneck or 0, a.fraction))
    )


def _harness_text(report: ExperimentReport) -> str:
    lines = [f"config_hash = {report.config_hash}"]
    lines.extend(f"{key} = {value}" for key, value in report.harness)
    return "\n".join(lines) + "\n"


def emit_results(
    report: ExperimentReport, directory: Path, fmt: ReportFormat = ReportFormat.CSV
) -> list[Path]:
    """Write the report; CSV output is three files, JSON one. Returns the paths written."""
    if not report.rows:
        raise ContractError("refusing to write a report without rows")
    directory.mkdir(parents=True, exist_ok=True)
    if fmt is ReportFormat.JSON:
        path = directory / RESULTS_JSON
        try:
            text = json.dumps(report.to_api_dict(), indent=2, allow_nan=False)
        except ValueError as exc:
            raise ContractError(f"refusing to write non-finite values to JSON ({exc})") from exc
        path.write_text(text + "\n", encoding="utf-8")
        LOGGER.info("Wrote %d rows to %s", len(report.rows), path)
        return [path]

    results = directory / RESULTS_CSV
    _rows_frame(report.rows).to_csv(results, index=False, na_rep="", lineterminator="\n")
    aggregates_frame = pd.DataFrame(
        [row.to_api_dict() for row in report.aggregates], columns=list(AGGREGATE_COLUMNS)
    )
    aggregates_frame["bottleneck"] = pd.array(
        [row.bottleneck for row in report.aggregates], dtype="Int64"
    )
    aggregates_frame["coop_loss_mean"] = aggregates_frame["coop_loss_mean"].astype("float64")
    aggregates = directory / AGGREGATES_CSV
    aggregates_frame.to_csv(aggregates, index=False, na_rep="", lineterminator="\n")
    harness = directory / HARNESS_TXT
    harness.write_text(_harness_text(report), encoding="utf-8")
    LOGGER.info(
        "Wrote %d rows and %d aggregates to %s",
        len(report.rows),
        len(report.aggregates),
        directory,
        extra={"config_hash": report.config_hash},
    )
    return [results, aggregates, harness]


def _read_harness(path: Path) -> tuple[str | None, tuple[tuple[str, str], ...]]:
    if not path.exists():
        return None, ()
    config_hash: str | None = None
    entries: list[tuple[str, str]] = []
    for line in path.read_text(encoding="utf-8").splitlines():
        key, separator, value = line.partition("=")
        if not separator:
            continue
        if key.strip() == "config_hash":
            config_hash = value.strip()
        else:
            entries.append((key.strip(), value.strip()))
    return config_hash, tuple(entries)


def _row_from_record(record: Mapping[Any, Any]) -> RunRow:
    return RunRow(
        task=str(record["task"]),
        variant=str(record["variant"]),
        fraction=float(record["fraction"]),
        seed=int(record["seed"]),
        metric=float(record["metric"]),
        coop_loss=_optional_float(record["coop_loss"]),
        wall_seconds=float(record["wall_seconds"]),
        bottleneck=_optional_int(record["bottleneck"]),
        config_hash=str(record["config_hash"]),
        dice=_optional_float(record.get("dice")),
        precision=_optional_float(record.get("precision")),
        recall=_optional_float(record.get("recall")),
        f1=_optional_float(record.get("f1")),
    )


def load_results(path: Path) -> ExperimentReport:
    """Read ``results.json`` or ``results.csv`` (with its ``harness.txt``) back into a report."""
    if path.suffix == ".json":
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            rows = tuple(_row_from_record(record) for record in payload["rows"])
            harness = tuple((str(k), str(v)) for k, v in payload["harness"].items())
            config_hash = str(payload["config_hash"])
        except (ValueError, AttributeError, KeyError, TypeError) as exc:
            raise ContractError(f"{path}: not a results file ({exc})") from exc
    else:
        try:
            frame = pd.read_csv(
                path,
                float_precision="round_trip",
                dtype={"task": str, "variant": str, "config_hash": str, "bottleneck": "Int64"},
            )
        except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as exc:
            raise ContractError(f"{path}: unreadable CSV ({exc})") from exc
        missing = [column for column in ROW_COLUMNS[:9] if column not in frame.columns]
        if missing:
            raise ContractError(f"{path}: missing column(s) {', '.join(missing)}")
        try:
            rows = tuple(_row_from_record(record) for record in frame.to_dict("records"))
        except (ValueError, TypeError) as exc:
            raise ContractError(f"{path}: malformed row ({exc})") from exc
        stored_hash, harness = _read_harness(path.with_name(HARNESS_TXT))
        config_hash = stored_hash or (rows[0].config_hash if rows else "")
    if not rows:
        raise ContractError(f"{path}: the report has no rows")
    if any(row.config_hash != config_hash for row in rows):
        raise ContractError(f"{path}: rows do not all belong to config {config_hash}")
    ordered = tuple(sorted(rows, key=lambda row: row.sort_key))
    return ExperimentReport(config_hash, harness, ordered, aggregate(ordered))


def _row_label(row: AggregateRow) -> str:
    return row.variant if row.bottleneck is None else f"{row.variant} L={row.bottleneck}"


def comparison_frame(report: ExperimentReport, task: str) -> pd.DataFrame:
    """Variants by fractions for one task; each cell is ``mean ± std`` and the best is starred."""
    aggregates = [row for row in report.aggregates or aggregate(report.rows) if row.task == task]
    higher_is_better = Task(task).kind.higher_is_better
    fractions = sorted({row.fraction for row in aggregates})
    common = [
        fraction
        for fraction in fractions
        if sum(1 for row in aggregates if row.fraction == fraction) >= 2
    ]
    if not common:
        raise ContractError(f"{task}: no fraction has results for two or more variants")
    labels = list(dict.fromkeys(_row_label(row) for row in aggregates))
    cells: dict[str, dict[str, str]] = {}
    for fraction in fractions:
        column = [row for row in aggregates if row.fraction == fraction]
        means = [row.metric_mean for row in column]
        best = max(means) if higher_is_better else min(means)
        cells[f"{fraction * 100:g}%"] = {
            _row_label(row): f"{row.metric_mean:.4f} ± {row.metric_std:.4f}"
            + (BEST_MARK if len(column) > 1 and row.metric_mean == best else "")
            for row in column
        }
    return pd.DataFrame(cells, index=labels).fillna("-")


def compare_table(report: ExperimentReport) -> str:
    tasks = list(dict.fromkeys(row.task for row in report.rows))
    if not tasks:
        raise ContractError("cannot tabulate an empty report")
    sections = []
    for task in tasks:
        frame = comparison_frame(report, task)
        sections.append(f"{task} (config {report.config_hash})\n{frame.to_string()}")
    return "\n\n".join(sections) + "\n"
