from __future__ import annotations

import json
import tempfile
import unittest
from pathlib import Path

from coopsubnet.diffcore import ContractError
from coopsubnet.models import ExperimentReport, RunRow
from coopsubnet.reporting import (
    ROW_COLUMNS,
    ReportFormat,
    aggregate,
    compare_table,
    comparison_frame,
    emit_results,
    load_results,
)

HARNESS = (("epochs", "30"), ("batch_size", "64"))


def _row(
    variant: str,
    fraction: float,
    seed: int,
    metric: float,
    *,
    bottleneck: int | None = None,
    coop_loss: float | None = None,
    task: str = "mnist-reduced",
    config_hash: str = "abc123",
) -> RunRow:
    return RunRow(
        task=task,
        variant=variant,
        fraction=fraction,
        seed=seed,
        metric=metric,
        coop_loss=coop_loss,
        wall_seconds=0.0,
        bottleneck=bottleneck,
        config_hash=config_hash,
    )


def _report(*rows: RunRow) -> ExperimentReport:
    ordered = tuple(sorted(rows, key=lambda row: row.sort_key))
    return ExperimentReport("abc123", HARNESS, ordered, aggregate(ordered))


class AggregateTests(unittest.TestCase):
    def test_mean_and_sample_standard_deviation(self) -> None:
        rows = [_row("Baseline", 0.01, seed, metric) for seed, metric in enumerate((90, 92, 94))]

        (cell,) = aggregate(rows)

        self.assertEqual(cell.runs, 3)
        self.assertAlmostEqual(cell.metric_mean, 92.0)
        self.assertAlmostEqual(cell.metric_std, 2.0)
        self.assertIsNone(cell.bottleneck)
        self.assertIsNone(cell.coop_loss_mean)

    def test_single_run_has_zero_spread(self) -> None:
        (cell,) = aggregate([_row("CoopSubNet", 0.1, 0, 0.8, bottleneck=64, coop_loss=0.3)])

        self.assertEqual(cell.metric_std, 0.0)
        self.assertEqual(cell.bottleneck, 64)
        self.assertAlmostEqual(cell.coop_loss_mean or 0.0, 0.3)

    def test_cells_are_split_by_bottleneck_and_sorted(self) -> None:
        rows = [
            _row("HardCon", 0.01, 0, 0.7, bottleneck=16),
            _row("HardCon", 0.01, 0, 0.6, bottleneck=4),
            _row("Baseline", 0.01, 0, 0.5),
        ]

        cells = aggregate(rows)

        self.assertEqual(
            [(cell.variant, cell.bottleneck) for cell in cells],
            [("Baseline", None), ("HardCon", 4), ("HardCon", 16)],
        )

    def test_rows_from_different_configs_are_not_merged(self) -> None:
        rows = [_row("Baseline", 0.01, 0, 0.5), _row("Baseline", 0.01, 1, 0.5, config_hash="ff")]

        with self.assertRaisesRegex(ContractError, "different configs"):
            aggregate(rows)
        self.assertEqual(aggregate([]), ())


class ResultFileTests(unittest.TestCase):
    def setUp(self) -> None:
        directory = tempfile.TemporaryDirectory()
        self.addCleanup(directory.cleanup)
        self.directory = Path(directory.name)
        self.report = _report(
            _row("Baseline", 0.01, 0, 0.91),
            _row("Baseline", 0.01, 1, 0.93),
            _row("CoopSubNet", 0.01, 0, 0.94, bottleneck=64, coop_loss=0.125),
            _row("CoopSubNet", 0.01, 1, 0.95, bottleneck=64, coop_loss=0.25),
        )

    def test_csv_has_one_line_per_run(self) -> None:
        report = _report(_row("Baseline", 0.5, 3, 0.97))

        paths = emit_results(report, self.directory)

        self.assertEqual(
            [path.name for path in paths], ["results.csv", "aggregates.csv", "harness.txt"]
        )
        lines = paths[0].read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 2)
        self.assertEqual(lines[0], ",".join(ROW_COLUMNS))
        self.assertEqual(len(lines[1].split(",")), len(ROW_COLUMNS))
        self.assertEqual(
            paths[2].read_text(encoding="utf-8"),
            "config_hash = abc123\nepochs = 30\nbatch_size = 64\n",
        )

    def test_csv_results_load_back(self) -> None:
        paths = emit_results(self.report, self.directory)

        loaded = load_results(paths[0])

        self.assertEqual(loaded, self.report)

    def test_json_results_load_back(self) -> None:
        (path,) = emit_results(self.report, self.directory, ReportFormat.JSON)

        payload = json.loads(path.read_text(encoding="utf-8"))
        self.assertEqual(path.name, "results.json")
        self.assertEqual(payload["harness"], dict(HARNESS))
        self.assertEqual(load_results(path), self.report)

    def test_empty_report_is_not_written(self) -> None:
        with self.assertRaisesRegex(ContractError, "without rows"):
            emit_results(ExperimentReport("abc123", (), (), ()), self.directory)

    def test_foreign_files_are_rejected(self) -> None:
        stray = self.directory / "results.json"
        stray.write_text('{"rows": 3}', encoding="utf-8")

        with self.assertRaisesRegex(ContractError, "not a results file"):
            load_results(stray)

    def test_malformed_csv_is_a_contract_error(self) -> None:
        ragged = self.directory / "ragged.csv"
        ragged.write_text("task,variant\na,b\nmnist-reduced,Baseline,0.5,7\n", encoding="utf-8")
        narrow = self.directory / "narrow.csv"
        narrow.write_text("task,variant\nmnist-reduced,Baseline\n", encoding="utf-8")
        mangled = self.directory / "mangled.csv"
        mangled.write_text(
            ",".join(ROW_COLUMNS) + "\nmnist-reduced,Baseline,0.01,zero,0.9,,0.0,,abc123,,,,\n",
            encoding="utf-8",
        )

        for path, message in (
            (ragged, "unreadable CSV"),
            (narrow, "missing column"),
            (mangled, "malformed row"),
        ):
            with self.subTest(path=path.name), self.assertRaisesRegex(ContractError, message):
                load_results(path)

    def test_non_finite_metrics_are_not_written_as_json(self) -> None:
        report = _report(_row("Baseline", 0.01, 0, float("nan")))

        with self.assertRaisesRegex(ContractError, "non-finite"):
            emit_results(report, self.directory, ReportFormat.JSON)
        self.assertFalse((self.directory / "results.json").exists())


class ComparisonTableTests(unittest.TestCase):
    def test_cells_show_mean_and_spread_and_star_the_best(self) -> None:
        report = _report(
            _row("Baseline", 0.01, 0, 0.5),
            _row("Baseline", 0.01, 1, 0.7),
            _row("CoopSubNet", 0.01, 0, 0.8, bottleneck=64),
        )

        frame = comparison_frame(report, "mnist-reduced")

        self.assertEqual(list(frame.columns), ["1%"])
        self.assertEqual(frame.loc["Baseline", "1%"], "0.6000 ± 0.1414")
        self.assertEqual(frame.loc["CoopSubNet L=64", "1%"], "0.8000 ± 0.0000 *")

    def test_lower_error_wins_for_regression(self) -> None:
        report = _report(
            _row("Baseline", 1.0, 0, 2.5, task="synth-regression"),
            _row("L2Reg", 1.0, 0, 1.5, task="synth-regression"),
        )

        frame = comparison_frame(report, "synth-regression")

        self.assertEqual(frame.loc["L2Reg", "100%"], "1.5000 ± 0.0000 *")
        self.assertEqual(frame.loc["Baseline", "100%"], "2.5000 ± 0.0000")

    def test_ties_star_every_best_cell(self) -> None:
        report = _report(_row("Baseline", 0.1, 0, 0.9), _row("Dropout", 0.1, 0, 0.9))

        frame = comparison_frame(report, "mnist-reduced")

        self.assertTrue(all(cell.endswith(" *") for cell in frame["10%"]))

    def test_missing_cells_are_dashed(self) -> None:
        report = _report(
            _row("Baseline", 0.01, 0, 0.5),
            _row("Baseline", 0.1, 0, 0.6),
            _row("Dropout", 0.01, 0, 0.55),
        )

        frame = comparison_frame(report, "mnist-reduced")

        self.assertEqual(frame.loc["Dropout", "10%"], "-")
        self.assertEqual(frame.loc["Baseline", "10%"], "0.6000 ± 0.0000")

    def test_one_variant_cannot_be_compared(self) -> None:
        report = _report(_row("Baseline", 0.01, 0, 0.5), _row("Baseline", 0.01, 1, 0.6))

        with self.assertRaisesRegex(ContractError, "two or more variants"):
            compare_table(report)
        with self.assertRaisesRegex(ContractError, "empty report"):
            compare_table(ExperimentReport("abc123", (), (), ()))

    def test_table_is_headed_by_task_and_config(self) -> None:
        report = _report(_row("Baseline", 0.01, 0, 0.5), _row("Dropout", 0.01, 0, 0.6))

        table = compare_table(report)

        self.assertTrue(table.startswith("mnist-reduced (config abc123)\n"))
        self.assertIn("0.6000 ± 0.0000 *", table)


if __name__ == "__main__":
    unittest.main()
