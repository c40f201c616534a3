from __future__ import annotations

import tempfile
import unittest
from dataclasses import replace
from pathlib import Path
from unittest.mock import patch

import numpy as np

from coopsubnet.config import ConfigurationError, ExperimentConfig, Settings
from coopsubnet.data import synth_manifold_regression
from coopsubnet.experiment import (
    ExperimentRunner,
    FileDatasetSource,
    architecture_for,
    run_experiment,
)
from coopsubnet.models import Task
from tests.fakes import FakeClock, FakeDatasetSource

CONFIG = """\
task = synth-regression
variant = Baseline
variant = CoopSubNet L=4
fraction = 1
seed = 0
seed = 1
seed = 2
epochs = 2
batch_size = 4
image_size = 8
latent_dim = 1
ambient_dim = 4
feature_width = 8
train_samples = 12
test_samples = 6
"""


def _source() -> FakeDatasetSource:
    return FakeDatasetSource(
        synth_manifold_regression(12, 1, 4, 0.0, seed=0, image_size=8),
        synth_manifold_regression(6, 1, 4, 0.0, seed=0, image_size=8, split="test"),
    )


class ExperimentRunnerTests(unittest.TestCase):
    def setUp(self) -> None:
        directory = tempfile.TemporaryDirectory()
        self.addCleanup(directory.cleanup)
        self.settings = Settings(output_dir=Path(directory.name))
        self.config = ExperimentConfig.parse(CONFIG)

    def test_grid_produces_rows_and_aggregates(self) -> None:
        source = _source()

        report = run_experiment(
            self.config, self.settings, source=source, monotonic=FakeClock().monotonic
        )

        self.assertEqual(len(report.rows), 6)
        self.assertEqual(len(report.aggregates), 2)
        self.assertEqual(source.loads, [Task.SYNTH_REGRESSION])
        self.assertEqual([row.variant for row in report.aggregates], ["Baseline", "CoopSubNet"])
        self.assertEqual([row.runs for row in report.aggregates], [3, 3])
        self.assertEqual({row.config_hash for row in report.rows}, {self.config.config_hash})
        self.assertEqual(report.harness, self.config.harness())

    def test_rows_carry_the_variant_contract(self) -> None:
        report = run_experiment(self.config, self.settings, source=_source())

        baseline, coop = report.rows[0], report.rows[3]
        self.assertIsNone(baseline.bottleneck)
        self.assertIsNone(baseline.coop_loss)
        self.assertEqual(coop.bottleneck, 4)
        self.assertIsNotNone(coop.coop_loss)
        self.assertEqual([row.seed for row in report.rows[:3]], [0, 1, 2])

    def test_wall_time_is_reported_only_on_request(self) -> None:
        quiet = run_experiment(
            self.config, self.settings, source=_source(), monotonic=FakeClock().monotonic
        )
        timed = run_experiment(
            replace(self.config, record_wall_time=True),
            self.settings,
            source=_source(),
            monotonic=FakeClock(step=1.5).monotonic,
        )

        self.assertEqual({row.wall_seconds for row in quiet.rows}, {0.0})
        self.assertEqual({row.wall_seconds for row in timed.rows}, {1.5})

    def test_runs_are_reproducible_across_worker_counts(self) -> None:
        sequential = run_experiment(self.config, self.settings, source=_source())
        parallel = run_experiment(
            self.config, replace(self.settings, workers=3), source=_source()
        )

        self.assertEqual(sequential.rows, parallel.rows)
        self.assertEqual(sequential.aggregates, parallel.aggregates)

    def test_checkpoints_are_written_per_run(self) -> None:
        runner = ExperimentRunner(self.config, self.settings, source=_source())
        run = self.config.runs()[3]

        runner.run_one(run)

        manifest = self.settings.output_dir / "checkpoints" / f"{run.run_id}.json"
        self.assertTrue(manifest.is_file())
        self.assertTrue(manifest.with_name(f"{run.run_id}.blocks").is_file())

    def test_finished_runs_log_their_epoch_history(self) -> None:
        runner = ExperimentRunner(self.config, self.settings, source=_source())

        with self.assertLogs("coopsubnet.experiment", level="INFO") as logs:
            runner.run_one(self.config.runs()[0])

        (finished,) = [record for record in logs.records if hasattr(record, "history")]
        self.assertEqual([entry["epoch"] for entry in finished.history], [0, 1])

    def test_tiny_reductions_are_rejected(self) -> None:
        config = ExperimentConfig.parse(CONFIG.replace("fraction = 1", "fraction = 0.1"))
        runner = ExperimentRunner(config, self.settings, source=_source())

        with self.assertRaisesRegex(ConfigurationError, "training needs at least 2"):
            runner.run_one(config.runs()[0])

    def test_empty_datasets_are_rejected(self) -> None:
        train, test = _source().train, _source().test
        empty = FakeDatasetSource(train.subset([]), test)

        with self.assertRaisesRegex(ConfigurationError, "produced an empty dataset"):
            ExperimentRunner(self.config, self.settings, source=empty).datasets()

    def test_schedule_clamps_the_batch_to_the_training_set(self) -> None:
        runner = ExperimentRunner(self.config, self.settings, source=_source())
        run = self.config.runs()[3]

        schedule = runner.schedule_for(run, train_size=3)

        self.assertEqual(schedule.batch_size, 3)
        self.assertEqual(schedule.seed, run.seed)
        self.assertEqual(schedule.validation_interval, 0)


class FileDatasetSourceTests(unittest.TestCase):
    def setUp(self) -> None:
        directory = tempfile.TemporaryDirectory()
        self.addCleanup(directory.cleanup)
        self.settings = Settings(output_dir=Path(directory.name))
        self.config = ExperimentConfig.parse(CONFIG)

    def test_generated_sets_are_stored_and_reused(self) -> None:
        train, test = FileDatasetSource(self.settings, self.config).load(Task.SYNTH_REGRESSION)
        stored = self.settings.output_dir / "datasets"
        stem = f"synth-regression_train_{self.config.config_hash}"

        with (
            patch(
                "coopsubnet.experiment.synth_manifold_regression",
                side_effect=AssertionError("regenerated"),
            ),
            self.assertLogs("coopsubnet.experiment", level="INFO") as logs,
        ):
            reused = FileDatasetSource(self.settings, self.config).load(Task.SYNTH_REGRESSION)

        self.assertTrue((stored / f"{stem}.blocks").is_file())
        self.assertTrue((stored / f"{stem}.provenance.txt").is_file())
        self.assertEqual((train.size, test.size), (12, 6))
        np.testing.assert_array_equal(reused[0].inputs, train.inputs)
        np.testing.assert_array_equal(reused[1].targets, test.targets)
        self.assertEqual(reused[0].provenance, train.provenance)
        self.assertTrue(any("Reused synth-regression train set" in line for line in logs.output))

    def test_a_changed_config_generates_fresh_sets(self) -> None:
        FileDatasetSource(self.settings, self.config).load(Task.SYNTH_REGRESSION)
        noisy = ExperimentConfig.parse(CONFIG + "noise = 0.1\n")

        FileDatasetSource(self.settings, noisy).load(Task.SYNTH_REGRESSION)

        names = sorted(path.name for path in (self.settings.output_dir / "datasets").iterdir())
        self.assertEqual(len(names), 8)


class ArchitectureForTests(unittest.TestCase):
    def test_architecture_follows_the_task(self) -> None:
        cases = {
            "task = mnist-reduced\n": ((1, 28, 28), 10, 1024),
            "task = synth-regression\nimage_size = 12\nambient_dim = 6\n": ((1, 12, 12), 6, 128),
            "task = synth-segmentation\npatch_size = 8\n": ((1, 8, 8), 64, 256),
        }
        for head, (input_shape, outputs, width) in cases.items():
            config = ExperimentConfig.parse(head + "variant = Baseline\nfraction = 1\n")
            with self.subTest(task=config.task.value):
                arch = architecture_for(config)
                self.assertEqual(arch.input_shape, input_shape)
                self.assertEqual(arch.outputs, outputs)
                self.assertEqual(arch.activation_shapes()[-2], (width,))

    def test_attach_point_is_taken_from_the_config(self) -> None:
        config = ExperimentConfig.parse(CONFIG + "attach = after-conv2\n")

        self.assertEqual(architecture_for(config).attach, "after-conv2")


if __name__ == "__main__":
    unittest.main()
