"""Runs every cell of an experiment grid and collects the raw rows and per-cell aggregates."""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Protocol

import numpy as np

from coopsubnet.config import ConfigurationError, ExperimentConfig, Settings
from coopsubnet.coop import (
    ArchitectureConfig,
    build_composite,
    mnist_architecture,
    regression_architecture,
    segmentation_architecture,
)
from coopsubnet.data import (
    Dataset,
    dataset_exists,
    load_dataset,
    load_mnist,
    sample_reduction,
    save_dataset,
    segmentation_dataset,
    synth_manifold_regression,
)
from coopsubnet.models import ExperimentReport, RunRow, RunSpec, Task
from coopsubnet.reporting import aggregate
from coopsubnet.trainer import TrainSchedule, describe_history, evaluate, save_network, train

LOGGER = logging.getLogger(__name__)

type Clock = Callable[[], float]


class DatasetSource(Protocol):
    """Supplies the full training pool and the test set for a task."""

    def load(self, task: Task) -> tuple[Dataset, Dataset]: ...


class FileDatasetSource:
    """MNIST from IDX files under the data root; synthetic sets are generated once and stored."""

    def __init__(self, settings: Settings, config: ExperimentConfig) -> None:
        self._settings = settings
        self._config = config

    def load(self, task: Task) -> tuple[Dataset, Dataset]:
        config = self._config
        if task is Task.MNIST_REDUCED:
            train_pool = load_mnist(self._settings.data_root, "train")
            test = load_mnist(self._settings.data_root, "test")
            if config.train_samples:
                keep = min(config.train_samples, train_pool.size)
                train_pool = train_pool.subset(np.arange(keep))
            limit = config.test_limit or config.test_samples
            if limit:
                test = test.subset(np.arange(min(limit, test.size)))
            return train_pool, test
        if task is Task.SYNTH_REGRESSION:
            return (
                self._stored(task, "train", lambda: self._manifold(config.train_samples, "train")),
                self._stored(task, "test", lambda: self._manifold(config.test_samples, "test")),
            )
        return (
            self._stored(
                task, "train", lambda: self._nuclei(config.train_samples, config.data_seed)
            ),
            self._stored(
                task, "test", lambda: self._nuclei(config.test_samples, config.data_seed + 1)
            ),
        )

    def _stored(self, task: Task, split: str, generate: Callable[[], Dataset]) -> Dataset:
        """Generated datasets live under ``<output_dir>/datasets`` and are reused across runs."""
        name = f"{task.value}_{split}_{self._config.config_hash}"
        stem = self._settings.output_dir / "datasets" / name
        if dataset_exists(stem):
            dataset = load_dataset(stem)
            LOGGER.info(
                "Reused %s %s set (%d samples) from %s", task.value, split, dataset.size, stem
            )
            return dataset
        dataset = generate()
        save_dataset(dataset, stem)
        LOGGER.debug("Stored %s %s set (%d samples) at %s", task.value, split, dataset.size, stem)
        return dataset

    def _manifold(self, count: int, split: str) -> Dataset:
        config = self._config
        return synth_manifold_regression(
            count,
            config.latent_dim,
            config.ambient_dim,
            config.noise,
            config.data_seed,
            embedding_seed=config.data_seed,
            image_size=config.image_size,
            split=split,
        )

    def _nuclei(self, count: int, seed: int) -> Dataset:
        config = self._config
        return segmentation_dataset(
            count,
            config.image_size,
            config.nuclei_per_image,
            config.patch_size,
            config.patch_stride,
            seed,
        )


def architecture_for(config: ExperimentConfig) -> ArchitectureConfig:
    width = config.feature_width
    if config.task is Task.MNIST_REDUCED:
        arch = mnist_architecture(width or 1024)
    elif config.task is Task.SYNTH_REGRESSION:
        arch = regression_architecture(config.image_size, config.ambient_dim, width or 128)
    else:
        arch = segmentation_architecture(config.patch_size, width or 256)
    return replace(arch, attach=config.attach)


class ExperimentRunner:
    """Trains one network per run; runs share nothing but the read-only datasets.

    ``settings.output_dir`` and ``settings.workers`` are final here: callers resolve any
    override from the command line or the config file before constructing the runner.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        settings: Settings,
        *,
        source: DatasetSource | None = None,
        monotonic: Clock = time.monotonic,
    ) -> None:
        self.config = config
        self.settings = settings
        self._source = source or FileDatasetSource(settings, config)
        self._monotonic = monotonic
        self._lock = threading.Lock()
        self._datasets: tuple[Dataset, Dataset] | None = None

    def datasets(self) -> tuple[Dataset, Dataset]:
        with self._lock:
            if self._datasets is None:
                train_pool, test = self._source.load(self.config.task)
                if train_pool.size == 0 or test.size == 0:
                    raise ConfigurationError(f"{self.config.task.value} produced an empty dataset")
                LOGGER.info(
                    "Loaded %s: %d training and %d test samples",
                    self.config.task.value,
                    train_pool.size,
                    test.size,
                )
                self._datasets = (train_pool, test)
            return self._datasets

    def schedule_for(self, run: RunSpec, train_size: int) -> TrainSchedule:
        config = self.config
        return TrainSchedule(
            total_epochs=config.epochs,
            batch_size=min(config.batch_size, train_size),
            alpha=run.variant.alpha,
            learning_rate=config.learning_rate,
            burn_in_fraction=config.burn_in_fraction,
            seed=run.seed,
            auto_balance_alpha=config.auto_balance_alpha,
            validation_interval=0,
        )

    def run_one(self, run: RunSpec) -> RunRow:
        train_pool, test = self.datasets()
        reduced = sample_reduction(train_pool, run.fraction, run.seed)
        if reduced.size < 2:
            raise ConfigurationError(
                f"{run.run_id}: fraction {run.fraction:g} of {train_pool.size} samples leaves "
                f"{reduced.size}; training needs at least 2"
            )
        started = self._monotonic()
        net = build_composite(architecture_for(self.config), run.variant, run.seed)
        schedule = self.schedule_for(run, reduced.size)
        net, history = train(net, reduced, test, schedule, run.task.kind)
        evaluation = evaluate(net, test, run.task.kind)
        elapsed = self._monotonic() - started
        save_network(
            net,
            self.settings.output_dir / "checkpoints" / run.run_id,
            config_hash=self.config.config_hash,
            epoch=self.config.epochs,
        )
        LOGGER.info(
            "Finished %s: metric=%.6f in %.1fs",
            run.run_id,
            evaluation.metric,
            elapsed,
            extra={
                "run_id": run.run_id,
                "metric": evaluation.metric,
                "coop_loss": evaluation.coop_loss,
                "final_alpha": history.final_alpha,
                "history": describe_history(history),
                "wall_seconds": elapsed,
            },
        )
        details = evaluation.details
        return RunRow(
            task=run.task.value,
            variant=run.variant.label,
            fraction=run.fraction,
            seed=run.seed,
            metric=evaluation.metric,
            coop_loss=evaluation.coop_loss,
            # Logged always; reported only when record_wall_time is set.
            wall_seconds=elapsed if self.config.record_wall_time else 0.0,
            bottleneck=net.bottleneck,
            config_hash=self.config.config_hash,
            dice=details.get("dice"),
            precision=details.get("precision"),
            recall=details.get("recall"),
            f1=details.get("f1"),
        )

    def run(self) -> ExperimentReport:
        runs = self.config.runs()
        LOGGER.info(
            "Running %d runs of %s with %d worker(s), config %s",
            len(runs),
            self.config.task.value,
            self.settings.workers,
            self.config.config_hash,
        )
        self.datasets()
        if self.settings.workers == 1 or len(runs) == 1:
            rows = [self.run_one(run) for run in runs]
        else:
            with ThreadPoolExecutor(max_workers=self.settings.workers) as pool:
                rows = list(pool.map(self.run_one, runs))
        ordered = tuple(sorted(rows, key=lambda row: row.sort_key))
        return ExperimentReport(
            config_hash=self.config.config_hash,
            harness=self.config.harness(),
            rows=ordered,
            aggregates=aggregate(ordered),
        )


def run_experiment(
    config: ExperimentConfig,
    settings: Settings,
    *,
    source: DatasetSource | None = None,
    monotonic: Clock = time.monotonic,
) -> ExperimentReport:
    return ExperimentRunner(config, settings, source=source, monotonic=monotonic).run()
