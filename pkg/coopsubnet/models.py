"""Small domain records shared by the training core, the experiment runner and reports."""

from __future__ import annotations

from dataclasses import dataclass
from enum import StrEnum
from typing import TypedDict


class Mode(StrEnum):
    TRAIN = "train"
    EVAL = "eval"


class Phase(StrEnum):
    BURN_IN = "burn-in"
    JOINT = "joint"


class LossKind(StrEnum):
    CE = "CE"
    MSE = "MSE"


class TaskKind(StrEnum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"
    SEGMENTATION = "segmentation"

    @property
    def loss_kind(self) -> LossKind:
        return LossKind.CE if self is TaskKind.CLASSIFICATION else LossKind.MSE

    @property
    def higher_is_better(self) -> bool:
        return self is not TaskKind.REGRESSION


class Task(StrEnum):
    MNIST_REDUCED = "mnist-reduced"
    SYNTH_REGRESSION = "synth-regression"
    SYNTH_SEGMENTATION = "synth-segmentation"

    @property
    def kind(self) -> TaskKind:
        return {
            Task.MNIST_REDUCED: TaskKind.CLASSIFICATION,
            Task.SYNTH_REGRESSION: TaskKind.REGRESSION,
            Task.SYNTH_SEGMENTATION: TaskKind.SEGMENTATION,
        }[self]


class Variant(StrEnum):
    BASELINE = "Baseline"
    COOP = "CoopSubNet"
    COOP_L1 = "CoopSubNetL1"
    DROPOUT = "Dropout"
    L2REG = "L2Reg"
    HARDCON = "HardCon"

    @property
    def has_autoencoder(self) -> bool:
        return self in {Variant.COOP, Variant.COOP_L1}

    @property
    def needs_bottleneck(self) -> bool:
        return self in {Variant.COOP, Variant.COOP_L1, Variant.HARDCON}


@dataclass(frozen=True, slots=True)
class VariantSpec:
    """One comparison variant together with the hyperparameters it reads."""

    kind: Variant
    bottleneck: int | None = None
    alpha: float = 1.0
    l1_weight: float = 1e-3
    dropout_rate: float = 0.5
    weight_decay: float = 1e-4

    @property
    def label(self) -> str:
        return self.kind.value


@dataclass(frozen=True, slots=True)
class RunSpec:
    """A single (variant, fraction, seed) cell of an experiment grid."""

    task: Task
    variant: VariantSpec
    fraction: float
    seed: int

    @property
    def sort_key(self) -> tuple[str, str, int, float, int]:
        return (
            self.task.value,
            self.variant.label,
            self.variant.bottleneck or 0,
            self.fraction,
            self.seed,
        )

    @property
    def run_id(self) -> str:
        bottleneck = f"-L{self.variant.bottleneck}" if self.variant.bottleneck else ""
        return f"{self.task.value}_{self.variant.label}{bottleneck}_f{self.fraction:g}_s{self.seed}"


@dataclass(frozen=True, slots=True)
class RunRow:
    """Raw result of one training run, in report column order."""

    task: str
    variant: str
    fraction: float
    seed: int
    metric: float
    coop_loss: float | None
    wall_seconds: float
    bottleneck: int | None
    config_hash: str
    dice: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None

    @property
    def sort_key(self) -> tuple[str, str, int, float, int]:
        return (self.task, self.variant, self.bottleneck or 0, self.fraction, self.seed)

    def to_api_dict(self) -> RunRowPayload:
        return {
            "task": self.task,
            "variant": self.variant,
            "fraction": self.fraction,
            "seed": self.seed,
            "metric": self.metric,
            "coop_loss": self.coop_loss,
            "wall_seconds": self.wall_seconds,
            "bottleneck": self.bottleneck,
            "config_hash": self.config_hash,
            "dice": self.dice,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass(frozen=True, slots=True)
class AggregateRow:
    """Mean and sample standard deviation over seeds for one table cell."""

    task: str
    variant: str
    bottleneck: int | None
    fraction: float
    runs: int
    metric_mean: float
    metric_std: float
    coop_loss_mean: float | None
    config_hash: str

    def to_api_dict(self) -> AggregatePayload:
        return {
            "task": self.task,
            "variant": self.variant,
            "bottleneck": self.bottleneck,
            "fraction": self.fraction,
            "runs": self.runs,
            "metric_mean": self.metric_mean,
            "metric_std": self.metric_std,
            "coop_loss_mean": self.coop_loss_mean,
            "config_hash": self.config_hash,
        }


@dataclass(frozen=True, slots=True)
class ExperimentReport:
    config_hash: str
    harness: tuple[tuple[str, str], ...]
    rows: tuple[RunRow, ...]
    aggregates: tuple[AggregateRow, ...]

    def to_api_dict(self) -> ReportPayload:
        return {
            "config_hash": self.config_hash,
            "harness": dict(self.harness),
            "rows": [row.to_api_dict() for row in self.rows],
            "aggregates": [row.to_api_dict() for row in self.aggregates],
        }


class RunRowPayload(TypedDict):
    task: str
    variant: str
    fraction: float
    seed: int
    metric: float
    coop_loss: float | None
    wall_seconds: float
    bottleneck: int | None
    config_hash: str
    dice: float | None
    precision: float | None
    recall: float | None
    f1: float | None


class AggregatePayload(TypedDict):
    task: str
    variant: str
    bottleneck: int | None
    fraction: float
    runs: int
    metric_mean: float
    metric_std: float
    coop_loss_mean: float | None
    config_hash: str


class ReportPayload(TypedDict):
    config_hash: str
    harness: dict[str, str]
    rows: list[RunRowPayload]
    aggregates: list[AggregatePayload]
