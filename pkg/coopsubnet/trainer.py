"""Adam and the two-phase routine: burn-in with the cooperating branch disabled, then joint."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt

from coopsubnet.checkpoint import Checkpoint, CheckpointError, save_checkpoint
from coopsubnet.config import ConfigurationError
from coopsubnet.coop import CompositeNetwork, composite_loss, forward_composite
from coopsubnet.data import Dataset
from coopsubnet.diffcore import (
    ContractError,
    Graph,
    ShapeError,
    Tensor,
    backward,
    freeze,
    rng_stream,
)
from coopsubnet.metrics import accuracy, landmark_error, segmentation_scores
from coopsubnet.models import Mode, Phase, TaskKind
from coopsubnet.nn import Parameter, relative_reconstruction_loss

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class TrainSchedule:
    total_epochs: int
    batch_size: int = 32
    alpha: float = 1.0
    learning_rate: float = 1e-3
    burn_in_fraction: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    auto_balance_alpha: bool = False
    eval_batch_size: int = 256
    # Validate every N epochs and on the last one; 0 disables validation during training.
    validation_interval: int = 1

    def __post_init__(self) -> None:
        problems = []
        if self.total_epochs < 1:
            problems.append(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.batch_size < 2:
            problems.append(f"batch_size must be >= 2, got {self.batch_size}")
        if self.eval_batch_size < 1:
            problems.append(f"eval_batch_size must be >= 1, got {self.eval_batch_size}")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            problems.append(f"burn_in_fraction must be in [0, 1), got {self.burn_in_fraction}")
        if not (self.alpha >= 0.0 and math.isfinite(self.alpha)):
            problems.append(f"alpha must be >= 0, got {self.alpha}")
        if not self.learning_rate > 0.0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if not all(0.0 < beta < 1.0 for beta in self.adam_betas):
            problems.append(f"adam betas must be in (0, 1), got {self.adam_betas}")
        if not self.adam_eps > 0.0:
            problems.append(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.validation_interval < 0:
            problems.append("validation_interval must be >= 0")
        if problems:
            raise ConfigurationError("; ".join(problems), tuple(problems))

    @property
    def burn_in_epochs(self) -> int:
        # Rounding first keeps 0.05 * 100 at exactly 5 epochs.
        return math.ceil(round(self.burn_in_fraction * self.total_epochs, 9))

    def phase(self, epoch: int) -> Phase:
        return Phase.BURN_IN if epoch < self.burn_in_epochs else Phase.JOINT

    def validates(self, epoch: int) -> bool:
        if self.validation_interval == 0:
            return False
        return epoch == self.total_epochs - 1 or (epoch + 1) % self.validation_interval == 0


@dataclass(frozen=True, slots=True)
class AdamState:
    first: Mapping[str, Tensor] = field(default_factory=dict)
    second: Mapping[str, Tensor] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: AdamState,
    schedule: TrainSchedule,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update of every block in ``params``; inputs are not modified."""
    beta1, beta2 = schedule.adam_betas
    step = state.step + 1
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    updated: dict[str, Tensor] = {}
    first: dict[str, Tensor] = {}
    second: dict[str, Tensor] = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            raise ContractError(f"no gradient for parameter {name!r}")
        if grad.shape != value.shape:
            raise ShapeError(
                f"{name}: gradient {list(grad.shape)} vs parameter {list(value.shape)}"
            )
        m = state.first.get(name)
        v = state.second.get(name)
        m = (1.0 - beta1) * grad if m is None else beta1 * m + (1.0 - beta1) * grad
        v = (1.0 - beta2) * grad * grad if v is None else beta2 * v + (1.0 - beta2) * grad * grad
        first[name] = freeze(m)
        second[name] = freeze(v)
        step_size = schedule.learning_rate * (m / correction1)
        updated[name] = freeze(value - step_size / (np.sqrt(v / correction2) + schedule.adam_eps))
    return updated, AdamState(first=first, second=second, step=step)


def _apply(
    parameters: tuple[Parameter, ...],
    grads: Mapping[str, Tensor],
    state: AdamState,
    schedule: TrainSchedule,
) -> AdamState:
    values = {parameter.name: parameter.value for parameter in parameters}
    updated, state = adam_step(values, grads, state, schedule)
    for parameter in parameters:
        parameter.value = updated[parameter.name]
    return state


@dataclass(frozen=True, slots=True)
class EpochRecord:
    epoch: int
    phase: Phase
    primary_loss: float
    coop_loss: float | None
    total_loss: float
    alpha: float
    validation_metric: float | None = None


@dataclass(frozen=True, slots=True)
class TrainHistory:
    records: tuple[EpochRecord, ...]

    @property
    def final_alpha(self) -> float:
        return self.records[-1].alpha


def _batches(order: npt.NDArray[np.intp], size: int) -> Iterator[npt.NDArray[np.intp]]:
    for start in range(0, len(order), size):
        batch = order[start : start + size]
        # Train-mode batch norm cannot normalize a single sample.
        if len(batch) == 1 and len(order) > 1:
            return
        yield batch


def train(
    net: CompositeNetwork,
    train_data: Dataset,
    val_data: Dataset,
    schedule: TrainSchedule,
    task: TaskKind,
) -> tuple[CompositeNetwork, TrainHistory]:
    """Train ``net`` in place. Shuffling and dropout masks derive from ``schedule.seed`` only."""
    if train_data.size == 0 or val_data.size == 0:
        raise ConfigurationError("training and validation sets must not be empty")
    if schedule.batch_size > train_data.size:
        raise ConfigurationError(
            f"batch_size {schedule.batch_size} exceeds the {train_data.size} training samples"
        )
    if net.has_autoencoder and schedule.auto_balance_alpha and schedule.burn_in_epochs == 0:
        LOGGER.warning(
            "alpha auto-balance needs at least one burn-in epoch; keeping %g", schedule.alpha
        )

    primary = net.primary_parameters()
    coop = net.coop_parameters()
    primary_state = AdamState()
    coop_state = AdamState()
    alpha = schedule.alpha
    records: list[EpochRecord] = []
    for epoch in range(schedule.total_epochs):
        phase = schedule.phase(epoch)
        weight = 0.0 if phase is Phase.BURN_IN else alpha
        order = rng_stream(schedule.seed, "shuffle", epoch).permutation(train_data.size)
        seen = 0
        sums = {"primary": 0.0, "coop": 0.0, "total": 0.0}
        for index, batch in enumerate(_batches(order, schedule.batch_size)):
            inputs, targets = train_data.take(batch)
            result = forward_composite(
                net,
                inputs,
                Mode.TRAIN,
                rng=rng_stream(schedule.seed, "dropout", epoch, index),
            )
            loss = composite_loss(
                result,
                targets,
                net.variant,
                task.loss_kind,
                alpha=weight,
                weights=primary,
            )
            grads = backward(result.graph, loss.total)
            primary_state = _apply(primary, grads, primary_state, schedule)
            if coop and phase is Phase.JOINT:
                coop_state = _apply(coop, grads, coop_state, schedule)
            seen += len(batch)
            sums["primary"] += loss.primary.value * len(batch)
            sums["coop"] += (loss.coop.value if loss.coop is not None else 0.0) * len(batch)
            sums["total"] += loss.value * len(batch)

        means = {key: total / seen for key, total in sums.items()}
        coop_loss = means["coop"] if net.has_autoencoder else None
        if (
            schedule.auto_balance_alpha
            and net.has_autoencoder
            and epoch == schedule.burn_in_epochs - 1
        ):
            alpha = _balanced_alpha(alpha, means["primary"], means["coop"])
        metric = (
            evaluate(net, val_data, task, batch_size=schedule.eval_batch_size).metric
            if schedule.validates(epoch)
            else None
        )
        records.append(
            EpochRecord(
                epoch=epoch,
                phase=phase,
                primary_loss=means["primary"],
                coop_loss=coop_loss,
                total_loss=means["total"],
                alpha=weight,
                validation_metric=metric,
            )
        )
        LOGGER.info(
            "epoch %d/%d %s primary=%.6f coop=%s total=%.6f",
            epoch + 1,
            schedule.total_epochs,
            phase.value,
            means["primary"],
            "-" if coop_loss is None else f"{coop_loss:.6f}",
            means["total"],
            extra={"epoch": epoch, "phase": phase.value, "validation_metric": metric},
        )
    return net, TrainHistory(tuple(records))


def _balanced_alpha(current: float, primary_loss: float, coop_loss: float) -> float:
    # Puts alpha * coop loss at the primary loss's order of magnitude.
    if coop_loss <= 0.0 or not math.isfinite(primary_loss / coop_loss):
        LOGGER.warning(
            "Cannot balance alpha against a zero reconstruction loss; keeping %g", current
        )
        return current
    balanced = primary_loss / coop_loss
    LOGGER.warning("alpha auto-balanced from %g to %g at the end of burn-in", current, balanced)
    return balanced


@dataclass(frozen=True, slots=True)
class Evaluation:
    metric: float
    coop_loss: float | None
    details: Mapping[str, float] = field(default_factory=dict)


def evaluate(
    net: CompositeNetwork, data: Dataset, task: TaskKind, *, batch_size: int = 256
) -> Evaluation:
    """Task metric (accuracy, landmark error or detection F1) and the mean relative loss."""
    outputs: list[npt.NDArray[np.float64]] = []
    reconstruction: list[npt.NDArray[np.float64]] = []
    for start in range(0, data.size, batch_size):
        inputs, _ = data.take(np.arange(start, min(start + batch_size, data.size)))
        graph = Graph()
        result = forward_composite(net, inputs, Mode.EVAL, graph=graph)
        outputs.append(np.asarray(result.primary_output.value))
        if result.f_hat is not None:
            per_sample = relative_reconstruction_loss(graph, result.f, result.f_hat).per_sample
            if per_sample is not None:
                reconstruction.append(per_sample)
    predictions = np.concatenate(outputs)
    coop_loss = float(np.concatenate(reconstruction).mean()) if reconstruction else None

    if task is TaskKind.CLASSIFICATION:
        return Evaluation(accuracy(predictions.argmax(axis=1), data.targets), coop_loss)
    if task is TaskKind.REGRESSION:
        return Evaluation(landmark_error(predictions, data.targets), coop_loss)
    side = math.isqrt(predictions.shape[1])
    maps = np.clip(predictions, 0.0, 1.0).reshape(-1, side, side)
    truth = np.asarray(data.targets).reshape(-1, side, side).astype(np.uint8)
    scores = segmentation_scores(list(maps), list(truth))
    details = {
        "dice": scores.dice,
        "precision": scores.precision,
        "recall": scores.recall,
        "f1": scores.f1,
        "l2_error": scores.l2_error,
        "tp": float(scores.counts.tp),
        "fp": float(scores.counts.fp),
        "fn": float(scores.counts.fn),
    }
    return Evaluation(scores.f1, coop_loss, details)


def network_blocks(net: CompositeNetwork) -> dict[str, Tensor]:
    return {name: parameter.value for name, parameter in net.state().items()}


def save_network(net: CompositeNetwork, stem: Path, *, config_hash: str, epoch: int) -> Path:
    return save_checkpoint(stem, network_blocks(net), config_hash=config_hash, epoch=epoch)


def restore_network(net: CompositeNetwork, checkpoint: Checkpoint) -> None:
    state = net.state()
    if set(state) != set(checkpoint.blocks):
        missing = sorted(set(state) - set(checkpoint.blocks))
        unexpected = sorted(set(checkpoint.blocks) - set(state))
        raise CheckpointError(f"checkpoint mismatch: missing {missing}, unexpected {unexpected}")
    for name, parameter in state.items():
        try:
            parameter.assign(checkpoint.blocks[name])
        except ShapeError as exc:
            raise CheckpointError(str(exc)) from exc


def describe_history(history: TrainHistory) -> list[dict[str, Any]]:
    return [
        {
            "epoch": record.epoch,
            "phase": record.phase.value,
            "primary_loss": record.primary_loss,
            "coop_loss": record.coop_loss,
            "total_loss": record.total_loss,
            "alpha": record.alpha,
            "validation_metric": record.validation_metric,
        }
        for record in history.records
    ]
