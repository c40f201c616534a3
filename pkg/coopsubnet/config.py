"""Validated process settings and the line-oriented experiment configuration format."""

from __future__ import annotations

import hashlib
import math
import os
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from enum import StrEnum
from pathlib import Path
from typing import Any

from coopsubnet.models import RunSpec, Task, Variant, VariantSpec


class ConfigurationError(ValueError):
    """Raised when configuration is invalid; ``problems`` lists every issue found."""

    def __init__(self, message: str, problems: tuple[str, ...] = ()) -> None:
        self.problems = problems or (message,)
        super().__init__(message)


class Schedule(StrEnum):
    NONE = "none"
    TABLE1 = "table1"
    TABLE2 = "table2"


# Bottleneck per training fraction for the reduced-MNIST comparison.
TABLE1_BOTTLENECKS: Mapping[float, int] = {0.005: 16, 0.01: 64, 0.1: 256, 0.5: 512, 1.0: 512}
TABLE2_BOTTLENECKS = (1, 4, 16)
TABLE2_FRACTION = 0.01

_LOG_LEVELS = frozenset({"CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"})
_LIST_KEYS = ("variant", "fraction", "seed")
_SCALAR_KEYS = frozenset(
    {
        "task",
        "schedule",
        "epochs",
        "batch_size",
        "learning_rate",
        "burn_in_fraction",
        "auto_balance_alpha",
        "attach",
        "output_dir",
        "workers",
        "record_wall_time",
        "train_samples",
        "test_samples",
        "latent_dim",
        "ambient_dim",
        "noise",
        "image_size",
        "patch_size",
        "patch_stride",
        "nuclei_per_image",
        "data_seed",
        "test_limit",
        "feature_width",
    }
)
_VARIANT_OPTIONS = {
    "L": "bottleneck",
    "alpha": "alpha",
    "l1": "l1_weight",
    "p": "dropout_rate",
    "decay": "weight_decay",
}
_TRUE = frozenset({"true", "yes", "on", "1"})
_FALSE = frozenset({"false", "no", "off", "0"})

_TASK_DEFAULTS: Mapping[Task, Mapping[str, int]] = {
    Task.MNIST_REDUCED: {"epochs": 30, "image_size": 28, "train_samples": 0, "test_samples": 0},
    Task.SYNTH_REGRESSION: {
        "epochs": 60,
        "image_size": 16,
        "train_samples": 150,
        "test_samples": 500,
    },
    Task.SYNTH_SEGMENTATION: {
        "epochs": 20,
        "image_size": 48,
        "train_samples": 8,
        "test_samples": 2,
    },
}


def _bounded_integer(raw_value: str, minimum: int, maximum: int | None) -> int:
    """Parse an integer in ``[minimum, maximum]``; ValueError messages omit the field name."""
    try:
        value = int(raw_value)
    except ValueError:
        raise ValueError(f"must be an integer, got {raw_value!r}") from None
    if value < minimum or (maximum is not None and value > maximum):
        expected = f">= {minimum}" if maximum is None else f"between {minimum} and {maximum}"
        raise ValueError(f"must be {expected}, got {value}")
    return value


@dataclass(frozen=True, slots=True)
class Settings:
    """Process-level settings; command-line flags override them."""

    data_root: Path = Path("data")
    output_dir: Path = Path("results")
    workers: int = 1
    log_level: str = "INFO"

    @classmethod
    def from_env(cls, environment: Mapping[str, str] | None = None) -> Settings:
        env = os.environ if environment is None else environment
        log_level = env.get("LOG_LEVEL", "INFO").upper()
        if log_level not in _LOG_LEVELS:
            raise ConfigurationError(
                "LOG_LEVEL must be one of CRITICAL, ERROR, WARNING, INFO or DEBUG"
            )
        data_root = env.get("COOPSUBNET_DATA_ROOT", "").strip() or "data"
        output_dir = env.get("COOPSUBNET_OUTPUT_DIR", "").strip() or "results"
        try:
            workers = _bounded_integer(env.get("COOPSUBNET_WORKERS", "1"), 1, 64)
        except ValueError as exc:
            raise ConfigurationError(f"COOPSUBNET_WORKERS {exc}") from exc
        return cls(
            data_root=Path(data_root),
            output_dir=Path(output_dir),
            workers=workers,
            log_level=log_level,
        )


def parse_fraction(raw_value: str) -> float:
    """Accept ``0.01`` or ``1%``."""
    text = raw_value.strip()
    value = float(text[:-1]) / 100.0 if text.endswith("%") else float(text)
    if not math.isfinite(value):
        raise ValueError(f"fraction must be finite, got {raw_value!r}")
    return value


def _table_lookup(fraction: float) -> int | None:
    return next(
        (
            bottleneck
            for key, bottleneck in TABLE1_BOTTLENECKS.items()
            if math.isclose(key, fraction, rel_tol=1e-9)
        ),
        None,
    )


class _Fields:
    """Reads scalar keys, recording a problem and falling back to the default on bad input."""

    def __init__(self, scalars: Mapping[str, tuple[int, str]], problems: list[str]) -> None:
        self._scalars = scalars
        self._problems = problems

    def _raw(self, key: str) -> tuple[int, str] | None:
        return self._scalars.get(key)

    def _problem(self, key: str, message: str) -> None:
        line = self._scalars[key][0]
        self._problems.append(f"line {line}: {key} {message}")

    def text(self, key: str, default: str) -> str:
        raw = self._raw(key)
        return default if raw is None else raw[1]

    def integer(
        self, key: str, default: int, *, minimum: int = 1, maximum: int | None = None
    ) -> int:
        raw = self._raw(key)
        if raw is None:
            return default
        try:
            return _bounded_integer(raw[1], minimum, maximum)
        except ValueError as exc:
            self._problem(key, str(exc))
            return default

    def optional_integer(self, key: str, *, minimum: int = 1) -> int | None:
        if self._raw(key) is None:
            return None
        return self.integer(key, minimum, minimum=minimum)

    def real(
        self,
        key: str,
        default: float,
        *,
        minimum: float,
        maximum: float | None = None,
        exclusive: bool = False,
    ) -> float:
        raw = self._raw(key)
        if raw is None:
            return default
        try:
            value = float(raw[1])
        except ValueError:
            self._problem(key, f"must be a number, got {raw[1]!r}")
            return default
        below = value <= minimum if exclusive else value < minimum
        if not math.isfinite(value) or below or (maximum is not None and value >= maximum):
            low = f"> {minimum}" if exclusive else f">= {minimum}"
            high = "" if maximum is None else f" and < {maximum}"
            self._problem(key, f"must be {low}{high}, got {raw[1]}")
            return default
        return value

    def flag(self, key: str, default: bool) -> bool:
        raw = self._raw(key)
        if raw is None:
            return default
        value = raw[1].lower()
        if value in _TRUE:
            return True
        if value in _FALSE:
            return False
        self._problem(key, f"must be true or false, got {raw[1]!r}")
        return default

    def choice[E: StrEnum](self, key: str, enum: type[E], default: E) -> E:
        raw = self._raw(key)
        if raw is None:
            return default
        try:
            return enum(raw[1])
        except ValueError:
            allowed = ", ".join(member.value for member in enum)
            self._problem(key, f"must be one of {allowed}, got {raw[1]!r}")
            return default


def _parse_variant(line: int, value: str, problems: list[str]) -> VariantSpec | None:
    name, *options = value.split()
    try:
        kind = Variant(name)
    except ValueError:
        allowed = ", ".join(member.value for member in Variant)
        problems.append(f"line {line}: unknown variant {name!r}; allowed: {allowed}")
        return None
    overrides: dict[str, Any] = {}
    for option in options:
        option_key, separator, option_value = option.partition("=")
        attribute = _VARIANT_OPTIONS.get(option_key)
        if not separator or attribute is None:
            known = ", ".join(_VARIANT_OPTIONS)
            problems.append(f"line {line}: {name} option {option!r} is not one of {known}")
            continue
        try:
            number: float = int(option_value) if attribute == "bottleneck" else float(option_value)
        except ValueError:
            problems.append(f"line {line}: {name} option {option_key} must be numeric")
            continue
        if attribute == "bottleneck" and not kind.needs_bottleneck:
            problems.append(f"line {line}: {name} does not take a bottleneck L")
            continue
        if attribute == "bottleneck" and number < 1:
            problems.append(f"line {line}: {name} bottleneck L must be >= 1, got {option_value}")
            continue
        if attribute == "dropout_rate" and not 0.0 <= number < 1.0:
            problems.append(f"line {line}: {name} dropout rate p must be in [0, 1)")
            continue
        if attribute != "dropout_rate" and (number < 0 or not math.isfinite(number)):
            problems.append(f"line {line}: {name} option {option_key} must be >= 0")
            continue
        overrides[attribute] = number
    return VariantSpec(kind=kind, **overrides)


@dataclass(frozen=True, slots=True)
class ExperimentConfig:
    """A validated experiment: every (variant, fraction, seed) triple is exactly one run."""

    task: Task
    variants: tuple[VariantSpec, ...]
    fractions: tuple[float, ...]
    seeds: tuple[int, ...]
    schedule: Schedule = Schedule.NONE
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    burn_in_fraction: float = 0.05
    auto_balance_alpha: bool = False
    attach: str = "after-final-dense-hidden"
    output_dir: Path | None = None
    workers: int | None = None
    record_wall_time: bool = False
    train_samples: int = 0
    test_samples: int = 0
    latent_dim: int = 4
    ambient_dim: int = 16
    noise: float = 0.01
    image_size: int = 28
    patch_size: int = 16
    patch_stride: int = 8
    nuclei_per_image: int = 12
    data_seed: int = 0
    test_limit: int | None = None
    feature_width: int | None = None
    source_text: str = field(default="", compare=False, repr=False)

    @classmethod
    def load(cls, path: Path) -> ExperimentConfig:
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.parse(text)

    @classmethod
    def parse(cls, text: str) -> ExperimentConfig:
        problems: list[str] = []
        scalars: dict[str, tuple[int, str]] = {}
        lists: dict[str, list[tuple[int, str]]] = {key: [] for key in _LIST_KEYS}
        for number, raw_line in enumerate(text.splitlines(), start=1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            key, separator, value = (part.strip() for part in line.partition("="))
            if not separator or not key or not value:
                problems.append(f"line {number}: expected 'key = value', got {raw_line.strip()!r}")
            elif key in lists:
                lists[key].append((number, value))
            elif key not in _SCALAR_KEYS:
                problems.append(f"line {number}: unknown key {key!r}")
            elif key in scalars:
                first = scalars[key][0]
                problems.append(f"line {number}: {key} is set twice (first on line {first})")
            else:
                scalars[key] = (number, value)

        fields = _Fields(scalars, problems)
        task: Task | None = None
        if "task" not in scalars:
            allowed = ", ".join(member.value for member in Task)
            problems.append(f"task is required ({allowed})")
        else:
            task = fields.choice("task", Task, Task.MNIST_REDUCED)
        defaults = _TASK_DEFAULTS[task or Task.MNIST_REDUCED]
        schedule = fields.choice("schedule", Schedule, Schedule.NONE)

        variants = [
            spec
            for line, value in lists["variant"]
            if (spec := _parse_variant(line, value, problems)) is not None
        ]
        fractions: list[float] = []
        for line, value in lists["fraction"]:
            try:
                fraction = parse_fraction(value)
            except ValueError:
                problems.append(f"line {line}: fraction must be a number or percentage")
                continue
            if not 0.0 < fraction <= 1.0:
                problems.append(f"line {line}: fraction must be in (0, 1], got {value}")
                continue
            fractions.append(fraction)
        seeds: list[int] = []
        for line, value in lists["seed"]:
            try:
                seed = int(value)
            except ValueError:
                problems.append(f"line {line}: seed must be an integer, got {value!r}")
                continue
            if seed < 0:
                problems.append(f"line {line}: seed must be >= 0, got {seed}")
                continue
            seeds.append(seed)

        if schedule is Schedule.TABLE2:
            variants = variants or [VariantSpec(Variant.HARDCON), VariantSpec(Variant.COOP)]
            fractions = fractions or [TABLE2_FRACTION]
        if schedule is Schedule.TABLE1:
            fractions = fractions or list(TABLE1_BOTTLENECKS)
            problems.extend(
                f"fraction {fraction:g} has no table1 bottleneck; "
                f"use one of {', '.join(f'{key:g}' for key in TABLE1_BOTTLENECKS)}"
                for fraction in fractions
                if _table_lookup(fraction) is None
            )
        if schedule is not Schedule.NONE:
            problems.extend(
                f"variant {spec.label} sets L but schedule {schedule.value} assigns bottlenecks"
                for spec in variants
                if spec.bottleneck is not None and spec.kind in {Variant.COOP, Variant.HARDCON}
            )
        else:
            problems.extend(
                f"variant {spec.label} needs a bottleneck (add L=<width>)"
                for spec in variants
                if spec.bottleneck is None and spec.kind in {Variant.COOP, Variant.HARDCON}
            )
        if not variants:
            problems.append("at least one variant is required")
        if not fractions:
            problems.append("at least one fraction is required")
        if len(set(fractions)) != len(fractions):
            problems.append("fractions must not repeat")
        if len(set(seeds)) != len(seeds):
            problems.append("seeds must not repeat")
        if len(set(variants)) != len(variants):
            problems.append("variants must not repeat")

        latent_dim = fields.integer("latent_dim", 4)
        ambient_dim = fields.integer("ambient_dim", 16, minimum=2)
        if latent_dim >= ambient_dim:
            problems.append(f"latent_dim ({latent_dim}) must be < ambient_dim ({ambient_dim})")
        if ambient_dim % 2:
            problems.append(f"ambient_dim must be even, got {ambient_dim}")
        patch_size = fields.integer("patch_size", 16, minimum=4)
        image_size = fields.integer("image_size", defaults["image_size"], minimum=4)
        if task is Task.SYNTH_SEGMENTATION and patch_size > image_size:
            problems.append(f"patch_size ({patch_size}) must be <= image_size ({image_size})")
        if task is Task.SYNTH_SEGMENTATION and patch_size % 4:
            problems.append(f"patch_size must be a multiple of 4, got {patch_size}")
        if task is Task.MNIST_REDUCED and "image_size" in scalars and image_size != 28:
            problems.append("image_size is fixed at 28 for mnist-reduced")

        output_dir = fields.text("output_dir", "")
        config = cls(
            task=task or Task.MNIST_REDUCED,
            variants=tuple(variants),
            fractions=tuple(fractions),
            seeds=tuple(seeds) or (0, 1, 2, 3, 4),
            schedule=schedule,
            epochs=fields.integer("epochs", defaults["epochs"], maximum=100_000),
            batch_size=fields.integer("batch_size", 32, minimum=2),
            learning_rate=fields.real("learning_rate", 1e-3, minimum=0.0, exclusive=True),
            burn_in_fraction=fields.real("burn_in_fraction", 0.05, minimum=0.0, maximum=1.0),
            auto_balance_alpha=fields.flag("auto_balance_alpha", False),
            attach=fields.text("attach", "after-final-dense-hidden"),
            output_dir=Path(output_dir) if output_dir else None,
            workers=fields.optional_integer("workers"),
            record_wall_time=fields.flag("record_wall_time", False),
            train_samples=fields.integer("train_samples", defaults["train_samples"], minimum=0),
            test_samples=fields.integer("test_samples", defaults["test_samples"], minimum=0),
            latent_dim=latent_dim,
            ambient_dim=ambient_dim,
            noise=fields.real("noise", 0.01, minimum=0.0),
            image_size=image_size,
            patch_size=patch_size,
            patch_stride=fields.integer("patch_stride", 8),
            nuclei_per_image=fields.integer("nuclei_per_image", 12),
            data_seed=fields.integer("data_seed", 0, minimum=0),
            test_limit=fields.optional_integer("test_limit"),
            feature_width=fields.optional_integer("feature_width", minimum=2),
            source_text=text,
        )
        if config.workers is not None and config.workers > 64:
            problems.append(f"workers must be between 1 and 64, got {config.workers}")
        if config.task is not Task.MNIST_REDUCED and config.train_samples < 2:
            problems.append(f"train_samples must be >= 2 for {config.task.value}")
        if problems:
            raise ConfigurationError(
                f"{len(problems)} configuration problem(s): " + "; ".join(problems),
                tuple(problems),
            )
        return config

    def bottleneck_for(self, spec: VariantSpec, fraction: float) -> list[int | None]:
        if spec.kind not in {Variant.COOP, Variant.HARDCON}:
            return [spec.bottleneck]
        if self.schedule is Schedule.TABLE1:
            return [_table_lookup(fraction)]
        if self.schedule is Schedule.TABLE2:
            return list(TABLE2_BOTTLENECKS)
        return [spec.bottleneck]

    def runs(self) -> list[RunSpec]:
        """Every run of the grid, sorted by its report key."""
        runs = [
            RunSpec(self.task, replace(spec, bottleneck=bottleneck), fraction, seed)
            for spec in self.variants
            for fraction in self.fractions
            for bottleneck in self.bottleneck_for(spec, fraction)
            for seed in self.seeds
        ]
        return sorted(runs, key=lambda run: run.sort_key)

    def harness(self) -> tuple[tuple[str, str], ...]:
        """Resolved harness values, including every default, in a fixed order."""
        return (
            ("task", self.task.value),
            ("schedule", self.schedule.value),
            ("variants", " | ".join(_describe_variant(spec) for spec in self.variants)),
            ("fractions", ",".join(f"{fraction:g}" for fraction in self.fractions)),
            ("seeds", ",".join(str(seed) for seed in self.seeds)),
            ("epochs", str(self.epochs)),
            ("batch_size", str(self.batch_size)),
            ("learning_rate", repr(self.learning_rate)),
            ("adam_betas", "0.9,0.999"),
            ("adam_eps", "1e-08"),
            ("burn_in_fraction", repr(self.burn_in_fraction)),
            ("auto_balance_alpha", str(self.auto_balance_alpha).lower()),
            ("attach", self.attach),
            ("record_wall_time", str(self.record_wall_time).lower()),
            ("train_samples", str(self.train_samples)),
            ("test_samples", str(self.test_samples)),
            ("latent_dim", str(self.latent_dim)),
            ("ambient_dim", str(self.ambient_dim)),
            ("noise", repr(self.noise)),
            ("image_size", str(self.image_size)),
            ("patch_size", str(self.patch_size)),
            ("patch_stride", str(self.patch_stride)),
            ("nuclei_per_image", str(self.nuclei_per_image)),
            ("data_seed", str(self.data_seed)),
            ("test_limit", "" if self.test_limit is None else str(self.test_limit)),
            ("feature_width", "" if self.feature_width is None else str(self.feature_width)),
        )

    @property
    def config_hash(self) -> str:
        """SHA-256 over the resolved harness values; output location and worker count excluded."""
        canonical = "\n".join(f"{key}={value}" for key, value in self.harness())
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _describe_variant(spec: VariantSpec) -> str:
    parts = [spec.label]
    if spec.bottleneck is not None:
        parts.append(f"L={spec.bottleneck}")
    if spec.kind.has_autoencoder:
        parts.append(f"alpha={spec.alpha!r}")
    if spec.kind is Variant.COOP_L1:
        parts.append(f"l1={spec.l1_weight!r}")
    if spec.kind is Variant.DROPOUT:
        parts.append(f"p={spec.dropout_rate!r}")
    if spec.kind is Variant.L2REG:
        parts.append(f"decay={spec.weight_decay!r}")
    return " ".join(parts)
