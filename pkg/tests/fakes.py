from __future__ import annotations

import numpy as np

from coopsubnet.coop import ArchitectureConfig, BlockKind, BlockSpec, CompositeNetwork
from coopsubnet.data import Dataset, Provenance
from coopsubnet.diffcore import rng_stream, tensor_create
from coopsubnet.models import Task
from coopsubnet.nn import Dense


class FakeClock:
    """Advances by ``step`` seconds every time it is read."""

    def __init__(self, current: float = 0.0, step: float = 1.5) -> None:
        self.current = current
        self.step = step

    def monotonic(self) -> float:
        value = self.current
        self.current += self.step
        return value


class FakeDatasetSource:
    def __init__(self, train: Dataset, test: Dataset) -> None:
        self.train = train
        self.test = test
        self.loads: list[Task] = []

    def load(self, task: Task) -> tuple[Dataset, Dataset]:
        self.loads.append(task)
        return self.train, self.test


def tiny_conv_architecture(feature_width: int = 8, outputs: int = 3) -> ArchitectureConfig:
    return ArchitectureConfig(
        name="tiny-conv",
        input_shape=(1, 6, 6),
        blocks=(
            BlockSpec("conv1", BlockKind.CONV, 2, kernel=3, padding=1, pool=2),
            BlockSpec("fc1", BlockKind.DENSE, feature_width),
            BlockSpec("output", BlockKind.OUTPUT, outputs),
        ),
    )


def tiny_dense_architecture(inputs: int = 4, feature_width: int = 6) -> ArchitectureConfig:
    return ArchitectureConfig(
        name="tiny-dense",
        input_shape=(inputs,),
        blocks=(
            BlockSpec("fc1", BlockKind.DENSE, feature_width),
            BlockSpec("output", BlockKind.OUTPUT, 2),
        ),
    )


def band_classification(count: int, seed: int) -> Dataset:
    """6x6 images whose label is the brightest of three vertical bands."""
    rng = rng_stream(seed, "bands")
    labels = rng.integers(0, 3, size=count)
    images = rng.uniform(0.0, 0.2, size=(count, 1, 6, 6))
    for index, label in enumerate(labels):
        images[index, 0, :, 2 * label : 2 * label + 2] += 0.8
    return Dataset(
        tensor_create(images.shape, images), labels.astype(np.int64), Provenance("bands")
    )


def linear_regression(count: int, seed: int, inputs: int = 4) -> Dataset:
    rng = rng_stream(seed, "linear")
    x = rng.normal(size=(count, inputs))
    y = x @ np.arange(1.0, 2 * inputs + 1).reshape(inputs, 2) / inputs
    return Dataset(tensor_create(x.shape, x), tensor_create(y.shape, y), Provenance("linear"))


def identity_autoencoder(net: CompositeNetwork) -> CompositeNetwork:
    """Swap in an F -> F -> F identity branch so the reconstruction is exact."""
    width = net.feature_width
    encoder = Dense("encoder", width, width, 0)
    decoder = Dense("decoder", width, width, 0)
    encoder.weight.assign(np.eye(width))
    decoder.weight.assign(np.eye(width))
    net.encoder = (encoder,)
    net.decoder = (decoder,)
    return net
