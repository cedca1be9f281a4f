"""Shared fixtures: tiny 64-bit networks and batches."""

from typing import Optional

import numpy as np
import pytest

from prunetax.core.engine import forward
from prunetax.core.mask import PruneMask
from prunetax.core.network import Batch, LayerKind, LayerSpec, LossKind, NetworkGraph, build_network
from prunetax.services.datasets import DataSplits, LabelledData


def tiny_layers(classes: int = 3) -> list[LayerSpec]:
    """1x6x6 -> conv(3,k3) -> relu -> pool2 -> conv(2,k2) -> relu -> flatten -> dense(classes)."""
    return [
        LayerSpec(kind=LayerKind.CONV, name="conv1", in_channels=1, out_channels=3, kernel=3),
        LayerSpec(kind=LayerKind.RELU, name="relu1"),
        LayerSpec(kind=LayerKind.MAXPOOL, name="pool1", kernel=2, stride=2),
        LayerSpec(kind=LayerKind.CONV, name="conv2", in_channels=3, out_channels=2, kernel=2),
        LayerSpec(kind=LayerKind.RELU, name="relu2"),
        LayerSpec(kind=LayerKind.FLATTEN, name="flatten"),
        LayerSpec(kind=LayerKind.DENSE, name="fc", in_channels=2, out_channels=classes),
    ]


def make_tiny_net(seed: int = 0, classes: int = 3) -> NetworkGraph:
    return build_network(tiny_layers(classes), (1, 6, 6), seed=seed, dtype=np.float64)


def make_batch(seed: int = 0, n: int = 4, shape=(1, 6, 6), classes: int = 3) -> Batch:
    rng = np.random.default_rng(seed + 1000)
    return Batch(
        inputs=rng.standard_normal((n,) + tuple(shape)),
        labels=rng.integers(0, classes, size=n),
    )


def make_splits(seed: int = 0, n: int = 96, shape=(1, 6, 6), classes: int = 3) -> DataSplits:
    rng = np.random.default_rng(seed + 2000)

    def part(count: int) -> LabelledData:
        return LabelledData(
            rng.standard_normal((count,) + tuple(shape)).astype(np.float64),
            rng.integers(0, classes, size=count),
            classes,
        )

    return DataSplits(retrain=part(n), eval=part(n // 2), test=part(n // 2))


def loss_changes(net: NetworkGraph, batches: list[Batch], mask: Optional[PruneMask] = None) -> dict[tuple[int, int], float]:
    """
    Measured loss change from removing each unpruned conv channel on its own.

    Keys are (layer, channel); values are the sample-weighted mean loss with
    that channel masked minus the loss of `net` as given.
    """
    mask = mask if mask is not None else PruneMask.empty(net)

    def mean_loss(model: NetworkGraph) -> float:
        total = sum(forward(model, batch).loss * batch.size for batch in batches)
        return total / sum(batch.size for batch in batches)

    base = mean_loss(net)
    changes = {}
    for layer in net.prunable_layers():
        for channel in np.flatnonzero(~mask.pruned[layer]):
            trial, trial_mask = net.copy(), mask.copy()
            trial_mask.mark(trial, layer, int(channel))
            trial_mask.apply(trial)
            changes[(layer, int(channel))] = mean_loss(trial) - base
    return changes


@pytest.fixture
def tiny_net() -> NetworkGraph:
    return make_tiny_net(0)


@pytest.fixture
def tiny_batch() -> Batch:
    return make_batch(0)


@pytest.fixture
def tiny_splits() -> DataSplits:
    return make_splits(0)


@pytest.fixture
def linear_net() -> NetworkGraph:
    """A single dense layer 4 -> 3 with an mse loss."""
    layers = [LayerSpec(kind=LayerKind.DENSE, name="fc", in_channels=4, out_channels=3)]
    return build_network(layers, (4, 1, 1), seed=3, loss_kind=LossKind.MSE, dtype=np.float64)
