"""
SGD with momentum, with optional mask freezing.

Masked weights receive zero gradient and zero velocity, and the mask is
re-applied after every update, so pruned channels stay exactly zero
through any amount of retraining.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel

from prunetax.core.config import TrainingConfig
from prunetax.core.engine import accuracy, backward, forward
from prunetax.core.mask import PruneMask
from prunetax.core.network import Batch, NetworkGraph
from prunetax.services.datasets import LabelledData

logger = logging.getLogger(__name__)


@dataclass
class SGDMomentum:
    """Velocity state per parameterised layer."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    mask: Optional[PruneMask] = None
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, net: NetworkGraph, batch: Batch) -> float:
        """One update on `batch`; returns the batch loss before the update."""
        record = backward(net, forward(net, batch))
        for index in net.parametric_layers():
            p = net.params[index]
            self._update(f"w{index}", p.weight, record.weight_grads[index], net, index, is_bias=False)
            if p.bias is not None:
                self._update(f"b{index}", p.bias, record.bias_grads[index], net, index, is_bias=True)
        if self.mask is not None:
            self.mask.apply(net)
        return record.loss

    def _update(
        self,
        key: str,
        param: np.ndarray,
        grad: np.ndarray,
        net: NetworkGraph,
        index: int,
        is_bias: bool,
    ) -> None:
        g = grad + self.weight_decay * param if (self.weight_decay and not is_bias) else grad.copy()
        frozen = None
        if self.mask is not None:
            frozen = self.mask.output_mask(net, index) if is_bias else self.mask.weight_mask(net, index)
            g[frozen] = 0
        v = self.velocity.get(key)
        if v is None:
            v = np.zeros_like(param)
        v = self.momentum * v - self.learning_rate * g
        if frozen is not None:
            v[frozen] = 0
        self.velocity[key] = v
        param += v.astype(param.dtype, copy=False)


class TrainingReport(BaseModel):
    steps: int
    final_loss: float
    loss_curve: list[tuple[int, float]]


def train(
    net: NetworkGraph,
    data: LabelledData,
    config: TrainingConfig,
    seed: int = 0,
    on_log: Optional[Callable[[int, float], None]] = None,
) -> TrainingReport:
    """Train in place from the given initialization; batches drawn from `seed`."""
    rng = np.random.default_rng(seed)
    optimizer = SGDMomentum(config.learning_rate, config.momentum, config.weight_decay)
    curve: list[tuple[int, float]] = []
    running = 0.0
    loss = float("nan")
    for step in range(1, config.steps + 1):
        loss = optimizer.step(net, data.sample_batch(rng, config.batch_size))
        running += loss
        if step % config.log_every == 0 or step == config.steps:
            window = step % config.log_every or config.log_every
            mean = running / window
            curve.append((step, mean))
            logger.info("step %d loss %.4f", step, mean)
            if on_log is not None:
                on_log(step, mean)
            running = 0.0
    return TrainingReport(steps=config.steps, final_loss=float(loss), loss_curve=curve)


def retrain_until(
    net: NetworkGraph,
    mask: PruneMask,
    retrain: LabelledData,
    monitor: LabelledData,
    target: float,
    max_steps: int,
    batch_size: int,
    learning_rate: float,
    momentum: float,
    rng: np.random.Generator,
    check_every: int = 1,
) -> tuple[int, float]:
    """
    Masked SGD until monitored accuracy reaches `target` or `max_steps`.

    Returns (steps taken, final monitored accuracy). Momentum starts from
    zero on every call.
    """
    optimizer = SGDMomentum(learning_rate, momentum, mask=mask)
    acc = accuracy(net, monitor.batches(batch_size))
    steps = 0
    while acc < target and steps < max_steps:
        optimizer.step(net, retrain.sample_batch(rng, batch_size))
        steps += 1
        if steps % check_every == 0 or steps == max_steps:
            acc = accuracy(net, monitor.batches(batch_size))
    return steps, acc
