"""
Iterative channel pruning.

Each iteration scores every remaining channel, removes the least salient
one, optionally retrains with the mask frozen, and records accuracies.
A run stops when test accuracy has dropped by more than the configured
amount, or when every conv layer is down to its last channel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from prunetax.core.config import HarnessConfig
from prunetax.core.engine import accuracy
from prunetax.core.errors import NonFiniteError, NoPrunableChannelError, PruningStepError
from prunetax.core.mask import PruneMask
from prunetax.core.network import NetworkGraph
from prunetax.core.records import ExperimentRecord
from prunetax.core.signals import SignalSpec
from prunetax.services.datasets import DataSplits
from prunetax.services.saliency import SaliencyMap, evaluate_saliency
from prunetax.services.training import retrain_until

logger = logging.getLogger(__name__)


# ===== Mask operations =====

def prune_channel(net: NetworkGraph, mask: PruneMask, channel: tuple[int, int]) -> PruneMask:
    """
    Remove output channel (l, i): its filter, its bias and every consumer input slice.

    Mutates and returns `mask`; the network's parameters are zeroed to match.
    """
    layer, index = channel
    mask.mark(net, layer, index)
    mask.apply(net)
    return mask


def sparsity(net: NetworkGraph, mask: PruneMask) -> float:
    """Fraction of convolution weights removed (filters of pruned channels and inputs from them)."""
    total = net.conv_weight_count()
    return mask.masked_conv_weights(net) / total if total else 0.0


def count_parameters(net: NetworkGraph, mask: Optional[PruneMask] = None) -> dict[str, int]:
    """Total and remaining parameter counts, conv weights and all parameters."""
    mask = mask or PruneMask.empty(net)
    removed = 0
    for layer in net.parametric_layers():
        removed += int(np.count_nonzero(mask.weight_mask(net, layer)))
        if net.params[layer].bias is not None:
            removed += int(np.count_nonzero(mask.output_mask(net, layer)))
    conv_total = net.conv_weight_count()
    total = net.parameter_count()
    return {
        "conv_weights": conv_total,
        "conv_weights_remaining": conv_total - mask.masked_conv_weights(net),
        "parameters": total,
        "parameters_remaining": total - removed,
    }


def select_least_salient(saliency: SaliencyMap, mask: PruneMask) -> tuple[int, int]:
    """
    The unpruned channel with minimal S; ties go to the lowest (layer, channel).

    Layers down to one channel are skipped so no layer is emptied. NaN
    entries are skipped with a warning; a map that is NaN for every
    remaining candidate raises NonFiniteError.
    """
    best: Optional[tuple[float, int, int]] = None
    skipped: list[tuple[int, int]] = []
    for layer, channel, value in saliency.candidates():
        if mask.unpruned_count(layer) <= 1:
            continue
        if np.isnan(value):
            skipped.append((layer, channel))
            continue
        if best is None or value < best[0]:
            best = (value, layer, channel)
    if skipped:
        logger.warning("%s: NaN saliency for %d channel(s), first %s", saliency.spec.id, len(skipped), skipped[0])
    if best is None:
        if skipped:
            raise NonFiniteError(saliency.spec.id, "saliency for every candidate channel")
        raise NoPrunableChannelError("every prunable layer is down to its last channel")
    return best[1], best[2]


# ===== Harness =====

@dataclass
class PruningSession:
    """
    One pruning run over its own copy of the network.

    After run(), net and mask hold the pruned model and records the
    per-iteration history.
    """

    net: NetworkGraph
    spec: SignalSpec
    data: DataSplits
    config: HarnessConfig
    retrain: bool
    on_step: Optional[Callable[[ExperimentRecord], None]] = None
    mask: PruneMask = field(init=False)
    records: list[ExperimentRecord] = field(default_factory=list, init=False)
    initial_train_acc: float = field(default=0.0, init=False)
    initial_test_acc: float = field(default=0.0, init=False)
    stop_reason: str = field(default="", init=False)

    def __post_init__(self) -> None:
        self.net = self.net.copy()
        self.mask = PruneMask.empty(self.net)
        dtype = self.net.dtype
        self._monitor = self.data.retrain.head(self.config.train_eval_samples).astype(dtype)
        self._retrain = self.data.retrain.astype(dtype)
        self._eval = self.data.eval.astype(dtype)
        self._test = self.data.test.astype(dtype)

    def _train_acc(self) -> float:
        return accuracy(self.net, self._monitor.batches(self.config.eval_batch_size))

    def _test_acc(self) -> float:
        return accuracy(self.net, self._test.batches(self.config.eval_batch_size))

    def _step(self, step: int, rng: np.random.Generator, target: float, cumulative: int) -> ExperimentRecord:
        cfg = self.config
        saliency = evaluate_saliency(
            self.net,
            self.spec,
            self._eval.batches(cfg.eval_batch_size, limit=cfg.eval_batches_for_saliency),
            self.mask,
            cfg.tap_point,
        )
        layer, channel = select_least_salient(saliency, self.mask)
        prune_channel(self.net, self.mask, (layer, channel))

        steps = 0
        if self.retrain and cfg.max_retrain_steps_per_iteration > 0:
            steps, train_acc = retrain_until(
                self.net, self.mask, self._retrain, self._monitor, target,
                max_steps=cfg.max_retrain_steps_per_iteration,
                batch_size=cfg.retrain_batch_size,
                learning_rate=cfg.learning_rate,
                momentum=cfg.momentum,
                rng=rng,
                check_every=cfg.recovery_check_every,
            )
        else:
            train_acc = self._train_acc()

        return ExperimentRecord(
            step=step,
            pruned_layer=layer,
            pruned_channel=channel,
            saliency=saliency.value(layer, channel),
            sparsity=sparsity(self.net, self.mask),
            train_acc=train_acc,
            test_acc=self._test_acc(),
            retrain_steps=steps,
            cumulative_retrain_steps=cumulative + steps,
        )

    def run(self) -> list[ExperimentRecord]:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        self.initial_train_acc = self._train_acc()
        self.initial_test_acc = self._test_acc()
        target = cfg.train_acc_recovery_target
        if target is None:
            target = self.initial_train_acc - cfg.recovery_margin
        logger.info(
            "%s: start train_acc=%.4f test_acc=%.4f retrain=%s target=%.4f",
            self.spec.id, self.initial_train_acc, self.initial_test_acc, self.retrain, target,
        )

        cumulative = 0
        step = 0
        while True:
            try:
                record = self._step(step, rng, target, cumulative)
            except NoPrunableChannelError:
                self.stop_reason = "no prunable channel left"
                break
            except Exception as e:
                raise PruningStepError(step, e) from e
            self.records.append(record)
            cumulative = record.cumulative_retrain_steps
            logger.debug(
                "%s: step %d pruned (%d, %d) sparsity=%.4f test_acc=%.4f retrain=%d",
                self.spec.id, step, record.pruned_layer, record.pruned_channel,
                record.sparsity, record.test_acc, record.retrain_steps,
            )
            if self.on_step is not None:
                self.on_step(record)
            if self.initial_test_acc - record.test_acc > cfg.stop_test_acc_drop:
                self.stop_reason = "test accuracy drop"
                break
            step += 1
        logger.info("%s: stopped after %d steps (%s)", self.spec.id, len(self.records), self.stop_reason)
        return self.records


def run_prune_no_retrain(
    net: NetworkGraph,
    spec: SignalSpec,
    data: DataSplits,
    config: HarnessConfig,
) -> list[ExperimentRecord]:
    """Prune without retraining; `net` is not modified."""
    return PruningSession(net, spec, data, config, retrain=False).run()


def run_prune_with_retrain(
    net: NetworkGraph,
    spec: SignalSpec,
    data: DataSplits,
    config: HarnessConfig,
) -> list[ExperimentRecord]:
    """Prune with masked retraining after each removal; `net` is not modified."""
    return PruningSession(net, spec, data, config, retrain=True).run()
