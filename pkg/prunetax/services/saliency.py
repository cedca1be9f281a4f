"""
Per-channel saliency maps.

channel_saliency() turns one derivative record into S(l, i) for every
output channel of every convolution layer. evaluate_saliency() runs the
network over the saliency evaluation batches first:

- weight-based signals average the parameter derivatives over batches
  (app.2 is squared per batch, then averaged) and score once;
- activation-based signals reduce each sample's feature map (with that
  sample's own loss derivatives), average the reduced values over samples
  and batches, and scale at the end.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from prunetax.core.engine import ActivationRecord, BatchAccumulator, evaluate, forward
from prunetax.core.errors import MissingDerivativeError, PruneTaxError
from prunetax.core.mask import PruneMask
from prunetax.core.network import Batch, NetworkGraph
from prunetax.core.signals import (
    BaseInput,
    HessianVariant,
    LayerContext,
    Scaling,
    SignalSpec,
    TapPoint,
    pointwise_eval,
    reduce_axis,
    scale_denominator,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SaliencyMap:
    """
    S for every channel of every prunable layer under one signal.

    reduced[l] holds S~ (before scaling), denominators[l] the L used per
    channel, saliency[l] = reduced / denominators. Pruned channels are
    listed in excluded[l] and carry 0. fallback_layers names layers where
    a zero denominator was replaced by 1.
    """

    spec: SignalSpec
    reduced: dict[int, np.ndarray]
    denominators: dict[int, np.ndarray]
    saliency: dict[int, np.ndarray]
    excluded: dict[int, np.ndarray]
    fallback_layers: tuple[int, ...] = field(default_factory=tuple)

    def value(self, layer: int, channel: int) -> float:
        return float(self.saliency[layer][channel])

    def candidates(self) -> Iterator[tuple[int, int, float]]:
        """(layer, channel, S) for every channel still present, in (l, i) order."""
        for layer in sorted(self.saliency):
            for channel in range(self.saliency[layer].size):
                if not self.excluded[layer][channel]:
                    yield layer, channel, float(self.saliency[layer][channel])


# =============================================================================
# Reduction to S~
# =============================================================================

def _hessian(record: ActivationRecord, spec: SignalSpec, weights: bool, index: int) -> Optional[np.ndarray]:
    if spec.hessian_variant == HessianVariant.NONE:
        return None
    if weights:
        table = record.weight_hess_app1 if spec.hessian_variant == HessianVariant.APP1 else record.weight_hess_app2
        if index not in table:
            raise MissingDerivativeError(f"weight_hess_{spec.hessian_variant.value}[{index}]")
        return table[index]
    values = record.act_hess_app1 if spec.hessian_variant == HessianVariant.APP1 else record.act_hess_app2
    if values is None:
        raise MissingDerivativeError(f"act_hess_{spec.hessian_variant.value}")
    return values[index]


def _weight_reduced(net: NetworkGraph, record: Optional[ActivationRecord], spec: SignalSpec, layer: int) -> np.ndarray:
    weight = net.params[layer].weight
    m = weight.shape[0]
    x = weight.reshape(m, -1).astype(np.float64)
    g1 = g2 = None
    if spec.pointwise.uses_gradient:
        if record is None or layer not in record.weight_grads:
            raise MissingDerivativeError(f"weight_grads[{layer}]", "signal needs parameter gradients")
        g1 = record.weight_grads[layer].reshape(m, -1)
    if spec.pointwise.uses_hessian:
        if record is None:
            raise MissingDerivativeError(f"weight_hess_{spec.hessian_variant.value}[{layer}]")
        g2 = _hessian(record, spec, True, layer).reshape(m, -1)
    return reduce_axis(spec.reduction, pointwise_eval(spec, x, g1, g2), axis=1)


def _activation_reduced(
    net: NetworkGraph,
    record: Optional[ActivationRecord],
    spec: SignalSpec,
    layer: int,
    tap: TapPoint,
) -> np.ndarray:
    """
    Per-sample reduction over h x w, then the mean over samples.

    The record holds derivatives of the batch-mean loss; they are rescaled
    to each sample's own loss so the result does not depend on batching.
    """
    if record is None or not record.activations:
        raise MissingDerivativeError("activations", "activation signals need evaluation data")
    index = net.tap_index(layer, post_nonlinearity=tap == TapPoint.POST_NONLINEARITY)
    a = record.activations[index]
    n, m = a.shape[:2]
    x = a.reshape(n, m, -1).astype(np.float64)
    g1 = g2 = None
    if spec.pointwise.uses_gradient:
        if record.act_grads is None:
            raise MissingDerivativeError("act_grads", "signal needs activation gradients")
        g1 = record.act_grads[index].reshape(n, m, -1) * n
    if spec.pointwise.uses_hessian:
        # squared gradients carry 1/n twice
        scale = n * n if spec.hessian_variant == HessianVariant.APP2 else n
        g2 = _hessian(record, spec, False, index).reshape(n, m, -1) * scale
    per_sample = reduce_axis(spec.reduction, pointwise_eval(spec, x, g1, g2), axis=2)
    return per_sample.mean(axis=0)


def reduced_saliency(
    net: NetworkGraph,
    record: Optional[ActivationRecord],
    spec: SignalSpec,
    mask: PruneMask,
    tap: TapPoint = TapPoint.POST_NONLINEARITY,
) -> dict[int, np.ndarray]:
    """S~ per prunable layer; removed channels are forced to 0."""
    reduced: dict[int, np.ndarray] = {}
    for layer in net.prunable_layers():
        if spec.base == BaseInput.WEIGHTS:
            values = _weight_reduced(net, record, spec, layer)
        else:
            values = _activation_reduced(net, record, spec, layer, tap)
        values = np.array(values, dtype=np.float64)
        values[mask.pruned[layer]] = 0.0
        reduced[layer] = values
    return reduced


def _cardinality(net: NetworkGraph, spec: SignalSpec, layer: int, tap: TapPoint) -> int:
    if spec.base == BaseInput.WEIGHTS:
        layer_spec = net.layers[layer]
        return layer_spec.in_channels * layer_spec.kernel * layer_spec.kernel
    _, h, w = net.shapes[net.tap_index(layer, post_nonlinearity=tap == TapPoint.POST_NONLINEARITY)]
    return h * w


def scale_saliency(
    net: NetworkGraph,
    reduced: dict[int, np.ndarray],
    spec: SignalSpec,
    mask: PruneMask,
    tap: TapPoint = TapPoint.POST_NONLINEARITY,
) -> SaliencyMap:
    """Apply the scaling to S~ and package the map."""
    denominators: dict[int, np.ndarray] = {}
    saliency: dict[int, np.ndarray] = {}
    excluded: dict[int, np.ndarray] = {}
    fallbacks: list[int] = []
    for layer, values in reduced.items():
        m = values.size
        context = LayerContext(
            reduced=values.tolist(),
            cardinality=[_cardinality(net, spec, layer, tap)] * m,
            weights_removed=mask.weights_removed(net, layer).tolist() if spec.scaling == Scaling.WEIGHTS_REMOVED else [],
        )
        denom = np.ones(m, dtype=np.float64)
        fell_back = False
        for channel in range(m):
            if mask.pruned[layer][channel]:
                continue
            d = scale_denominator(spec.scaling, context, channel)
            denom[channel] = d.value
            fell_back = fell_back or d.fallback
        if fell_back:
            fallbacks.append(layer)
            logger.warning("%s: zero %s denominator in layer %s, using 1", spec.id, spec.scaling.value, net.layers[layer].name)
        denominators[layer] = denom
        saliency[layer] = values / denom
        excluded[layer] = mask.pruned[layer].copy()
    return SaliencyMap(
        spec=spec,
        reduced=reduced,
        denominators=denominators,
        saliency=saliency,
        excluded=excluded,
        fallback_layers=tuple(fallbacks),
    )


def channel_saliency(
    net: NetworkGraph,
    record: Optional[ActivationRecord],
    spec: SignalSpec,
    mask: Optional[PruneMask] = None,
    tap: TapPoint = TapPoint.POST_NONLINEARITY,
) -> SaliencyMap:
    """
    Saliency of every output channel of every conv layer.

    Args:
        net: The network whose parameters are scored.
        record: Derivatives from evaluate(); may be None for signals that
            only read weight values.
        spec: The signal.
        mask: Channels already removed; they are excluded and carry 0.
        tap: Which tensor is a channel's feature map.

    Returns:
        An immutable SaliencyMap.
    """
    mask = mask if mask is not None else PruneMask.empty(net)
    return scale_saliency(net, reduced_saliency(net, record, spec, mask, tap), spec, mask, tap)


# =============================================================================
# Evaluation-set averaging
# =============================================================================

def _parameter_record(record: ActivationRecord) -> ActivationRecord:
    """Keep only parameter derivatives; batches may differ in size."""
    return ActivationRecord(
        activations=[],
        loss=record.loss,
        weight_grads=record.weight_grads,
        bias_grads=record.bias_grads,
        weight_hess_app1=record.weight_hess_app1,
        bias_hess_app1=record.bias_hess_app1,
        weight_hess_app2=record.weight_hess_app2,
        bias_hess_app2=record.bias_hess_app2,
    )


def _evaluate_for(net: NetworkGraph, batch: Batch, spec: SignalSpec) -> ActivationRecord:
    if not (spec.pointwise.uses_gradient or spec.pointwise.uses_hessian):
        return forward(net, batch)
    return evaluate(
        net,
        batch,
        app1=spec.hessian_variant == HessianVariant.APP1,
        app2=spec.hessian_variant == HessianVariant.APP2,
    )


def evaluate_saliency(
    net: NetworkGraph,
    spec: SignalSpec,
    batches: Iterable[Batch],
    mask: Optional[PruneMask] = None,
    tap: TapPoint = TapPoint.POST_NONLINEARITY,
) -> SaliencyMap:
    """Saliency map of `spec` averaged over the evaluation batches."""
    mask = mask if mask is not None else PruneMask.empty(net)
    if not spec.needs_data:
        return channel_saliency(net, None, spec, mask, tap)

    if spec.base == BaseInput.WEIGHTS:
        acc = BatchAccumulator()
        for batch in batches:
            acc.accumulate(_parameter_record(_evaluate_for(net, batch, spec)))
        if acc.count == 0:
            raise PruneTaxError("saliency evaluation needs at least one batch")
        return channel_saliency(net, acc.read_average(), spec, mask, tap)

    totals: Optional[dict[int, np.ndarray]] = None
    samples = 0
    for batch in batches:
        record = _evaluate_for(net, batch, spec)
        reduced = reduced_saliency(net, record, spec, mask, tap)
        if totals is None:
            totals = {layer: values * batch.size for layer, values in reduced.items()}
        else:
            for layer, values in reduced.items():
                totals[layer] += values * batch.size
        samples += batch.size
    if totals is None:
        raise PruneTaxError("saliency evaluation needs at least one batch")
    averaged = {layer: values / samples for layer, values in totals.items()}
    return scale_saliency(net, averaged, spec, mask, tap)
