"""
Channel masks.

A PruneMask records which convolution output channels are removed.
Everything else is derived from it: the masked input slices of each
consumer, the masked positions of every weight tensor and the number of
weights a further removal would take out. The mask is the single source
of truth; apply() rewrites the network's parameters to agree with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from prunetax.core.errors import DoublePruneError, ShapeMismatchError
from prunetax.core.network import NetworkGraph


@dataclass
class PruneMask:
    """pruned[l][i] is True once output channel i of conv layer l is removed."""

    pruned: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def empty(cls, net: NetworkGraph) -> PruneMask:
        return cls({
            index: np.zeros(net.layers[index].out_channels, dtype=bool)
            for index in net.prunable_layers()
        })

    def copy(self) -> PruneMask:
        return PruneMask({index: values.copy() for index, values in self.pruned.items()})

    # ===== Queries =====

    def pruned_channels(self) -> list[tuple[int, int]]:
        return [
            (layer, int(channel))
            for layer in sorted(self.pruned)
            for channel in np.flatnonzero(self.pruned[layer])
        ]

    def unpruned_count(self, layer: int) -> int:
        return int(np.count_nonzero(~self.pruned[layer]))

    def total_pruned(self) -> int:
        return sum(int(values.sum()) for values in self.pruned.values())

    def output_mask(self, net: NetworkGraph, layer: int) -> np.ndarray:
        """Removed output channels of any parameterised layer (dense: none)."""
        if layer in self.pruned:
            return self.pruned[layer]
        return np.zeros(net.layers[layer].out_channels, dtype=bool)

    def input_mask(self, net: NetworkGraph, layer: int) -> np.ndarray:
        """Removed input columns of a parameterised layer, derived from its producer."""
        spec = net.layers[layer]
        producer = net.producer_of(layer)
        if producer is None or producer not in self.pruned:
            return np.zeros(spec.in_channels, dtype=bool)
        span = net.channel_span(producer, layer)
        expanded = np.repeat(self.pruned[producer], span)
        if expanded.size != spec.in_channels:
            raise ShapeMismatchError(spec.name, "consumer input columns", spec.in_channels, expanded.size)
        return expanded

    def weight_mask(self, net: NetworkGraph, layer: int) -> np.ndarray:
        """Boolean array shaped like the weight; True where the weight is removed."""
        out_mask = self.output_mask(net, layer)
        in_mask = self.input_mask(net, layer)
        masked = out_mask[:, None] | in_mask[None, :]
        k = net.layers[layer].kernel
        return np.broadcast_to(masked[:, :, None, None], masked.shape + (k, k))

    # ===== Mutation =====

    def mark(self, net: NetworkGraph, layer: int, channel: int) -> None:
        if layer not in self.pruned:
            raise ShapeMismatchError(net.layers[layer].name, "prunable layer", "conv", net.layers[layer].kind.value)
        if not 0 <= channel < self.pruned[layer].size:
            raise ShapeMismatchError(net.layers[layer].name, "channel index", f"< {self.pruned[layer].size}", channel)
        if self.pruned[layer][channel]:
            raise DoublePruneError(layer, channel)
        self.pruned[layer][channel] = True

    def apply(self, net: NetworkGraph) -> None:
        """Zero every masked weight and bias in place."""
        for layer in net.parametric_layers():
            p = net.params[layer]
            p.weight[self.weight_mask(net, layer)] = 0
            if p.bias is not None:
                p.bias[self.output_mask(net, layer)] = 0

    # ===== Accounting =====

    def weights_removed(self, net: NetworkGraph, layer: int) -> np.ndarray:
        """
        For each channel of conv `layer`: weights still present that pruning it would remove.

        Counts the filter over live input channels, the bias and the
        consumer's input slice over the consumer's live output channels.
        Channels already pruned get 0.
        """
        spec = net.layers[layer]
        live_inputs = int(np.count_nonzero(~self.input_mask(net, layer)))
        per_channel = live_inputs * spec.kernel * spec.kernel + (1 if spec.has_bias else 0)
        for consumer in net.edges.get(layer, []):
            cspec = net.layers[consumer]
            live_outputs = int(np.count_nonzero(~self.output_mask(net, consumer)))
            per_channel += live_outputs * net.channel_span(layer, consumer) * cspec.kernel * cspec.kernel
        counts = np.full(spec.out_channels, per_channel, dtype=np.int64)
        counts[self.pruned[layer]] = 0
        return counts

    def masked_conv_weights(self, net: NetworkGraph) -> int:
        return sum(int(np.count_nonzero(self.weight_mask(net, layer))) for layer in net.prunable_layers())
