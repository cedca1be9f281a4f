"""
Forward evaluation and derivative propagation.

forward() records every layer output; backward() fills first derivatives
of the batch-mean loss with respect to every activation and parameter;
hessian_diag_app1() and hessian_diag_app2() fill the two diagonal
second-derivative estimates:

- app.1 backpropagates second derivatives layer by layer keeping only the
  diagonal of each layer's Hessian (no Levenberg-Marquardt truncation, so
  negative values are kept if a nonlinearity produces them).
- app.2 is the Gauss-Newton / empirical Fisher diagonal, (dL/dx)^2, taken
  over the evaluated batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

import numpy as np

from prunetax.core import ops
from prunetax.core.errors import (
    MissingDerivativeError,
    NonFiniteError,
    PruneTaxError,
    ShapeMismatchError,
    UnsupportedLayerError,
)
from prunetax.core.network import Batch, LayerKind, LossKind, NetworkGraph
from prunetax.core.ops import Tensor


@dataclass
class ActivationRecord:
    """
    Values and derivatives from one evaluation of a network.

    activations[0] is the input and activations[l + 1] the output of
    layer l; the derivative lists share that indexing. Parameter
    derivative dicts are keyed by layer index.
    """

    activations: list[Tensor]
    loss: float
    output_grad: Optional[Tensor] = None
    output_hess: Optional[Tensor] = None
    caches: list[Any] = field(default_factory=list, repr=False)

    act_grads: Optional[list[Tensor]] = None
    act_hess_app1: Optional[list[Tensor]] = None
    act_hess_app2: Optional[list[Tensor]] = None

    weight_grads: dict[int, Tensor] = field(default_factory=dict)
    bias_grads: dict[int, Tensor] = field(default_factory=dict)
    weight_hess_app1: dict[int, Tensor] = field(default_factory=dict)
    bias_hess_app1: dict[int, Tensor] = field(default_factory=dict)
    weight_hess_app2: dict[int, Tensor] = field(default_factory=dict)
    bias_hess_app2: dict[int, Tensor] = field(default_factory=dict)

    @property
    def logits(self) -> Tensor:
        out = self.activations[-1]
        return out.reshape(out.shape[0], -1)

    def tensors(self) -> dict[str, Tensor]:
        """Every stored value/derivative tensor under a stable key."""
        flat: dict[str, Tensor] = {}
        for name in ("activations", "act_grads", "act_hess_app1", "act_hess_app2"):
            values = getattr(self, name)
            if values is None:
                continue
            for index, tensor in enumerate(values):
                flat[f"{name}/{index}"] = tensor
        for name in (
            "weight_grads", "bias_grads",
            "weight_hess_app1", "bias_hess_app1",
            "weight_hess_app2", "bias_hess_app2",
        ):
            for index, tensor in getattr(self, name).items():
                flat[f"{name}/{index}"] = tensor
        return flat

    @classmethod
    def from_tensors(cls, flat: dict[str, Tensor], loss: float) -> ActivationRecord:
        """Inverse of tensors(); forward caches are not restored."""
        lists: dict[str, dict[int, Tensor]] = {}
        for key, tensor in flat.items():
            name, index = key.split("/")
            lists.setdefault(name, {})[int(index)] = tensor

        def as_list(name: str) -> Optional[list[Tensor]]:
            if name not in lists:
                return None
            entries = lists[name]
            return [entries[i] for i in range(len(entries))]

        record = cls(activations=as_list("activations") or [], loss=loss)
        record.act_grads = as_list("act_grads")
        record.act_hess_app1 = as_list("act_hess_app1")
        record.act_hess_app2 = as_list("act_hess_app2")
        for name in (
            "weight_grads", "bias_grads",
            "weight_hess_app1", "bias_hess_app1",
            "weight_hess_app2", "bias_hess_app2",
        ):
            setattr(record, name, dict(lists.get(name, {})))
        return record


# =============================================================================
# Forward
# =============================================================================

def _layer_forward(net: NetworkGraph, index: int, x: Tensor) -> tuple[Tensor, Any]:
    spec = net.layers[index]
    if spec.kind in (LayerKind.CONV, LayerKind.DENSE):
        p = net.params[index]
        return ops.conv2d_with_cols(x, p.weight, p.bias, spec.stride, spec.pad, spec.name)
    if spec.kind == LayerKind.RELU:
        return ops.relu(x), None
    if spec.kind == LayerKind.MAXPOOL:
        return ops.maxpool2d(x, spec.kernel, spec.stride)
    if spec.kind == LayerKind.GAP:
        return ops.global_avg_pool(x), None
    if spec.kind == LayerKind.FLATTEN:
        return ops.flatten(x), None
    raise UnsupportedLayerError(spec.kind.value, "forward")


def _run_layers(
    net: NetworkGraph,
    x: Tensor,
    start: int = 0,
) -> tuple[list[Tensor], list[Any]]:
    activations = [x]
    caches: list[Any] = []
    for index in range(start, len(net.layers)):
        out, cache = _layer_forward(net, index, activations[-1])
        ops.check_finite(out, net.layers[index].name)
        activations.append(out)
        caches.append(cache)
    return activations, caches


def _check_input(net: NetworkGraph, batch: Batch) -> None:
    if tuple(batch.inputs.shape[1:]) != net.input_shape:
        raise ShapeMismatchError("input", "sample shape", net.input_shape, tuple(batch.inputs.shape[1:]))


def _loss(net: NetworkGraph, output: Tensor, batch: Batch) -> tuple[float, Tensor, Tensor]:
    n = output.shape[0]
    if net.loss_kind == LossKind.SOFTMAX_XENT:
        if batch.labels is None:
            raise PruneTaxError("softmax-xent loss needs class labels")
        labels = np.asarray(batch.labels)
        if labels.min() < 0 or labels.max() >= net.num_classes:
            raise ValueError(f"labels must lie in [0, {net.num_classes})")
        loss, _, grad, hess = ops.softmax_xent(output.reshape(n, -1), labels)
        return loss, grad.reshape(output.shape), hess.reshape(output.shape)

    if batch.targets is None:
        raise PruneTaxError("mse loss needs target tensors")
    targets = np.asarray(batch.targets, dtype=output.dtype)
    if targets.size != output.size:
        raise ShapeMismatchError("loss", "target shape", list(output.shape), list(targets.shape))
    loss, grad, hess = ops.mse(output, targets.reshape(output.shape))
    return loss, grad, hess


def forward(net: NetworkGraph, batch: Batch) -> ActivationRecord:
    """Evaluate every layer and the batch-mean loss."""
    _check_input(net, batch)
    x = np.asarray(batch.inputs, dtype=net.dtype)
    activations, caches = _run_layers(net, x)
    loss, grad, hess = _loss(net, activations[-1], batch)
    if not np.isfinite(loss):
        raise NonFiniteError("loss", "loss")
    return ActivationRecord(
        activations=activations,
        loss=loss,
        output_grad=grad,
        output_hess=hess,
        caches=caches,
    )


def loss_from(net: NetworkGraph, batch: Batch, index: int, activation: Tensor) -> float:
    """Loss when activations[index] is replaced by `activation`."""
    activations, _ = _run_layers(net, np.asarray(activation, dtype=net.dtype), start=index)
    loss, _, _ = _loss(net, activations[-1], batch)
    return loss


def predict(net: NetworkGraph, inputs: Tensor) -> np.ndarray:
    """Top-1 class per sample; argmax ties go to the lowest class index."""
    x = np.asarray(inputs, dtype=net.dtype)
    activations, _ = _run_layers(net, x)
    logits = activations[-1].reshape(x.shape[0], -1)
    return np.argmax(logits, axis=1)


def accuracy(net: NetworkGraph, dataset: Iterable[Batch]) -> float:
    """Top-1 accuracy over a stream of labelled batches."""
    if net.loss_kind != LossKind.SOFTMAX_XENT:
        raise PruneTaxError("accuracy needs a classification loss")
    correct = 0
    total = 0
    for batch in dataset:
        _check_input(net, batch)
        if batch.labels is None:
            raise PruneTaxError("accuracy needs class labels")
        correct += int(np.sum(predict(net, batch.inputs) == np.asarray(batch.labels)))
        total += batch.size
    if total == 0:
        raise PruneTaxError("accuracy of an empty dataset is undefined")
    return correct / total


# =============================================================================
# First order
# =============================================================================

def _require_forward(record: Optional[ActivationRecord]) -> ActivationRecord:
    if record is None or not record.activations or record.output_grad is None or not record.caches:
        raise MissingDerivativeError("forward record", "run forward() first")
    return record


def backward(net: NetworkGraph, record: ActivationRecord) -> ActivationRecord:
    """Fill dL/dx for every activation and dL/dw, dL/db for every parameter."""
    record = _require_forward(record)
    grads: list[Tensor] = [np.zeros(0)] * len(record.activations)
    grads[-1] = record.output_grad

    for index in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[index]
        x = record.activations[index]
        dout = grads[index + 1]
        cache = record.caches[index]

        if spec.kind in (LayerKind.CONV, LayerKind.DENSE):
            p = net.params[index]
            dx, dw, db = ops.conv2d_backward(dout, cache, x.shape, p.weight, spec.stride, spec.pad)
            record.weight_grads[index] = dw
            if p.bias is not None:
                record.bias_grads[index] = db
        elif spec.kind == LayerKind.RELU:
            dx = ops.relu_backward(dout, x)
        elif spec.kind == LayerKind.MAXPOOL:
            dx = ops.maxpool2d_backward(dout, cache, x.shape, spec.kernel, spec.stride)
        elif spec.kind == LayerKind.GAP:
            dx = ops.global_avg_pool_backward(dout, x.shape)
        elif spec.kind == LayerKind.FLATTEN:
            dx = dout.reshape(x.shape)
        else:
            raise UnsupportedLayerError(spec.kind.value, "backward")
        grads[index] = dx

    record.act_grads = grads
    return record


# =============================================================================
# Second order (diagonal)
# =============================================================================

def hessian_diag_app1(net: NetworkGraph, record: ActivationRecord) -> ActivationRecord:
    """
    Layer-diagonal second-derivative backpropagation.

    Recurrences (h2 = d2L/d(.)^2, g = dL/d(.)):
      linear y = W x + b:   h2_x[j] = sum_i W_ij^2 h2_y[i],  h2_W[ij] = sum x_j^2 h2_y[i]
      pointwise y = f(x):   h2_x = f'(x)^2 h2_y + f''(x) g_y   (f'' = 0 for ReLU)
      max pool:             h2 routed to the selected element, like the gradient
      global average pool:  h2_x = h2_y / (h*w)^2
    The loss seeds h2 with the diagonal of its Hessian w.r.t. the output.
    """
    record = _require_forward(record)
    if record.act_grads is None:
        raise MissingDerivativeError("act_grads", "run backward() before hessian_diag_app1()")
    if record.output_hess is None:
        raise MissingDerivativeError("output_hess")

    h2: list[Tensor] = [np.zeros(0)] * len(record.activations)
    h2[-1] = record.output_hess

    for index in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[index]
        x = record.activations[index]
        h2out = h2[index + 1]
        cache = record.caches[index]

        if spec.kind in (LayerKind.CONV, LayerKind.DENSE):
            p = net.params[index]
            h2x, h2w, h2b = ops.conv2d_second_backward(h2out, cache, x.shape, p.weight, spec.stride, spec.pad)
            record.weight_hess_app1[index] = h2w
            if p.bias is not None:
                record.bias_hess_app1[index] = h2b
        elif spec.kind == LayerKind.RELU:
            h2x = ops.relu_second_backward(h2out, x)
        elif spec.kind == LayerKind.MAXPOOL:
            h2x = ops.maxpool2d_backward(h2out, cache, x.shape, spec.kernel, spec.stride)
        elif spec.kind == LayerKind.GAP:
            h2x = ops.global_avg_pool_second_backward(h2out, x.shape)
        elif spec.kind == LayerKind.FLATTEN:
            h2x = h2out.reshape(x.shape)
        else:
            raise UnsupportedLayerError(spec.kind.value, "hessian_diag_app1")
        h2[index] = h2x

    record.act_hess_app1 = h2
    return record


def hessian_diag_app2(record: ActivationRecord) -> ActivationRecord:
    """Gauss-Newton diagonal: d2L/dx^2 ~= (dL/dx)^2 for activations and parameters."""
    if record.act_grads is None:
        raise MissingDerivativeError("act_grads", "run backward() before hessian_diag_app2()")
    record.act_hess_app2 = [np.square(g) for g in record.act_grads]
    record.weight_hess_app2 = {i: np.square(g) for i, g in record.weight_grads.items()}
    record.bias_hess_app2 = {i: np.square(g) for i, g in record.bias_grads.items()}
    return record


def evaluate(
    net: NetworkGraph,
    batch: Batch,
    app1: bool = True,
    app2: bool = True,
) -> ActivationRecord:
    """forward + backward + requested Hessian estimates in one call."""
    record = backward(net, forward(net, batch))
    if app1:
        hessian_diag_app1(net, record)
    if app2:
        hessian_diag_app2(record)
    return record


# =============================================================================
# Batch averaging
# =============================================================================

@dataclass
class BatchAccumulator:
    """Running sums of every record tensor; read_average() divides by count."""

    sums: dict[str, Tensor] = field(default_factory=dict)
    loss_sum: float = 0.0
    count: int = 0

    def accumulate(self, record: ActivationRecord) -> BatchAccumulator:
        flat = record.tensors()
        if self.count == 0:
            self.sums = {key: np.array(value, dtype=np.float64) for key, value in flat.items()}
        else:
            if set(flat) != set(self.sums):
                missing = sorted(set(self.sums) ^ set(flat))
                raise ShapeMismatchError("accumulator", "stored tensors", "same keys", missing[:3])
            for key, value in flat.items():
                if value.shape != self.sums[key].shape:
                    raise ShapeMismatchError(key, "shape", list(self.sums[key].shape), list(value.shape))
                self.sums[key] += value
        self.loss_sum += record.loss
        self.count += 1
        return self

    def read_average(self) -> ActivationRecord:
        if self.count < 1:
            raise PruneTaxError("read_average() before any accumulate()")
        averaged = {key: value / self.count for key, value in self.sums.items()}
        return ActivationRecord.from_tensors(averaged, self.loss_sum / self.count)


def accumulate(acc: BatchAccumulator, record: ActivationRecord) -> BatchAccumulator:
    return acc.accumulate(record)


def read_average(acc: BatchAccumulator) -> ActivationRecord:
    return acc.read_average()
