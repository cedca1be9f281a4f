"""
Network description for prunetax.

A network is a linear chain of layers (conv, relu, maxpool, gap, dense,
flatten) plus the producer -> consumer wiring between parameterised
layers. Removing output channel i of a convolution removes feature map i,
which in turn removes input slice i of every consumer.

Dense layers are stored and evaluated as 1x1 convolutions over a
(N, features, 1, 1) input, so every parameterised layer shares one code
path for evaluation, differentiation and masking.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from prunetax.core.errors import ShapeMismatchError
from prunetax.core.ops import Tensor, output_size
from prunetax.core.precision import default_dtype


class LayerKind(str, Enum):
    """Supported layer kinds."""

    CONV = "conv"
    RELU = "relu"
    MAXPOOL = "maxpool"
    GAP = "gap"
    DENSE = "dense"
    FLATTEN = "flatten"


class LossKind(str, Enum):
    """Training objective attached to the network output."""

    SOFTMAX_XENT = "softmax-xent"
    MSE = "mse"


PARAMETRIC_KINDS = (LayerKind.CONV, LayerKind.DENSE)


class LayerSpec(BaseModel):
    """
    Declarative description of one layer.

    in_channels/out_channels are required for conv and dense layers and
    inferred for the parameter-free kinds.
    """

    model_config = ConfigDict(extra="forbid")

    kind: LayerKind
    name: str = ""
    in_channels: Optional[int] = Field(default=None, ge=1)
    out_channels: Optional[int] = Field(default=None, ge=1)
    kernel: int = Field(default=1, ge=1, description="Square kernel size (conv, maxpool)")
    stride: int = Field(default=1, ge=1)
    pad: int = Field(default=0, ge=0)
    has_bias: bool = True

    @model_validator(mode="after")
    def _check_parametric(self) -> LayerSpec:
        if self.kind in PARAMETRIC_KINDS:
            if self.in_channels is None or self.out_channels is None:
                raise ValueError(f"{self.kind.value} layer needs in_channels and out_channels")
        if self.kind == LayerKind.DENSE and (self.kernel != 1 or self.pad != 0 or self.stride != 1):
            raise ValueError("dense layers are 1x1 with stride 1 and no padding")
        return self

    @property
    def is_parametric(self) -> bool:
        return self.kind in PARAMETRIC_KINDS

    def weight_shape(self) -> tuple[int, int, int, int]:
        """[out_channels, in_channels, kernel, kernel] for conv and dense."""
        assert self.in_channels is not None and self.out_channels is not None
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


@dataclass
class LayerParams:
    """Parameter tensors of a conv or dense layer."""

    weight: Tensor
    bias: Optional[Tensor] = None

    def copy(self) -> LayerParams:
        return LayerParams(
            weight=self.weight.copy(),
            bias=None if self.bias is None else self.bias.copy(),
        )


@dataclass
class Batch:
    """A batch of inputs with class labels (softmax-xent) or targets (mse)."""

    inputs: Tensor
    labels: Optional[np.ndarray] = None
    targets: Optional[Tensor] = None

    def __post_init__(self) -> None:
        if self.inputs.ndim != 4 or self.inputs.shape[0] < 1:
            raise ShapeMismatchError("input", "batch shape", "[n>=1, c, h, w]", list(self.inputs.shape))
        if self.labels is not None and len(self.labels) != self.inputs.shape[0]:
            raise ShapeMismatchError("input", "label count", self.inputs.shape[0], len(self.labels))

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])


class NetworkGraph:
    """
    Ordered layers, their parameters and the channel wiring.

    shapes[0] is the input shape (c, h, w); shapes[l + 1] is the output
    shape of layer l. edges maps each conv/dense layer index to the
    parameterised layers consuming its output channels.
    """

    def __init__(
        self,
        layers: list[LayerSpec],
        input_shape: tuple[int, int, int],
        loss_kind: LossKind = LossKind.SOFTMAX_XENT,
        params: Optional[dict[int, LayerParams]] = None,
        dtype: Optional[np.dtype] = None,
    ) -> None:
        self.dtype = np.dtype(dtype) if dtype is not None else default_dtype()
        self.layers = [self._named(i, spec) for i, spec in enumerate(layers)]
        self.input_shape = tuple(int(v) for v in input_shape)
        self.loss_kind = LossKind(loss_kind)
        self.shapes = self._infer_shapes()
        self.edges = self._infer_edges()
        self.params: dict[int, LayerParams] = {}
        if params is not None:
            for index, p in params.items():
                self.set_params(index, p.weight, p.bias)

    @staticmethod
    def _named(index: int, spec: LayerSpec) -> LayerSpec:
        if spec.name:
            return spec
        return spec.model_copy(update={"name": f"{spec.kind.value}{index}"})

    # =========================================================================
    # Structure
    # =========================================================================

    def _infer_shapes(self) -> list[tuple[int, int, int]]:
        c, h, w = self.input_shape
        shapes = [(c, h, w)]
        for spec in self.layers:
            if spec.kind == LayerKind.CONV:
                if spec.in_channels != c:
                    raise ShapeMismatchError(spec.name, "in_channels", spec.in_channels, c)
                oh = output_size(h, spec.kernel, spec.stride, spec.pad)
                ow = output_size(w, spec.kernel, spec.stride, spec.pad)
                if oh < 1 or ow < 1:
                    raise ShapeMismatchError(spec.name, "spatial size", f">= {spec.kernel}", (h, w))
                c, h, w = spec.out_channels, oh, ow
            elif spec.kind == LayerKind.DENSE:
                if (h, w) != (1, 1):
                    raise ShapeMismatchError(spec.name, "spatial size", (1, 1), (h, w))
                if spec.in_channels != c:
                    raise ShapeMismatchError(spec.name, "in_channels", spec.in_channels, c)
                c = spec.out_channels
            elif spec.kind == LayerKind.MAXPOOL:
                oh = output_size(h, spec.kernel, spec.stride, 0)
                ow = output_size(w, spec.kernel, spec.stride, 0)
                if oh < 1 or ow < 1:
                    raise ShapeMismatchError(spec.name, "spatial size", f">= {spec.kernel}", (h, w))
                h, w = oh, ow
            elif spec.kind == LayerKind.GAP:
                h, w = 1, 1
            elif spec.kind == LayerKind.FLATTEN:
                c, h, w = c * h * w, 1, 1
            # relu keeps the shape
            shapes.append((c, h, w))
        return shapes

    def _infer_edges(self) -> dict[int, list[int]]:
        parametric = self.parametric_layers()
        edges: dict[int, list[int]] = {}
        for position, index in enumerate(parametric):
            nxt = parametric[position + 1] if position + 1 < len(parametric) else None
            edges[index] = [nxt] if nxt is not None else []
        return edges

    def parametric_layers(self) -> list[int]:
        """Indices of conv and dense layers, in order."""
        return [i for i, spec in enumerate(self.layers) if spec.is_parametric]

    def prunable_layers(self) -> list[int]:
        """Indices of convolution layers; only their output channels are pruned."""
        return [i for i, spec in enumerate(self.layers) if spec.kind == LayerKind.CONV]

    def producer_of(self, index: int) -> Optional[int]:
        """The parameterised layer feeding layer `index`, if any."""
        for producer, consumers in self.edges.items():
            if index in consumers:
                return producer
        return None

    def channel_span(self, producer: int, consumer: int) -> int:
        """
        Number of consumer input columns fed by one producer channel.

        1 for conv -> conv and for paths through global average pooling;
        h*w when a flatten sits between the two layers.
        """
        span = 1
        for index in range(producer + 1, consumer):
            if self.layers[index].kind == LayerKind.FLATTEN:
                _, h, w = self.shapes[index]
                span *= h * w
            elif self.layers[index].kind == LayerKind.GAP:
                span = 1
        return span

    def tap_index(self, layer: int, post_nonlinearity: bool = True) -> int:
        """
        Activation index holding the feature maps of conv `layer`.

        With post_nonlinearity the output of a ReLU directly following the
        convolution is used; otherwise (or without a ReLU) the convolution
        output itself.
        """
        index = layer + 1
        if post_nonlinearity and layer + 1 < len(self.layers):
            if self.layers[layer + 1].kind == LayerKind.RELU:
                index = layer + 2
        return index

    # =========================================================================
    # Parameters
    # =========================================================================

    def set_params(self, index: int, weight: Tensor, bias: Optional[Tensor] = None) -> None:
        spec = self.layers[index]
        if not spec.is_parametric:
            raise ShapeMismatchError(spec.name, "parameters", "none", "given")
        if tuple(weight.shape) != spec.weight_shape():
            raise ShapeMismatchError(spec.name, "weight shape", list(spec.weight_shape()), list(weight.shape))
        if spec.has_bias:
            if bias is None:
                bias = np.zeros(spec.out_channels, dtype=self.dtype)
            if tuple(bias.shape) != (spec.out_channels,):
                raise ShapeMismatchError(spec.name, "bias length", spec.out_channels, list(bias.shape))
            bias = np.asarray(bias, dtype=self.dtype).copy()
        else:
            bias = None
        self.params[index] = LayerParams(np.asarray(weight, dtype=self.dtype).copy(), bias)

    def init_parameters(self, rng: np.random.Generator) -> None:
        """He-normal weights, zero biases."""
        for index in self.parametric_layers():
            spec = self.layers[index]
            out_c, in_c, k, _ = spec.weight_shape()
            std = np.sqrt(2.0 / (in_c * k * k))
            weight = rng.standard_normal(spec.weight_shape()) * std
            self.set_params(index, weight.astype(self.dtype))

    def parameter_count(self) -> int:
        total = 0
        for p in self.params.values():
            total += p.weight.size + (0 if p.bias is None else p.bias.size)
        return total

    def conv_weight_count(self) -> int:
        return sum(self.params[i].weight.size for i in self.prunable_layers())

    def copy(self) -> NetworkGraph:
        return copy.deepcopy(self)

    def astype(self, dtype: np.dtype) -> NetworkGraph:
        """Copy of the network with parameters converted to `dtype`."""
        clone = self.copy()
        clone.dtype = np.dtype(dtype)
        for p in clone.params.values():
            p.weight = p.weight.astype(dtype)
            if p.bias is not None:
                p.bias = p.bias.astype(dtype)
        return clone

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self.shapes[-1]

    @property
    def num_classes(self) -> int:
        c, h, w = self.output_shape
        return c * h * w

    def describe(self) -> list[dict[str, object]]:
        """Layer table rows for display."""
        rows = []
        for index, spec in enumerate(self.layers):
            p = self.params.get(index)
            rows.append({
                "index": index,
                "name": spec.name,
                "kind": spec.kind.value,
                "output": self.shapes[index + 1],
                "params": 0 if p is None else p.weight.size + (0 if p.bias is None else p.bias.size),
            })
        return rows


# =============================================================================
# Model zoo
# =============================================================================

@dataclass
class Architecture:
    """A named layer table with its input shape."""

    name: str
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec] = field(default_factory=list)
    num_classes: int = 10


def _lenet5_like(num_classes: int = 10, channels: int = 1, size: int = 28) -> Architecture:
    s1 = output_size(size, 5, 1, 0) // 2
    s2 = output_size(s1, 5, 1, 0) // 2
    return Architecture(
        name="lenet5-like",
        input_shape=(channels, size, size),
        num_classes=num_classes,
        layers=[
            LayerSpec(kind=LayerKind.CONV, name="conv1", in_channels=channels, out_channels=6, kernel=5),
            LayerSpec(kind=LayerKind.RELU, name="relu1"),
            LayerSpec(kind=LayerKind.MAXPOOL, name="pool1", kernel=2, stride=2),
            LayerSpec(kind=LayerKind.CONV, name="conv2", in_channels=6, out_channels=16, kernel=5),
            LayerSpec(kind=LayerKind.RELU, name="relu2"),
            LayerSpec(kind=LayerKind.MAXPOOL, name="pool2", kernel=2, stride=2),
            LayerSpec(kind=LayerKind.FLATTEN, name="flatten"),
            LayerSpec(kind=LayerKind.DENSE, name="fc1", in_channels=16 * s2 * s2, out_channels=120),
            LayerSpec(kind=LayerKind.RELU, name="relu3"),
            LayerSpec(kind=LayerKind.DENSE, name="fc2", in_channels=120, out_channels=84),
            LayerSpec(kind=LayerKind.RELU, name="relu4"),
            LayerSpec(kind=LayerKind.DENSE, name="fc3", in_channels=84, out_channels=num_classes),
        ],
    )


def _cifar10_quick_like(num_classes: int = 10, channels: int = 3, size: int = 32) -> Architecture:
    s = size // 2 // 2 // 2
    return Architecture(
        name="cifar10-quick-like",
        input_shape=(channels, size, size),
        num_classes=num_classes,
        layers=[
            LayerSpec(kind=LayerKind.CONV, name="conv1", in_channels=channels, out_channels=32, kernel=5, pad=2),
            LayerSpec(kind=LayerKind.MAXPOOL, name="pool1", kernel=2, stride=2),
            LayerSpec(kind=LayerKind.RELU, name="relu1"),
            LayerSpec(kind=LayerKind.CONV, name="conv2", in_channels=32, out_channels=32, kernel=5, pad=2),
            LayerSpec(kind=LayerKind.RELU, name="relu2"),
            LayerSpec(kind=LayerKind.MAXPOOL, name="pool2", kernel=2, stride=2),
            LayerSpec(kind=LayerKind.CONV, name="conv3", in_channels=32, out_channels=64, kernel=5, pad=2),
            LayerSpec(kind=LayerKind.RELU, name="relu3"),
            LayerSpec(kind=LayerKind.MAXPOOL, name="pool3", kernel=2, stride=2),
            LayerSpec(kind=LayerKind.FLATTEN, name="flatten"),
            LayerSpec(kind=LayerKind.DENSE, name="fc1", in_channels=64 * s * s, out_channels=64),
            LayerSpec(kind=LayerKind.RELU, name="relu4"),
            LayerSpec(kind=LayerKind.DENSE, name="fc2", in_channels=64, out_channels=num_classes),
        ],
    )


ARCHITECTURES: dict[str, Callable[..., Architecture]] = {
    "lenet5-like": _lenet5_like,
    "cifar10-quick-like": _cifar10_quick_like,
}


def get_architecture(name: str, num_classes: int = 10) -> Architecture:
    if name not in ARCHITECTURES:
        raise KeyError(f"unknown architecture '{name}'; choose from {', '.join(ARCHITECTURES)}")
    return ARCHITECTURES[name](num_classes=num_classes)


def build_network(
    layers: list[LayerSpec],
    input_shape: tuple[int, int, int],
    seed: int = 0,
    loss_kind: LossKind = LossKind.SOFTMAX_XENT,
    dtype: Optional[np.dtype] = None,
) -> NetworkGraph:
    """Build a network and initialise its parameters from `seed`."""
    net = NetworkGraph(layers, input_shape, loss_kind=loss_kind, dtype=dtype)
    net.init_parameters(np.random.default_rng(seed))
    return net
