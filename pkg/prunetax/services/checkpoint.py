"""
PRNW checkpoints: layer table, parameters and prune mask in one file.

Layout (little-endian):

    magic "PRNW", version u32
    input shape 3 x u32, loss kind u8, dtype code u8 (4 = float32, 8 = float64)
    layer count u32, then per layer:
        kind u8, in_channels u32, out_channels u32, kernel u32, stride u32,
        pad u32, has_bias u8, name length u16, name utf-8
    per parameterised layer in order: weight data, then bias data if any
    per conv layer in order: pruned-channel bitmap, packbits little-endian

Saving the same network and mask twice gives identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from prunetax.core.errors import CheckpointFormatError
from prunetax.core.mask import PruneMask
from prunetax.core.network import LayerKind, LayerSpec, LossKind, NetworkGraph
from prunetax.core.storage import atomic_write_bytes

MAGIC = b"PRNW"
VERSION = 1

_PREAMBLE = struct.Struct("<4sI3IBBI")
_LAYER = struct.Struct("<B5IBH")
_KINDS = list(LayerKind)
_LOSSES = list(LossKind)
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def encode_checkpoint(net: NetworkGraph, mask: PruneMask) -> bytes:
    dtype_code = net.dtype.itemsize
    if dtype_code not in _DTYPES:
        raise CheckpointFormatError(f"cannot store dtype {net.dtype}", 0)
    parts = [_PREAMBLE.pack(
        MAGIC, VERSION, *net.input_shape, _LOSSES.index(net.loss_kind), dtype_code, len(net.layers),
    )]
    for spec in net.layers:
        name = spec.name.encode("utf-8")
        parts.append(_LAYER.pack(
            _KINDS.index(spec.kind),
            spec.in_channels or 0,
            spec.out_channels or 0,
            spec.kernel,
            spec.stride,
            spec.pad,
            int(spec.has_bias),
            len(name),
        ))
        parts.append(name)

    stored = _DTYPES[dtype_code]
    for index in net.parametric_layers():
        p = net.params[index]
        parts.append(np.ascontiguousarray(p.weight, dtype=stored).tobytes())
        if p.bias is not None:
            parts.append(np.ascontiguousarray(p.bias, dtype=stored).tobytes())
    for index in net.prunable_layers():
        parts.append(np.packbits(mask.pruned[index], bitorder="little").tobytes())
    return b"".join(parts)


def save_checkpoint(path: Path, net: NetworkGraph, mask: PruneMask) -> Path:
    return atomic_write_bytes(path, encode_checkpoint(net, mask), prefix="checkpoint_")


class _Reader:
    """Cursor over checkpoint bytes; short reads raise with the offset."""

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError(f"truncated {what}", self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> tuple:
        return fmt.unpack(self.take(fmt.size, what))


def decode_checkpoint(data: bytes) -> tuple[NetworkGraph, PruneMask]:
    reader = _Reader(data)
    magic, version, c, h, w, loss_code, dtype_code, layer_count = reader.unpack(_PREAMBLE, "header")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    if loss_code >= len(_LOSSES):
        raise CheckpointFormatError(f"unknown loss code {loss_code}", 20)
    if dtype_code not in _DTYPES:
        raise CheckpointFormatError(f"unknown dtype code {dtype_code}", 21)

    layers: list[LayerSpec] = []
    for _ in range(layer_count):
        start = reader.offset
        kind, in_c, out_c, kernel, stride, pad, has_bias, name_len = reader.unpack(_LAYER, "layer table")
        name = reader.take(name_len, "layer name").decode("utf-8")
        if kind >= len(_KINDS):
            raise CheckpointFormatError(f"unknown layer kind {kind}", start)
        try:
            layers.append(LayerSpec(
                kind=_KINDS[kind],
                name=name,
                in_channels=in_c or None,
                out_channels=out_c or None,
                kernel=kernel,
                stride=stride,
                pad=pad,
                has_bias=bool(has_bias),
            ))
        except ValueError as e:
            raise CheckpointFormatError(f"invalid layer entry: {e}", start) from e

    dtype = _DTYPES[dtype_code]
    try:
        net = NetworkGraph(layers, (c, h, w), loss_kind=_LOSSES[loss_code], dtype=dtype.newbyteorder("="))
    except ValueError as e:
        raise CheckpointFormatError(f"inconsistent layer table: {e}", _PREAMBLE.size) from e

    for index in net.parametric_layers():
        spec = net.layers[index]
        shape = spec.weight_shape()
        count = int(np.prod(shape))
        weight = np.frombuffer(reader.take(count * dtype.itemsize, f"weights of {spec.name}"), dtype=dtype)
        bias = None
        if spec.has_bias:
            bias = np.frombuffer(reader.take(spec.out_channels * dtype.itemsize, f"bias of {spec.name}"), dtype=dtype)
        net.set_params(index, weight.reshape(shape), bias)

    mask = PruneMask.empty(net)
    for index in net.prunable_layers():
        size = net.layers[index].out_channels
        bits = np.frombuffer(reader.take((size + 7) // 8, f"mask of {net.layers[index].name}"), dtype=np.uint8)
        mask.pruned[index] = np.unpackbits(bits, count=size, bitorder="little").astype(bool)
    if reader.offset != len(data):
        raise CheckpointFormatError("trailing bytes", reader.offset)
    return net, mask


def load_checkpoint(path: Path) -> tuple[NetworkGraph, PruneMask]:
    return decode_checkpoint(Path(path).read_bytes())
