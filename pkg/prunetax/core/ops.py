"""
Dense tensor kernels for small CNNs.

Tensors are plain numpy arrays in NCHW layout. Convolution is
cross-correlation (no kernel flip) computed through im2col, so
conv2d(x, W)[n, o, i, j] = sum_{c,u,v} x_pad[n, c, i*s+u, j*s+v] * W[o, c, u, v] + b[o].

Each forward kernel has a first-order backward twin and, for the layers
that need it, a diagonal second-order twin used by the layer-diagonal
Hessian estimator.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from prunetax.core.errors import NonFiniteError, ShapeMismatchError

Tensor = np.ndarray


def output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Spatial output size floor((size + 2*pad - kernel) / stride) + 1."""
    return (size + 2 * pad - kernel) // stride + 1


def check_finite(array: Tensor, layer: str, what: str = "output") -> None:
    """Raise NonFiniteError if the array holds a NaN or Inf."""
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(layer, what)


# =============================================================================
# im2col / col2im
# =============================================================================

def im2col(x: Tensor, kernel: int, stride: int = 1, pad: int = 0) -> Tensor:
    """
    Unfold (N, C, H, W) into (N*out_h*out_w, C*kernel*kernel).

    Column order is (c, u, v), matching a weight reshaped to (out, C*k*k).
    """
    n, c, h, w = x.shape
    out_h = output_size(h, kernel, stride, pad)
    out_w = output_size(w, kernel, stride, pad)

    img = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)], mode="constant")
    col = np.zeros((n, c, kernel, kernel, out_h, out_w), dtype=x.dtype)
    for u in range(kernel):
        u_max = u + stride * out_h
        for v in range(kernel):
            v_max = v + stride * out_w
            col[:, :, u, v, :, :] = img[:, :, u:u_max:stride, v:v_max:stride]

    # (N, C, k, k, oh, ow) -> (N, oh, ow, C, k, k) -> (N*oh*ow, C*k*k)
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, -1)


def col2im(
    cols: Tensor,
    input_shape: tuple[int, ...],
    kernel: int,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Fold columns back into (N, C, H, W), summing overlapping windows."""
    n, c, h, w = input_shape
    out_h = output_size(h, kernel, stride, pad)
    out_w = output_size(w, kernel, stride, pad)

    col = cols.reshape(n, out_h, out_w, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros(
        (n, c, h + 2 * pad + stride - 1, w + 2 * pad + stride - 1), dtype=cols.dtype
    )
    for u in range(kernel):
        u_max = u + stride * out_h
        for v in range(kernel):
            v_max = v + stride * out_w
            img[:, :, u:u_max:stride, v:v_max:stride] += col[:, :, u, v, :, :]
    return img[:, :, pad:h + pad, pad:w + pad]


# =============================================================================
# Convolution
# =============================================================================

def _check_conv_shapes(
    x: Tensor,
    weights: Tensor,
    bias: Optional[Tensor],
    pad: int,
    layer: str,
) -> None:
    if x.ndim != 4:
        raise ShapeMismatchError(layer, "input rank", 4, x.ndim)
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ShapeMismatchError(layer, "weight shape", "[out, in, k, k]", list(weights.shape))
    if x.shape[1] != weights.shape[1]:
        raise ShapeMismatchError(layer, "in_channels", weights.shape[1], x.shape[1])
    k = weights.shape[2]
    if x.shape[2] + 2 * pad < k:
        raise ShapeMismatchError(layer, "height", f">= {k - 2 * pad}", x.shape[2])
    if x.shape[3] + 2 * pad < k:
        raise ShapeMismatchError(layer, "width", f">= {k - 2 * pad}", x.shape[3])
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeMismatchError(layer, "bias length", weights.shape[0], list(bias.shape))


def conv2d(
    x: Tensor,
    weights: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    layer: str = "conv",
) -> Tensor:
    """Cross-correlation of x (N, C, H, W) with weights (O, C, k, k)."""
    out, _ = conv2d_with_cols(x, weights, bias, stride, pad, layer)
    return out


def conv2d_with_cols(
    x: Tensor,
    weights: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    layer: str = "conv",
) -> tuple[Tensor, Tensor]:
    """conv2d that also returns the im2col matrix for the backward pass."""
    _check_conv_shapes(x, weights, bias, pad, layer)
    n, _, h, w = x.shape
    m, _, k, _ = weights.shape
    out_h = output_size(h, k, stride, pad)
    out_w = output_size(w, k, stride, pad)

    cols = im2col(x, k, stride, pad)
    out = cols @ weights.reshape(m, -1).T
    if bias is not None:
        out = out + bias
    out = out.reshape(n, out_h, out_w, m).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d_backward(
    dout: Tensor,
    cols: Tensor,
    input_shape: tuple[int, ...],
    weights: Tensor,
    stride: int,
    pad: int,
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients (dx, dW, db) of a convolution given dL/dout."""
    m, _, k, _ = weights.shape
    dout_flat = dout.transpose(0, 2, 3, 1).reshape(-1, m)

    dw = (dout_flat.T @ cols).reshape(weights.shape)
    db = dout_flat.sum(axis=0)
    dcols = dout_flat @ weights.reshape(m, -1)
    dx = col2im(dcols, input_shape, k, stride, pad)
    return dx, dw, db


def conv2d_second_backward(
    h2out: Tensor,
    cols: Tensor,
    input_shape: tuple[int, ...],
    weights: Tensor,
    stride: int,
    pad: int,
) -> tuple[Tensor, Tensor, Tensor]:
    """
    Diagonal second derivatives through y = W * x + b.

    Keeping only diagonal terms of the output Hessian:
      d2L/dx_j^2  = sum_i W_ij^2 * d2L/dy_i^2   (summed over every window using x_j)
      d2L/dW_ij^2 = sum_p x_{p,j}^2 * d2L/dy_{p,i}^2
      d2L/db_i^2  = sum_p d2L/dy_{p,i}^2
    """
    m, _, k, _ = weights.shape
    h2_flat = h2out.transpose(0, 2, 3, 1).reshape(-1, m)

    h2w = (h2_flat.T @ np.square(cols)).reshape(weights.shape)
    h2b = h2_flat.sum(axis=0)
    h2cols = h2_flat @ np.square(weights.reshape(m, -1))
    h2x = col2im(h2cols, input_shape, k, stride, pad)
    return h2x, h2w, h2b


# =============================================================================
# Pointwise and pooling layers
# =============================================================================

def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(dout: Tensor, x: Tensor) -> Tensor:
    return dout * (x > 0)


def relu_second_backward(h2out: Tensor, x: Tensor) -> Tensor:
    # f'(x)^2 * h2 + f''(x) * g; f'' is zero almost everywhere for ReLU
    return h2out * (x > 0)


def maxpool2d(x: Tensor, kernel: int, stride: int) -> tuple[Tensor, Tensor]:
    """
    Max pooling; returns the output and the flat argmax inside each window.

    np.argmax picks the first maximal element in row-major window order,
    which fixes gradient routing on ties.
    """
    n, c, h, w = x.shape
    out_h = output_size(h, kernel, stride, 0)
    out_w = output_size(w, kernel, stride, 0)
    cols = im2col(x.reshape(n * c, 1, h, w), kernel, stride, 0)
    argmax = np.argmax(cols, axis=1)
    out = cols[np.arange(cols.shape[0]), argmax]
    return out.reshape(n, c, out_h, out_w), argmax


def maxpool2d_backward(
    dout: Tensor,
    argmax: Tensor,
    input_shape: tuple[int, ...],
    kernel: int,
    stride: int,
) -> Tensor:
    """Route dL/dout to the selected element of each window."""
    n, c, h, w = input_shape
    dcols = np.zeros((argmax.size, kernel * kernel), dtype=dout.dtype)
    dcols[np.arange(argmax.size), argmax] = dout.reshape(-1)
    dx = col2im(dcols, (n * c, 1, h, w), kernel, stride, 0)
    return dx.reshape(input_shape)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(dout: Tensor, input_shape: tuple[int, ...]) -> Tensor:
    n, c, h, w = input_shape
    return np.broadcast_to(dout / (h * w), input_shape).copy()


def global_avg_pool_second_backward(h2out: Tensor, input_shape: tuple[int, ...]) -> Tensor:
    n, c, h, w = input_shape
    return np.broadcast_to(h2out / float(h * w) ** 2, input_shape).copy()


def flatten(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C*H*W, 1, 1) so dense layers run as 1x1 convolutions."""
    return x.reshape(x.shape[0], -1, 1, 1)


# =============================================================================
# Losses (batch mean)
# =============================================================================

def softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor, Tensor, Tensor]:
    """
    Mean softmax cross-entropy over the batch.

    Returns (loss, probabilities, dL/dlogits, diagonal d2L/dlogits^2).
    """
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)

    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    hess = probs * (1.0 - probs) / n
    return loss, probs, grad, hess


def mse(output: Tensor, target: Tensor) -> tuple[float, Tensor, Tensor]:
    """
    Half squared error summed per sample, averaged over the batch.

    Returns (loss, dL/doutput, diagonal d2L/doutput^2).
    """
    n = output.shape[0]
    diff = output - target
    loss = float(0.5 * np.sum(np.square(diff)) / n)
    grad = diff / n
    hess = np.full_like(output, 1.0 / n)
    return loss, grad, hess
