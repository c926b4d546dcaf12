"""Dense numeric kernel: matmul, im2col convolution, loss and the SGD update rule.

Tensors are numpy arrays in row-major (C) order. Parameters and activations are
float32 by default; every op preserves the dtype of its inputs so gradient
checks can run the same code in float64. Reductions go through fixed numpy
code paths, so identical inputs give identical bits on one machine.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.core.errors import ConfigurationError, DimensionError, InputError, NumericError

Tensor = np.ndarray

DTYPE = np.float32
METRIC_DTYPE = np.float64


def check_finite(x: Tensor, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if stride <= 0 or span < 0 or span % stride:
        raise ConfigurationError(
            f"extent {size} with kernel {kernel}, stride {stride}, padding {padding} does not tile"
        )
    return span // stride + 1


def im2col(x: Tensor, kh: int, kw: int, stride: int, padding: int) -> Tuple[Tensor, int, int]:
    """Flatten every receptive field of an N x C x H x W batch into one row."""
    n, c, h, w = x.shape
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def col2im(cols: Tensor, x_shape: Tuple[int, ...], kh: int, kw: int, stride: int, padding: int,
           ho: int, wo: int) -> Tensor:
    n, c, h, w = x_shape
    g = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g[:, :, i, j]
    return out[:, :, padding:padding + h, padding:padding + w]


def _as_batch(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return x[np.newaxis], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"convolution input must be C x H x W or N x C x H x W, got {x.shape}")


def conv2d_with_cols(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tuple[Tensor, Tensor]:
    """Batched cross-correlation; returns the output and the im2col matrix for reuse in backward."""
    if kernel.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"kernel {kernel.shape} does not match input channels of {x.shape}")
    co, _, kh, kw = kernel.shape
    cols, ho, wo = im2col(x, kh, kw, stride, padding)
    out = matmul(cols, kernel.reshape(co, -1).T)
    out = out.reshape(x.shape[0], ho, wo, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d_forward(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    batch, single = _as_batch(x)
    out, _ = conv2d_with_cols(batch, kernel, stride, padding)
    return out[0] if single else out


def conv2d_backward(grad_out: Tensor, cached_input: Tensor, kernel: Tensor, stride: int = 1,
                    padding: int = 0, cols: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """Exact gradients of conv2d_forward w.r.t. its input and kernel."""
    x, single = _as_batch(cached_input)
    g = grad_out[np.newaxis] if single else grad_out
    co, _, kh, kw = kernel.shape
    ho = conv_output_extent(x.shape[2], kh, stride, padding)
    wo = conv_output_extent(x.shape[3], kw, stride, padding)
    if g.shape != (x.shape[0], co, ho, wo):
        raise DimensionError(f"grad_out {grad_out.shape} does not match forward output ({co}, {ho}, {wo})")
    if cols is None:
        cols, _, _ = im2col(x, kh, kw, stride, padding)
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
    grad_kernel = matmul(g2.T, cols).reshape(kernel.shape)
    grad_cols = matmul(g2, kernel.reshape(co, -1))
    grad_input = col2im(grad_cols, x.shape, kh, kw, stride, padding, ho, wo)
    return (grad_input[0] if single else grad_input), grad_kernel


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.astype(METRIC_DTYPE) - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tuple[float, Tensor]:
    """Mean cross-entropy over the batch and its gradient (softmax - onehot) / B."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    b = logits.shape[0]
    rows = np.arange(b)
    logp = log_softmax(logits)
    loss = float(-logp[rows, labels].mean())
    probs = np.exp(logp)
    probs[rows, labels] -= 1.0
    return loss, (probs / b).astype(logits.dtype)


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    nesterov: bool = True
    velocity: Dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")


def sgd_step(param: Tensor, grad: Tensor, state: OptimizerState, key: str = "param") -> Tensor:
    """In-place SGD step: v <- mu*v + g; update = mu*v + g (nesterov) or v; p <- p - lr*update."""
    if param.shape != grad.shape:
        raise DimensionError(f"{key}: grad {grad.shape} does not match param {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient for {key}")
    velocity = state.velocity.get(key)
    if velocity is None:
        velocity = np.zeros_like(param)
    velocity = state.momentum * velocity + grad
    update = state.momentum * velocity + grad if state.nesterov else velocity
    param -= state.learning_rate * update
    state.velocity[key] = velocity
    return param
