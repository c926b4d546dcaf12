"""Trainable-threshold magnitude pruning for dense and convolutional layers.

Each maskable layer owns one threshold per output row of its flattened weight
matrix. The prune mask is the unit step of |W| - t; the step is made trainable
by substituting the long-tailed estimator H for its derivative.
"""
from typing import Iterable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, PositiveFloat

from src.core.errors import ConfigurationError, DimensionError
from src.core.tensor import Tensor, conv2d_forward, matmul


class RegularizerConfig(BaseModel):
    alpha: PositiveFloat


def alpha_for_budget(iterations: int) -> float:
    """Rule of thumb: total iterations x alpha ~ 1."""
    if iterations <= 0:
        raise ConfigurationError("iteration budget must be positive")
    return 1.0 / iterations


def step(x):
    """Unit step: 0 for x < 0, 1 for x >= 0."""
    out = (np.asarray(x) >= 0).astype(np.int8)
    return int(out) if out.ndim == 0 else out


def estimator_h(x):
    """Long-tailed derivative estimate of the unit step."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    out = np.where(a <= 0.4, 2.0 - 4.0 * a, np.where(a <= 1.0, 0.4, 0.0))
    return float(out) if out.ndim == 0 else out


def surrogate_step(x):
    """Smooth stand-in for the step whose derivative is exactly estimator_h.

    Only used by gradient checks: a forward pass through it makes the masked
    backward formulas the true derivative of the loss.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    inner = 2.0 * a - 2.0 * a * a
    tail = 0.48 + 0.4 * (a - 0.4)
    out = 0.5 + np.sign(x) * np.where(a <= 0.4, inner, np.where(a <= 1.0, tail, 0.72))
    return float(out) if out.ndim == 0 else out


def _rows(a: Tensor, c_o: int) -> Tensor:
    return a.reshape(c_o, -1)


def compute_prune_mask(weight: Tensor, threshold: Tensor, frozen: Optional[Tensor] = None) -> Tensor:
    """M^p[i, j] = S(|W[i, j]| - t[i]) on free entries, forced to 1 on frozen ones."""
    c_o = weight.shape[0]
    if threshold.shape != (c_o,):
        raise DimensionError(f"threshold {threshold.shape} does not match {c_o} output rows")
    if frozen is not None and frozen.shape != weight.shape:
        raise DimensionError(f"freeze mask {frozen.shape} does not match weight {weight.shape}")
    mask = np.abs(_rows(weight, c_o)) - threshold[:, np.newaxis].astype(weight.dtype) >= 0
    mask = mask.reshape(weight.shape)
    if frozen is not None:
        mask |= frozen
    return mask


def masked_weight(weight: Tensor, mask: Tensor) -> Tensor:
    return weight * mask.astype(weight.dtype)


def masked_forward(weight: Tensor, mask: Tensor, x: Tensor, bias: Optional[Tensor] = None,
                   stride: int = 1, padding: int = 0) -> Tensor:
    """Forward with the effective weight W o M^p (dense rows or conv kernels)."""
    w_eff = masked_weight(weight, mask)
    if weight.ndim == 2:
        out = matmul(x, w_eff.T)
        return out + bias if bias is not None else out
    out = conv2d_forward(x, w_eff, stride, padding)
    if bias is not None:
        out = out + bias.reshape((-1, 1, 1))
    return out


def masked_backward(grad_weff: Tensor, weight: Tensor, threshold: Tensor, mask: Tensor,
                    frozen: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """Chain rule through W_eff = W * S(|W| - t) with dS ~ H.

    grad_W = g * (M + |W| * H(|W| - t)),  grad_t[i] = -sum_j g * W * H(|W| - t).
    Frozen entries are exempt from thresholding, so their estimator term is dropped.
    """
    c_o = weight.shape[0]
    w = _rows(weight, c_o)
    g = _rows(grad_weff, c_o)
    m = _rows(mask, c_o).astype(weight.dtype)
    h = estimator_h(np.abs(w) - threshold[:, np.newaxis]).astype(weight.dtype)
    if frozen is not None:
        h = np.where(_rows(frozen, c_o), 0, h).astype(weight.dtype)
    grad_w = g * (m + np.abs(w) * h)
    grad_t = -(g * w * h).sum(axis=1)
    return grad_w.reshape(weight.shape), grad_t.astype(threshold.dtype)


def sparse_reg(thresholds: Iterable[Tensor]) -> Tuple[float, List[Tensor]]:
    """L_s = sum over layers and rows of exp(-t); gradient -exp(-t)."""
    total = 0.0
    grads = []
    for t in thresholds:
        e = np.exp(-t.astype(np.float64))
        total += float(e.sum())
        grads.append((-e).astype(t.dtype))
    return total, grads


def remaining_ratio(target) -> float:
    """Fraction of maskable weights with (M^p OR M^f) = 1, for one layer or a whole network."""
    layers = target.masked_layers() if hasattr(target, "masked_layers") else [target]
    active = sum(int(layer.active_mask().sum()) for layer in layers)
    total = sum(layer.weight.size for layer in layers)
    return active / total if total else 1.0
