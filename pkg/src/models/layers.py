"""Layer zoo with explicit forward/backward passes.

Dense and convolutional layers are maskable: they carry a threshold vector, a
prune mask and a freeze mask next to their weights. Biases are never masked;
they are frozen as a whole once the first dataset is finalized.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np

from src.core.errors import DimensionError
from src.core.tensor import DTYPE, Tensor, conv2d_backward, conv2d_with_cols, conv_output_extent, matmul
from src.pruning.dynamic import compute_prune_mask, masked_backward, masked_weight, surrogate_step


class LayerKind(str, Enum):
    DENSE = "dense"
    CONV = "conv"
    MAXPOOL = "maxpool"
    RELU = "relu"
    TANH = "tanh"
    BATCHNORM = "batchnorm"
    FLATTEN = "flatten"


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer.

    dims by kind: dense (in, out); conv (c_in, c_out, kernel, stride, padding);
    maxpool (size,); batchnorm (channels,); activations and flatten ().
    """

    kind: LayerKind
    dims: Tuple[int, ...] = ()

    @property
    def maskable(self) -> bool:
        return self.kind in (LayerKind.DENSE, LayerKind.CONV)

    def param_count(self) -> int:
        if self.kind == LayerKind.DENSE:
            n_in, n_out = self.dims
            return n_in * n_out + n_out
        if self.kind == LayerKind.CONV:
            c_in, c_out, k = self.dims[:3]
            return c_out * c_in * k * k + c_out
        if self.kind == LayerKind.BATCHNORM:
            return 2 * self.dims[0]
        return 0

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if self.kind == LayerKind.DENSE:
            if input_shape != (self.dims[0],):
                raise DimensionError(f"dense layer expects ({self.dims[0]},), got {input_shape}")
            return (self.dims[1],)
        if self.kind == LayerKind.CONV:
            c_in, c_out, k, stride, padding = self.dims
            if len(input_shape) != 3 or input_shape[0] != c_in:
                raise DimensionError(f"conv layer expects {c_in} input channels, got {input_shape}")
            return (c_out, conv_output_extent(input_shape[1], k, stride, padding),
                    conv_output_extent(input_shape[2], k, stride, padding))
        if self.kind == LayerKind.MAXPOOL:
            size = self.dims[0]
            c, h, w = input_shape
            if h % size or w % size:
                raise DimensionError(f"pool size {size} does not tile {h}x{w}")
            return (c, h // size, w // size)
        if self.kind == LayerKind.FLATTEN:
            return (int(np.prod(input_shape)),)
        return input_shape


class Layer:
    def __init__(self, spec: LayerSpec, name: str):
        self.spec = spec
        self.name = name
        self.grads: Dict[str, Tensor] = {}

    def forward(self, x: Tensor, train: bool) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def params(self) -> Dict[str, Tensor]:
        return {}

    def state(self) -> Dict[str, Tensor]:
        return dict(self.params())

    def load_state(self, records: Dict[str, Tensor]) -> None:
        for key, value in records.items():
            target = getattr(self, key)
            if target.shape != value.shape:
                raise DimensionError(f"{self.name}.{key}: stored {value.shape}, expected {target.shape}")
            target[...] = value

    def clear_cache(self) -> None:
        pass


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


FLAG_KEYS = ("prune_mask", "freeze_mask", "bias_frozen")


class MaskedLayer(Layer):
    """Weights W, thresholds t, prune mask M^p and freeze mask M^f of one layer."""

    def __init__(self, spec: LayerSpec, name: str, weight: Tensor, bias: Tensor):
        super().__init__(spec, name)
        self.weight = weight
        self.bias = bias
        self.threshold = np.zeros(weight.shape[0], dtype=weight.dtype)
        self.freeze_mask = np.zeros(weight.shape, dtype=bool)
        self.prune_mask = np.ones(weight.shape, dtype=bool)
        self.bias_frozen = False
        self.pruning = False
        self.mask_mode = "hard"
        self._mask_values: Optional[Tensor] = None

    def current_mask(self) -> Tensor:
        if not self.pruning:
            return np.ones(self.weight.shape, dtype=bool)
        return compute_prune_mask(self.weight, self.threshold, self.freeze_mask)

    def refresh_mask(self) -> None:
        self.prune_mask = self.current_mask()

    def reset_threshold(self) -> None:
        self.threshold[...] = 0
        self.refresh_mask()

    def active_mask(self) -> Tensor:
        return self.prune_mask | self.freeze_mask

    def _mask_for_forward(self, train: bool) -> Tensor:
        if self.mask_mode == "surrogate":
            rows = np.abs(self.weight.reshape(self.weight.shape[0], -1)) - self.threshold[:, np.newaxis]
            values = surrogate_step(rows).reshape(self.weight.shape)
            return np.where(self.freeze_mask, 1.0, values).astype(self.weight.dtype)
        mask = self.current_mask()
        if train:
            self.prune_mask = mask
        return mask.astype(self.weight.dtype)

    def effective_weight(self, train: bool = False) -> Tensor:
        if not self.pruning:
            self._mask_values = None
            return self.weight
        self._mask_values = self._mask_for_forward(train)
        return masked_weight(self.weight, self._mask_values)

    def params(self) -> Dict[str, Tensor]:
        out = {"weight": self.weight, "bias": self.bias}
        if self.pruning:
            out["threshold"] = self.threshold
        return out

    def state(self) -> Dict[str, Tensor]:
        return {
            "weight": self.weight,
            "bias": self.bias,
            "threshold": self.threshold,
            "prune_mask": self.prune_mask,
            "freeze_mask": self.freeze_mask,
            "bias_frozen": np.array([self.bias_frozen]),
        }

    def load_state(self, records: Dict[str, Tensor]) -> None:
        if "bias_frozen" in records:
            self.bias_frozen = bool(records["bias_frozen"].ravel()[0])
        for key in ("prune_mask", "freeze_mask"):
            if key in records:
                if records[key].size != self.weight.size:
                    raise DimensionError(f"{self.name}.{key}: stored {records[key].shape}, expected {self.weight.shape}")
                setattr(self, key, records[key].reshape(self.weight.shape).astype(bool))
        super().load_state({k: v for k, v in records.items() if k not in FLAG_KEYS})

    def _bias_grads(self, grad_b: Tensor) -> None:
        self.grads["bias"] = np.zeros_like(self.bias) if self.bias_frozen else grad_b.astype(self.bias.dtype)

    def _weight_grads(self, grad_weff: Tensor) -> None:
        if self.pruning:
            grad_w, grad_t = masked_backward(grad_weff, self.weight, self.threshold, self._mask_values,
                                             self.freeze_mask)
            self.grads["weight"] = grad_w
            self.grads["threshold"] = grad_t
        else:
            self.grads["weight"] = grad_weff


class Dense(MaskedLayer):
    def __init__(self, n_in: int, n_out: int, name: str, rng: np.random.Generator, dtype=DTYPE):
        spec = LayerSpec(LayerKind.DENSE, (n_in, n_out))
        super().__init__(spec, name, kaiming_uniform(rng, (n_out, n_in), n_in, dtype), np.zeros(n_out, dtype))
        self._x: Optional[Tensor] = None
        self._w_eff: Optional[Tensor] = None

    def forward(self, x: Tensor, train: bool) -> Tensor:
        w_eff = self.effective_weight(train)
        out = matmul(x, w_eff.T) + self.bias
        if train:
            self._x, self._w_eff = x, w_eff
        return out

    def backward(self, grad: Tensor) -> Tensor:
        self._weight_grads(matmul(grad.T, self._x))
        self._bias_grads(grad.sum(axis=0))
        return matmul(grad, self._w_eff)

    def clear_cache(self) -> None:
        self._x = self._w_eff = None


class Conv2D(MaskedLayer):
    def __init__(self, c_in: int, c_out: int, kernel: int, name: str, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dtype=DTYPE):
        spec = LayerSpec(LayerKind.CONV, (c_in, c_out, kernel, stride, padding))
        fan_in = c_in * kernel * kernel
        weight = kaiming_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, dtype)
        super().__init__(spec, name, weight, np.zeros(c_out, dtype))
        self.stride = stride
        self.padding = padding
        self._cache = None

    def forward(self, x: Tensor, train: bool) -> Tensor:
        w_eff = self.effective_weight(train)
        out, cols = conv2d_with_cols(x, w_eff, self.stride, self.padding)
        out += self.bias.reshape((1, -1, 1, 1))
        if train:
            self._cache = (x, cols, w_eff)
        return out

    def backward(self, grad: Tensor) -> Tensor:
        x, cols, w_eff = self._cache
        grad_x, grad_weff = conv2d_backward(grad, x, w_eff, self.stride, self.padding, cols=cols)
        self._weight_grads(grad_weff)
        self._bias_grads(grad.sum(axis=(0, 2, 3)))
        return grad_x

    def clear_cache(self) -> None:
        self._cache = None


class MaxPool2D(Layer):
    def __init__(self, size: int, name: str):
        super().__init__(LayerSpec(LayerKind.MAXPOOL, (size,)), name)
        self.size = size
        self._cache = None

    def forward(self, x: Tensor, train: bool) -> Tensor:
        n, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise DimensionError(f"pool size {s} does not tile {h}x{w}")
        win = x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // s, w // s, s * s)
        # argmax picks the first maximum, so ties route the gradient to the lowest window index
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., np.newaxis], axis=-1)[..., 0]
        if train:
            self._cache = (idx, x.shape)
        return out

    def backward(self, grad: Tensor) -> Tensor:
        idx, (n, c, h, w) = self._cache
        s = self.size
        gw = np.zeros(idx.shape + (s * s,), dtype=grad.dtype)
        np.put_along_axis(gw, idx[..., np.newaxis], grad[..., np.newaxis], axis=-1)
        return gw.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    def clear_cache(self) -> None:
        self._cache = None


class ReLU(Layer):
    def __init__(self, name: str):
        super().__init__(LayerSpec(LayerKind.RELU), name)
        self._active = None

    def forward(self, x: Tensor, train: bool) -> Tensor:
        active = x > 0
        if train:
            self._active = active
        return x * active

    def backward(self, grad: Tensor) -> Tensor:
        return grad * self._active

    def clear_cache(self) -> None:
        self._active = None


class Tanh(Layer):
    def __init__(self, name: str):
        super().__init__(LayerSpec(LayerKind.TANH), name)
        self._y = None

    def forward(self, x: Tensor, train: bool) -> Tensor:
        y = np.tanh(x)
        if train:
            self._y = y
        return y

    def backward(self, grad: Tensor) -> Tensor:
        return grad * (1 - self._y * self._y)

    def clear_cache(self) -> None:
        self._y = None


class Flatten(Layer):
    def __init__(self, name: str):
        super().__init__(LayerSpec(LayerKind.FLATTEN), name)
        self._shape = None

    def forward(self, x: Tensor, train: bool) -> Tensor:
        if train:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: Tensor) -> Tensor:
        return grad.reshape(self._shape)

    def clear_cache(self) -> None:
        self._shape = None


class BatchNorm(Layer):
    """Per-channel normalization over axis 1; frozen layers use running statistics only."""

    def __init__(self, channels: int, name: str, momentum: float = 0.1, eps: float = 1e-5, dtype=DTYPE):
        super().__init__(LayerSpec(LayerKind.BATCHNORM, (channels,)), name)
        self.gain = np.ones(channels, dtype)
        self.bias = np.zeros(channels, dtype)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.frozen = False
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def _shape(self, x: Tensor) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
        return axes, shape

    def forward(self, x: Tensor, train: bool) -> Tensor:
        axes, shape = self._shape(x)
        use_batch = train and not self.frozen
        if use_batch:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // x.shape[1]
            unbiased = var * count / max(count - 1, 1)
            self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        if train:
            self._cache = (xhat, inv_std, use_batch, axes, shape)
        return (self.gain.reshape(shape) * xhat + self.bias.reshape(shape)).astype(x.dtype)

    def backward(self, grad: Tensor) -> Tensor:
        xhat, inv_std, use_batch, axes, shape = self._cache
        if self.frozen:
            self.grads["gain"] = np.zeros_like(self.gain)
            self.grads["bias"] = np.zeros_like(self.bias)
        else:
            self.grads["gain"] = (grad * xhat).sum(axis=axes).astype(self.gain.dtype)
            self.grads["bias"] = grad.sum(axis=axes).astype(self.bias.dtype)
        dxhat = grad * self.gain.reshape(shape)
        if not use_batch:
            return (dxhat * inv_std.reshape(shape)).astype(grad.dtype)
        n = grad.size // grad.shape[1]
        term = n * dxhat - dxhat.sum(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
        return (term * (inv_std.reshape(shape) / n)).astype(grad.dtype)

    def params(self) -> Dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}

    def state(self) -> Dict[str, Tensor]:
        return {
            "gain": self.gain,
            "bias": self.bias,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
            "frozen": np.array([self.frozen]),
        }

    def load_state(self, records: Dict[str, Tensor]) -> None:
        if "frozen" in records:
            self.frozen = bool(records["frozen"].ravel()[0])
        super().load_state({k: v for k, v in records.items() if k != "frozen"})

    def clear_cache(self) -> None:
        self._cache = None
