import copy
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.errors import ConfigurationError, DimensionError, StateError
from src.core.rng import DEFAULT_SEED, SeededStreams
from src.core.tensor import DTYPE, Tensor
from src.models.layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    Layer,
    LayerKind,
    LayerSpec,
    MaskedLayer,
    MaxPool2D,
    ReLU,
    Tanh,
)

logger = logging.getLogger(__name__)

MODES = ("train", "eval")


class Network:
    """Static sequential graph ending in one shared classification head."""

    def __init__(self, layers: List[Layer], input_shape: Tuple[int, ...], head_classes: int, dtype=DTYPE):
        heads = [layer for layer in layers if isinstance(layer, Dense)]
        if not heads or layers[-1] is not heads[-1] or heads[-1].spec.dims[1] != head_classes:
            raise ConfigurationError(f"network must end in a single dense head with {head_classes} outputs")
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.head_classes = head_classes
        self.dtype = np.dtype(dtype)
        self._has_cache = False

    @property
    def specs(self) -> List[LayerSpec]:
        return [layer.spec for layer in self.layers]

    def forward(self, batch: Tensor, mode: str = "eval") -> Tensor:
        if mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
        if tuple(batch.shape[1:]) != self.input_shape:
            raise DimensionError(f"batch {batch.shape} does not match input {self.input_shape}")
        train = mode == "train"
        x = batch.astype(self.dtype, copy=False)
        for layer in self.layers:
            if not train:
                layer.clear_cache()
            x = layer.forward(x, train)
        self._has_cache = train
        return x

    def backward(self, grad_logits: Tensor) -> Dict[str, Tensor]:
        if not self._has_cache:
            raise StateError("backward called without a cached train-mode forward")
        g = grad_logits.astype(self.dtype, copy=False)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return {f"{layer.name}.{key}": grad for layer in self.layers for key, grad in layer.grads.items()}

    def predict(self, images: Tensor, batch_size: int = 512) -> Tensor:
        chunks = [self.forward(images[i:i + batch_size], "eval") for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.head_classes), self.dtype)

    def named_parameters(self) -> Dict[str, Tensor]:
        return {f"{layer.name}.{key}": value for layer in self.layers for key, value in layer.params().items()}

    def masked_layers(self) -> List[MaskedLayer]:
        return [layer for layer in self.layers if isinstance(layer, MaskedLayer)]

    def batchnorm_layers(self) -> List[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def set_pruning(self, enabled: bool, mask_mode: str = "hard") -> None:
        for layer in self.masked_layers():
            layer.pruning = enabled
            layer.mask_mode = mask_mode
            layer.refresh_mask()

    def refresh_masks(self) -> None:
        for layer in self.masked_layers():
            layer.refresh_mask()

    def reset_thresholds(self) -> None:
        for layer in self.masked_layers():
            layer.reset_threshold()

    def thresholds(self) -> List[Tensor]:
        return [layer.threshold for layer in self.masked_layers()]

    def count_params(self) -> int:
        return count_params_for_specs(self.specs)

    def count_used(self) -> int:
        used = 0
        for layer in self.layers:
            if isinstance(layer, MaskedLayer):
                used += int(layer.active_mask().sum()) + layer.bias.size
            else:
                used += layer.spec.param_count()
        return used

    def layer_usage(self) -> Dict[str, float]:
        return {layer.name: float(layer.active_mask().mean()) for layer in self.masked_layers()}

    def state_dict(self) -> Dict[str, Tensor]:
        return {f"{layer.name}.{key}": value for layer in self.layers for key, value in layer.state().items()}

    def load_state_dict(self, records: Dict[str, Tensor]) -> None:
        for layer in self.layers:
            prefix = f"{layer.name}."
            layer.load_state({k[len(prefix):]: v for k, v in records.items() if k.startswith(prefix)})

    def clone(self) -> "Network":
        twin = copy.deepcopy(self)
        for layer in twin.layers:
            layer.clear_cache()
        twin._has_cache = False
        return twin


def count_params_for_specs(specs: Sequence[LayerSpec]) -> int:
    return sum(spec.param_count() for spec in specs)


def build_from_specs(specs: Sequence[LayerSpec], input_shape: Tuple[int, ...], classes: int,
                     streams: SeededStreams, dtype=DTYPE) -> Network:
    rng = streams.stream("init")
    layers: List[Layer] = []
    shape = tuple(input_shape)
    for idx, spec in enumerate(specs):
        name = f"layer{idx}_{spec.kind.value}"
        if spec.kind == LayerKind.DENSE:
            layer = Dense(spec.dims[0], spec.dims[1], name, rng, dtype)
        elif spec.kind == LayerKind.CONV:
            c_in, c_out, k, stride, padding = spec.dims
            layer = Conv2D(c_in, c_out, k, name, rng, stride, padding, dtype)
        elif spec.kind == LayerKind.MAXPOOL:
            layer = MaxPool2D(spec.dims[0], name)
        elif spec.kind == LayerKind.RELU:
            layer = ReLU(name)
        elif spec.kind == LayerKind.TANH:
            layer = Tanh(name)
        elif spec.kind == LayerKind.FLATTEN:
            layer = Flatten(name)
        else:
            layer = BatchNorm(spec.dims[0], name, dtype=dtype)
        shape = spec.output_shape(shape)
        layers.append(layer)
    return Network(layers, input_shape, classes, dtype)


ACTIVATIONS = {"relu": LayerKind.RELU, "tanh": LayerKind.TANH}


def lenet5_specs(classes: int = 10, channels: int = 1) -> List[LayerSpec]:
    return [
        LayerSpec(LayerKind.CONV, (channels, 6, 5, 1, 0)),
        LayerSpec(LayerKind.TANH),
        LayerSpec(LayerKind.MAXPOOL, (2,)),
        LayerSpec(LayerKind.CONV, (6, 16, 5, 1, 0)),
        LayerSpec(LayerKind.TANH),
        LayerSpec(LayerKind.MAXPOOL, (2,)),
        LayerSpec(LayerKind.FLATTEN),
        LayerSpec(LayerKind.DENSE, (400, 120)),
        LayerSpec(LayerKind.TANH),
        LayerSpec(LayerKind.DENSE, (120, 84)),
        LayerSpec(LayerKind.TANH),
        LayerSpec(LayerKind.DENSE, (84, classes)),
    ]


def toy_mlp_specs(input_shape: Tuple[int, ...], classes: int, hidden: int = 64,
                  activation: str = "relu") -> List[LayerSpec]:
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}; expected one of {sorted(ACTIVATIONS)}")
    n_in = int(np.prod(input_shape))
    return [
        LayerSpec(LayerKind.FLATTEN),
        LayerSpec(LayerKind.DENSE, (n_in, hidden)),
        LayerSpec(ACTIVATIONS[activation]),
        LayerSpec(LayerKind.DENSE, (hidden, classes)),
    ]


def toy_cnn_specs(input_shape: Tuple[int, ...], classes: int, batchnorm: bool = False) -> List[LayerSpec]:
    channels, h, w = input_shape
    if h % 4 or w % 4:
        raise ConfigurationError(f"toy CNN needs image sides divisible by 4, got {h}x{w}")
    specs = [LayerSpec(LayerKind.CONV, (channels, 4, 3, 1, 1))]
    if batchnorm:
        specs.append(LayerSpec(LayerKind.BATCHNORM, (4,)))
    specs += [
        LayerSpec(LayerKind.RELU),
        LayerSpec(LayerKind.MAXPOOL, (2,)),
        LayerSpec(LayerKind.CONV, (4, 8, 3, 1, 1)),
        LayerSpec(LayerKind.RELU),
        LayerSpec(LayerKind.MAXPOOL, (2,)),
        LayerSpec(LayerKind.FLATTEN),
        LayerSpec(LayerKind.DENSE, (8 * (h // 4) * (w // 4), 32)),
        LayerSpec(LayerKind.RELU),
        LayerSpec(LayerKind.DENSE, (32, classes)),
    ]
    return specs


def build_lenet5(input_shape: Tuple[int, ...] = (1, 32, 32), classes: int = 10, seed: int = DEFAULT_SEED,
                 dtype=DTYPE) -> Network:
    if tuple(input_shape[1:]) != (32, 32):
        raise ConfigurationError(f"LeNet-5 expects 32x32 inputs, got {input_shape}")
    return build_from_specs(lenet5_specs(classes, input_shape[0]), input_shape, classes, SeededStreams(seed), dtype)


def build_toy_mlp(input_shape: Tuple[int, ...] = (1, 8, 8), classes: int = 10, seed: int = DEFAULT_SEED,
                  hidden: int = 64, activation: str = "relu", dtype=DTYPE) -> Network:
    return build_from_specs(toy_mlp_specs(input_shape, classes, hidden, activation), input_shape, classes,
                            SeededStreams(seed), dtype)


def build_toy_cnn(input_shape: Tuple[int, ...] = (1, 8, 8), classes: int = 10, seed: int = DEFAULT_SEED,
                  batchnorm: bool = False, dtype=DTYPE) -> Network:
    return build_from_specs(toy_cnn_specs(input_shape, classes, batchnorm), input_shape, classes,
                            SeededStreams(seed), dtype)


BUILDERS = {"lenet5": build_lenet5, "toy_mlp": build_toy_mlp, "toy_cnn": build_toy_cnn}


def build_network(model: str, input_shape: Tuple[int, ...], classes: int, seed: int = DEFAULT_SEED,
                  dtype=DTYPE, builder_kwargs: Optional[dict] = None) -> Network:
    if model not in BUILDERS:
        raise ConfigurationError(f"unknown model {model!r}; expected one of {sorted(BUILDERS)}")
    net = BUILDERS[model](input_shape=input_shape, classes=classes, seed=seed, dtype=dtype, **(builder_kwargs or {}))
    logger.info(f"Built {model} with {net.count_params()} parameters.")
    return net
