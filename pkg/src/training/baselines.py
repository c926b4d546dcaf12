"""Reference continual learners: naive SGD, EWC, PackNet* and separated models.

All learners share SequenceLearner's loop, so they consume the same
TaskSequence and fill the same ResultMatrix schema as AdaptCL.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.core.errors import CapacityError, ConfigurationError
from src.core.tensor import METRIC_DTYPE, OptimizerState, Tensor, softmax_cross_entropy
from src.data.datasets import ImageDataset, TaskSequence
from src.metrics.evaluation import ResultMatrix, accuracy
from src.models.network import Network
from src.training.freezing import apply_freeze, finalize_dataset
from src.training.trainer import AdaptCLTrainer, SequenceLearner, SequenceRunState, TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_PRUNE_FRACTION = 1.0 / 3.0
DEFAULT_RETRAIN_EPOCHS = 10
DEFAULT_EWC_SAMPLES = 200
# absorbs decimal spellings of fractions such as 0.333333 x 99
_FLOOR_SLACK = 1e-6


class NaiveSGDLearner(SequenceLearner):
    """Plain finetuning: no masks, no penalties."""

    method = "sgd"

    def __init__(self, network: Network, config: TrainConfig):
        super().__init__(network, config)
        network.set_pruning(False)


def train_sgd_naive(network: Network, tasks: TaskSequence, config: TrainConfig) -> Tuple[SequenceRunState, ResultMatrix]:
    return NaiveSGDLearner(network, config).run_sequence(tasks)


# EWC -----------------------------------------------------------------------

@dataclass
class FisherState:
    fisher: Dict[str, Tensor]
    anchor: Dict[str, Tensor]
    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("EWC lambda must be nonnegative")
        for name, f in self.fisher.items():
            if f.shape != self.anchor[name].shape:
                raise ConfigurationError(f"fisher and anchor disagree on {name}")


def consolidate_ewc(network: Network, dataset: ImageDataset, n_samples: int, lam: float) -> FisherState:
    """Empirical Fisher: mean squared gradient of the ground-truth log-likelihood over the first n samples."""
    if n_samples > len(dataset):
        logger.warning(f"EWC asked for {n_samples} Fisher samples but {dataset.name} has {len(dataset)}; clamping.")
        n_samples = len(dataset)
    if n_samples <= 0:
        raise ConfigurationError("EWC needs at least one Fisher sample")
    params = network.named_parameters()
    fisher = {name: np.zeros(p.shape, dtype=METRIC_DTYPE) for name, p in params.items()}
    # running statistics must not drift while probing gradients
    bn_flags = [(bn, bn.frozen) for bn in network.batchnorm_layers()]
    for bn, _ in bn_flags:
        bn.frozen = True
    try:
        for i in range(n_samples):
            logits = network.forward(dataset.images[i:i + 1], "train")
            _, grad_logits = softmax_cross_entropy(logits, dataset.labels[i:i + 1])
            grads = network.backward(grad_logits)
            for name in fisher:
                fisher[name] += grads[name].astype(METRIC_DTYPE) ** 2
    finally:
        for bn, was_frozen in bn_flags:
            bn.frozen = was_frozen
    fisher = {name: (f / n_samples).astype(params[name].dtype) for name, f in fisher.items()}
    anchor = {name: p.copy() for name, p in params.items()}
    logger.info(f"EWC consolidated on {n_samples} samples of {dataset.name}.")
    return FisherState(fisher, anchor, lam)


def ewc_penalty(network: Network, fisher_states: List[FisherState]) -> Tuple[float, Dict[str, Tensor]]:
    """sum over states of lam/2 * sum F * (w - anchor)^2, and its gradient."""
    params = network.named_parameters()
    loss = 0.0
    grads: Dict[str, Tensor] = {}
    for state in fisher_states:
        if state.lam == 0.0:
            continue
        for name, f in state.fisher.items():
            diff = params[name].astype(METRIC_DTYPE) - state.anchor[name]
            loss += 0.5 * state.lam * float((f * diff * diff).sum())
            g = (state.lam * f * diff).astype(params[name].dtype)
            grads[name] = grads[name] + g if name in grads else g
    return loss, grads


class EWCLearner(NaiveSGDLearner):
    method = "ewc"

    def __init__(self, network: Network, config: TrainConfig, ewc_lambda: float = 1.0,
                 ewc_samples: int = DEFAULT_EWC_SAMPLES):
        super().__init__(network, config)
        self.ewc_lambda = ewc_lambda
        self.ewc_samples = ewc_samples
        self.fisher_states: List[FisherState] = []

    def penalty(self, state: SequenceRunState) -> Tuple[float, Dict[str, Tensor]]:
        if not self.fisher_states:
            return 0.0, {}
        return ewc_penalty(self.network, self.fisher_states)

    def end_dataset(self, state: SequenceRunState, dataset_idx: int, dataset: ImageDataset) -> None:
        self.fisher_states.append(consolidate_ewc(self.network, dataset, self.ewc_samples, self.ewc_lambda))


def train_ewc(network: Network, tasks: TaskSequence, config: TrainConfig, ewc_lambda: float = 1.0,
              ewc_samples: int = DEFAULT_EWC_SAMPLES) -> Tuple[SequenceRunState, ResultMatrix]:
    return EWCLearner(network, config, ewc_lambda, ewc_samples).run_sequence(tasks)


# PackNet* ------------------------------------------------------------------

def prune_count(free: int, fraction: float) -> int:
    return int(np.floor(fraction * free + _FLOOR_SLACK))


def packnet_prune_mask(weight: Tensor, freeze_mask: Tensor, fraction: float) -> Tensor:
    """Lowest-|W| floor(fraction x free) free weights; equal magnitudes go lowest flat index first."""
    free_idx = np.flatnonzero(~freeze_mask)
    k = prune_count(free_idx.size, fraction)
    order = np.argsort(np.abs(weight.ravel()[free_idx]), kind="stable")
    pruned = np.zeros(weight.size, dtype=bool)
    pruned[free_idx[order[:k]]] = True
    return pruned.reshape(weight.shape)


def packnet_frozen_counts(weight_count: int, fraction: float, datasets: int) -> List[int]:
    """Accumulated frozen count after each dataset for one layer."""
    free, frozen, counts = weight_count, 0, []
    for _ in range(datasets):
        k = prune_count(free, fraction)
        frozen += free - k
        free = k
        counts.append(frozen)
    return counts


@dataclass
class PackNetState:
    prune_fraction: float = DEFAULT_PRUNE_FRACTION
    retrain_epochs: int = DEFAULT_RETRAIN_EPOCHS
    pruned: List[Tensor] = field(default_factory=list)
    layer_masks: List[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.prune_fraction < 1.0:
            raise ConfigurationError("prune_fraction must lie in (0, 1)")
        if self.retrain_epochs < 1:
            raise ConfigurationError("retrain_epochs must be positive")


class PackNetStarLearner(SequenceLearner):
    """Train free weights, prune a fixed fraction of them, retrain, freeze the survivors.

    Inference uses the dense weights with no stored per-task masks.
    """

    method = "packnet_star"

    def __init__(self, network: Network, config: TrainConfig, prune_fraction: float = DEFAULT_PRUNE_FRACTION,
                 retrain_epochs: int = DEFAULT_RETRAIN_EPOCHS):
        super().__init__(network, config)
        self.packnet = PackNetState(prune_fraction, retrain_epochs)
        self._pruned = False
        if retrain_epochs >= config.epochs_per_dataset:
            raise ConfigurationError(
                f"retrain_epochs ({retrain_epochs}) must be below epochs_per_dataset ({config.epochs_per_dataset})"
            )
        network.set_pruning(False)

    def epochs_for(self, dataset_idx: int) -> List[int]:
        retrain = self.packnet.retrain_epochs
        return [0] * (self.config.epochs_per_dataset - retrain) + [1] * retrain

    def begin_dataset(self, state: SequenceRunState, dataset_idx: int, dataset: ImageDataset) -> None:
        layers = self.network.masked_layers()
        for layer in layers:
            if layer.freeze_mask.all():
                raise CapacityError(f"{layer.name} has no free weights left for dataset {dataset_idx}")
            layer.prune_mask = np.ones(layer.weight.shape, dtype=bool)
        self.packnet.pruned = [np.zeros(layer.weight.shape, dtype=bool) for layer in layers]
        self._pruned = False

    def before_epoch(self, state: SequenceRunState, dataset_idx: int, phase: int) -> None:
        if phase != 1 or self._pruned:
            return
        self.prune(dataset_idx)
        self._pruned = True
        state.optimizer = OptimizerState(self.config.learning_rate, self.config.momentum, self.config.nesterov)

    def prune(self, dataset_idx: int) -> None:
        for i, layer in enumerate(self.network.masked_layers()):
            pruned = packnet_prune_mask(layer.weight, layer.freeze_mask, self.packnet.prune_fraction)
            layer.weight[pruned] = 0
            layer.prune_mask = ~pruned
            self.packnet.pruned[i] = pruned
            logger.info(f"[packnet_star] dataset {dataset_idx}: pruned {int(pruned.sum())} of "
                        f"{int((~layer.freeze_mask).sum())} free weights in {layer.name}")

    def adjust_gradients(self, state: SequenceRunState, grads: Dict[str, Tensor]) -> None:
        for layer, pruned in zip(self.network.masked_layers(), self.packnet.pruned):
            key = f"{layer.name}.weight"
            grads[key] = apply_freeze(grads[key], layer.freeze_mask | pruned)

    def end_dataset(self, state: SequenceRunState, dataset_idx: int, dataset: ImageDataset) -> None:
        for layer, pruned in zip(self.network.masked_layers(), self.packnet.pruned):
            layer.freeze_mask = layer.freeze_mask | ~pruned
            layer.prune_mask = layer.freeze_mask.copy()
        self.packnet.layer_masks = [layer.freeze_mask.copy() for layer in self.network.masked_layers()]
        finalize_dataset(self.network, dataset_idx)


def train_packnet_star(network: Network, tasks: TaskSequence, config: TrainConfig,
                       prune_fraction: float = DEFAULT_PRUNE_FRACTION,
                       retrain_epochs: int = DEFAULT_RETRAIN_EPOCHS) -> Tuple[SequenceRunState, ResultMatrix]:
    return PackNetStarLearner(network, config, prune_fraction, retrain_epochs).run_sequence(tasks)


# SML -----------------------------------------------------------------------

class SMLLearner(NaiveSGDLearner):
    """One freshly initialized model per task; only the diagonal of R is meaningful."""

    method = "sml"

    def __init__(self, network_factory: Callable[[], Network], config: TrainConfig):
        super().__init__(network_factory(), config)
        self.network_factory = network_factory
        self.models: List[Network] = []

    def run_sequence(self, tasks: TaskSequence) -> Tuple[SequenceRunState, ResultMatrix]:
        self.check_sequence(tasks)
        state = self.new_state()
        result = ResultMatrix(len(tasks), diagonal_only=True)
        result.set_baseline(self.evaluate(tasks))
        for d, task in enumerate(tasks):
            self.network = self.network_factory()
            self.network.set_pruning(False)
            state.network = self.network
            self.train_on_dataset(state, d, task.train, tasks)
            self.models.append(self.network)
            self.record_usage(state)
            state.used_params[-1] = sum(model.count_used() for model in self.models)
            result.set_entry(d, d, accuracy(self.network, task.test, self.config.eval_batch_size))
            logger.info(f"[sml] model {d} ({task.name}): R[{d},{d}] = {result.R[d, d]:.2f}")
            for hook in self.dataset_hooks:
                hook(state, d)
        return state, result


def train_sml(network_factory: Callable[[], Network], tasks: TaskSequence,
              config: TrainConfig) -> Tuple[SequenceRunState, ResultMatrix]:
    return SMLLearner(network_factory, config).run_sequence(tasks)


def learner_for(method: str, network_factory: Callable[[], Network], config: TrainConfig,
                options: Optional[Dict[str, float]] = None) -> SequenceLearner:
    options = options or {}
    if method == "adaptcl":
        return AdaptCLTrainer(network_factory(), config)
    if method == "sgd":
        return NaiveSGDLearner(network_factory(), config)
    if method == "ewc":
        return EWCLearner(network_factory(), config, options.get("ewc_lambda", 1.0),
                          int(options.get("ewc_samples", DEFAULT_EWC_SAMPLES)))
    if method == "packnet_star":
        return PackNetStarLearner(network_factory(), config, options.get("prune_fraction", DEFAULT_PRUNE_FRACTION),
                                  int(options.get("retrain_epochs", DEFAULT_RETRAIN_EPOCHS)))
    if method == "sml":
        return SMLLearner(network_factory, config)
    raise ConfigurationError(f"unknown method {method!r}")
