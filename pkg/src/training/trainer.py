"""Sequence training loop shared by every learner, and the AdaptCL learner itself.

A learner owns one network and walks a TaskSequence: for each dataset it
resets its per-dataset state, trains for a fixed epoch budget, closes the
dataset (freeze/finalize for AdaptCL) and fills one row of R.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeFloat, PositiveFloat, PositiveInt, field_validator

from src.core.errors import ConfigurationError, NumericError
from src.core.rng import DEFAULT_SEED, SeededStreams
from src.core.tensor import OptimizerState, Tensor, sgd_step, softmax_cross_entropy
from src.data.datasets import ImageDataset, TaskSequence
from src.metrics.evaluation import ResultMatrix, accuracy, task_accuracies
from src.models.network import Network
from src.pruning.dynamic import alpha_for_budget, remaining_ratio, sparse_reg
from src.training.freezing import apply_freeze, finalize_dataset, update_freeze_masks

logger = logging.getLogger(__name__)

StepHook = Callable[["SequenceRunState", int, int, int], None]
DatasetHook = Callable[["SequenceRunState", int], None]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: Optional[NonNegativeFloat] = None
    alpha_rule: Literal["steps", "images"] = "steps"
    pruning: bool = True
    learning_rate: PositiveFloat = 0.001
    momentum: NonNegativeFloat = 0.9
    nesterov: bool = True
    epochs_per_dataset: PositiveInt = 5
    batch_size: PositiveInt = 32
    eval_batch_size: PositiveInt = 512
    seed: int = DEFAULT_SEED

    @field_validator("momentum")
    @classmethod
    def _momentum_below_one(cls, v: float) -> float:
        if v >= 1.0:
            raise ValueError("momentum must be < 1")
        return v


@dataclass
class EpochRecord:
    dataset_idx: int
    epoch: int
    train_loss: float
    remaining_ratio: float
    task_accuracies: List[float]
    mixed_accuracy: float
    method: str


@dataclass
class SequenceRunState:
    network: Network
    config: TrainConfig
    method: str
    history: List[EpochRecord] = field(default_factory=list)
    layer_usage: List[Dict[str, float]] = field(default_factory=list)
    used_params: List[int] = field(default_factory=list)
    firing: List[Tensor] = field(default_factory=list)
    optimizer: Optional[OptimizerState] = None
    alpha: float = 0.0
    epochs_elapsed: int = 0

    @property
    def freeze_masks(self) -> List[Tensor]:
        return [layer.freeze_mask for layer in self.network.masked_layers()]


class SequenceLearner:
    """Template for continual learners; subclasses override the dataset hooks."""

    method = "base"

    def __init__(self, network: Network, config: TrainConfig):
        self.network = network
        self.config = config
        self.streams = SeededStreams(config.seed)
        self.step_hooks: List[StepHook] = []
        self.dataset_hooks: List[DatasetHook] = []
        self._firing_counts: Optional[np.ndarray] = None
        self._firing_steps = 0

    # hooks -------------------------------------------------------------
    def begin_dataset(self, state: SequenceRunState, dataset_idx: int, dataset: ImageDataset) -> None:
        pass

    def penalty(self, state: SequenceRunState) -> Tuple[float, Dict[str, Tensor]]:
        return 0.0, {}

    def adjust_gradients(self, state: SequenceRunState, grads: Dict[str, Tensor]) -> None:
        pass

    def after_update(self, state: SequenceRunState) -> None:
        pass

    def end_dataset(self, state: SequenceRunState, dataset_idx: int, dataset: ImageDataset) -> None:
        pass

    def epochs_for(self, dataset_idx: int) -> List[int]:
        """Phase label per epoch of one dataset; plain learners have a single phase."""
        return [0] * self.config.epochs_per_dataset

    def before_epoch(self, state: SequenceRunState, dataset_idx: int, phase: int) -> None:
        pass

    # loop --------------------------------------------------------------
    def new_state(self) -> SequenceRunState:
        return SequenceRunState(self.network, self.config, self.method)

    def check_sequence(self, tasks: TaskSequence) -> None:
        if tasks.input_shape != self.network.input_shape or tasks.classes != self.network.head_classes:
            raise ConfigurationError(
                f"sequence {tasks.name} ({tasks.input_shape}, {tasks.classes} classes) does not fit network "
                f"({self.network.input_shape}, {self.network.head_classes} classes)"
            )

    def evaluate(self, tasks: TaskSequence, network: Optional[Network] = None) -> List[float]:
        network = network or self.network
        return task_accuracies(network, [task.test for task in tasks], self.config.eval_batch_size)

    def evaluate_mixed(self, tasks: TaskSequence, upto: Optional[int] = None,
                       network: Optional[Network] = None) -> float:
        """Accuracy on the pooled test splits of the tasks seen so far."""
        return accuracy(network or self.network, tasks.mixed_test(upto), self.config.eval_batch_size)

    def run_sequence(self, tasks: TaskSequence) -> Tuple[SequenceRunState, ResultMatrix]:
        self.check_sequence(tasks)
        state = self.new_state()
        result = ResultMatrix(len(tasks))
        result.set_baseline(self.evaluate(tasks))
        logger.info(f"[{self.method}] random-init accuracies: {np.round(result.b_bar, 2).tolist()}")
        for d, task in enumerate(tasks):
            self.train_on_dataset(state, d, task.train, tasks)
            self.end_dataset(state, d, task.train)
            self.record_usage(state)
            row = self.evaluate(tasks)
            result.set_row(d, row)
            logger.info(f"[{self.method}] dataset {d} ({task.name}) done: R[{d}] = {np.round(row, 2).tolist()}")
            for hook in self.dataset_hooks:
                hook(state, d)
        return state, result

    def record_usage(self, state: SequenceRunState) -> None:
        state.layer_usage.append(self.network.layer_usage())
        state.used_params.append(self.network.count_used())
        if self._firing_counts is not None:
            state.firing.append(self._firing_counts / max(self._firing_steps, 1))

    def train_on_dataset(self, state: SequenceRunState, dataset_idx: int, dataset: ImageDataset,
                         tasks: TaskSequence) -> SequenceRunState:
        if len(dataset) == 0:
            raise ConfigurationError(f"dataset {dataset_idx} is empty")
        state.optimizer = OptimizerState(self.config.learning_rate, self.config.momentum, self.config.nesterov)
        self.begin_dataset(state, dataset_idx, dataset)
        masked = self.network.masked_layers()
        self._firing_counts = np.zeros(masked[0].weight.size) if masked else None
        self._firing_steps = 0
        shuffle = self.streams.stream(f"shuffle-{dataset_idx}")
        for phase in self.epochs_for(dataset_idx):
            self.before_epoch(state, dataset_idx, phase)
            state.epochs_elapsed += 1
            epoch = state.epochs_elapsed
            losses = []
            for step, (images, labels) in enumerate(dataset.batches(self.config.batch_size, shuffle)):
                losses.append(self.train_step(state, images, labels, dataset_idx, epoch, step))
            accs = self.evaluate(tasks)
            mixed = self.evaluate_mixed(tasks, dataset_idx)
            ratio = remaining_ratio(self.network)
            state.history.append(EpochRecord(dataset_idx, epoch, float(np.mean(losses)), ratio, accs, mixed,
                                             self.method))
            logger.info(
                f"[{self.method}] dataset {dataset_idx} epoch {epoch}: loss={np.mean(losses):.4f} "
                f"remaining={ratio:.4f} acc={np.round(accs, 2).tolist()} mixed={mixed:.2f}"
            )
        return state

    def train_step(self, state: SequenceRunState, images: Tensor, labels: np.ndarray, dataset_idx: int,
                   epoch: int, step: int) -> float:
        net = self.network
        logits = net.forward(images, "train")
        loss, grad_logits = softmax_cross_entropy(logits, labels)
        extra, extra_grads = self.penalty(state)
        loss += extra
        if not np.isfinite(loss):
            logger.error(f"[{self.method}] non-finite loss at dataset {dataset_idx}, epoch {epoch}, step {step}")
            raise NumericError("non-finite loss", dataset_idx, epoch, step)
        grads = net.backward(grad_logits)
        for name, g in extra_grads.items():
            grads[name] = grads[name] + g if name in grads else g
        self.adjust_gradients(state, grads)
        try:
            for name, param in net.named_parameters().items():
                if name in grads:
                    sgd_step(param, grads[name], state.optimizer, key=name)
        except NumericError as exc:
            logger.error(f"[{self.method}] {exc} at dataset {dataset_idx}, epoch {epoch}, step {step}")
            raise NumericError(str(exc), dataset_idx, epoch, step) from exc
        self.after_update(state)
        if self._firing_counts is not None:
            self._firing_counts += net.masked_layers()[0].active_mask().ravel()
            self._firing_steps += 1
        for hook in self.step_hooks:
            hook(state, dataset_idx, epoch, step)
        return loss


class AdaptCLTrainer(SequenceLearner):
    """Dynamic pruning on free weights plus freeze-mask reuse of consolidated ones."""

    method = "adaptcl"

    def __init__(self, network: Network, config: TrainConfig):
        super().__init__(network, config)
        network.set_pruning(config.pruning)

    def resolve_alpha(self, dataset: ImageDataset) -> float:
        if not self.config.pruning:
            return 0.0
        if self.config.alpha is not None:
            return self.config.alpha
        epochs = self.config.epochs_per_dataset
        if self.config.alpha_rule == "images":
            return alpha_for_budget(len(dataset) * epochs)
        steps = -(-len(dataset) // self.config.batch_size)
        return alpha_for_budget(steps * epochs)

    def begin_dataset(self, state: SequenceRunState, dataset_idx: int, dataset: ImageDataset) -> None:
        self.network.reset_thresholds()
        state.alpha = self.resolve_alpha(dataset)
        logger.info(f"[adaptcl] dataset {dataset_idx}: thresholds reset, alpha={state.alpha:.3g}")

    def penalty(self, state: SequenceRunState) -> Tuple[float, Dict[str, Tensor]]:
        if not self.config.pruning or state.alpha == 0.0:
            return 0.0, {}
        layers = self.network.masked_layers()
        value, grads = sparse_reg(layer.threshold for layer in layers)
        return state.alpha * value, {
            f"{layer.name}.threshold": (state.alpha * g).astype(layer.threshold.dtype) for layer, g in zip(layers, grads)
        }

    def adjust_gradients(self, state: SequenceRunState, grads: Dict[str, Tensor]) -> None:
        for layer in self.network.masked_layers():
            key = f"{layer.name}.weight"
            grads[key] = apply_freeze(grads[key], layer.freeze_mask)

    def after_update(self, state: SequenceRunState) -> None:
        self.network.refresh_masks()

    def end_dataset(self, state: SequenceRunState, dataset_idx: int, dataset: ImageDataset) -> None:
        update_freeze_masks(self.network)
        finalize_dataset(self.network, dataset_idx)
        frozen = sum(int(m.sum()) for m in state.freeze_masks)
        logger.info(f"[adaptcl] dataset {dataset_idx}: {frozen} weights frozen, "
                    f"remaining ratio {remaining_ratio(self.network):.4f}")
