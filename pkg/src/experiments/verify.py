"""Acceptance suite: exact properties plus desk-scale sequence experiments.

Each check returns a dict with `criterion`, `name`, `passed` and `detail`;
`AcceptanceSuite.run` prints them as JSON lines.
"""
import json
import logging
import sys
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.rng import DEFAULT_SEED, SeededStreams
from src.core.tensor import softmax_cross_entropy
from src.data.datasets import ImageDataset, Task, TaskSequence, identical_sequence, mnist_available, \
    mnist_sequence, synthetic_sequence
from src.metrics.evaluation import compute_acc, compute_bwt, compute_fwt
from src.models.layers import LayerKind, LayerSpec
from src.models.network import Network, build_from_specs, build_lenet5, build_toy_cnn, build_toy_mlp
from src.pruning.dynamic import compute_prune_mask, estimator_h, remaining_ratio, sparse_reg, step
from src.training.baselines import (
    EWCLearner,
    NaiveSGDLearner,
    PackNetStarLearner,
    packnet_frozen_counts,
)
from src.training.trainer import AdaptCLTrainer, SequenceRunState, TrainConfig

logger = logging.getLogger(__name__)

LENET5_PARAMS = 61706
TOY_TRAIN = {"learning_rate": 0.02, "momentum": 0.9, "nesterov": True, "epochs_per_dataset": 6, "batch_size": 32}
ALPHA_SWEEP = (1e-5, 1e-4, 1e-3)


def toy_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**TOY_TRAIN, **overrides})


def toy_sequence(shift: str = "strong", n_tasks: int = 3, seed: int = DEFAULT_SEED) -> TaskSequence:
    return synthetic_sequence(n_tasks=n_tasks, n_per_class=60, shift=shift, seed=seed)


def toy_network(tasks: TaskSequence, seed: int = DEFAULT_SEED) -> Network:
    return build_toy_cnn(tasks.input_shape, tasks.classes, seed)


def ordering_network(tasks: TaskSequence, seed: int = DEFAULT_SEED) -> Network:
    """Tanh MLP used by the forgetting comparisons."""
    return build_toy_mlp(tasks.input_shape, tasks.classes, seed, hidden=64, activation="tanh")


def alpha_sweep(tasks: TaskSequence, alphas: Sequence[float], seed: int = DEFAULT_SEED,
                network_fn: Callable[[TaskSequence, int], Network] = toy_network) -> Dict[float, List[float]]:
    """Remaining-ratio curve (one point per epoch) of an AdaptCL run per alpha."""
    curves = {}
    for alpha in alphas:
        trainer = AdaptCLTrainer(network_fn(tasks, seed), toy_config(seed=seed, alpha=alpha))
        state, _ = trainer.run_sequence(tasks)
        curves[alpha] = [record.remaining_ratio for record in state.history]
        logger.info(f"alpha={alpha:g}: mean remaining ratio {np.mean(curves[alpha]):.4f}")
    return curves


def frozen_snapshot(network: Network) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [(layer.freeze_mask.copy(), layer.weight[layer.freeze_mask].copy()) for layer in network.masked_layers()]


def frozen_unchanged(network: Network, snapshot: List[Tuple[np.ndarray, np.ndarray]]) -> bool:
    for layer, (mask, values) in zip(network.masked_layers(), snapshot):
        if not np.array_equal(layer.weight[mask].view(np.uint8), values.view(np.uint8)):
            return False
    return True


def mask_is_current(network: Network) -> bool:
    for layer in network.masked_layers():
        expected = compute_prune_mask(layer.weight, layer.threshold) | layer.freeze_mask
        if not np.array_equal(layer.prune_mask, expected) or not layer.prune_mask[layer.freeze_mask].all():
            return False
    return True


def mask_free_matches(network: Network, inputs: np.ndarray) -> bool:
    masked = network.predict(inputs)
    dense = network.clone()
    dense.set_pruning(False)
    return np.array_equal(masked, dense.predict(inputs))


def corrupt_frozen_weight(network: Network) -> None:
    for layer in network.masked_layers():
        idx = np.flatnonzero(layer.freeze_mask)
        if idx.size:
            layer.weight.reshape(-1)[idx[0]] += layer.weight.dtype.type(1e-3)
            return


def surrogate_loss(network: Network, images: np.ndarray, labels: np.ndarray, alpha: float) -> float:
    loss, _ = softmax_cross_entropy(network.forward(images, "eval"), labels)
    return loss + alpha * sparse_reg(network.thresholds())[0]


def gradient_check(network: Network, images: np.ndarray, labels: np.ndarray, alpha: float, coords: int = 30,
                   eps: float = 1e-6, seed: int = DEFAULT_SEED) -> float:
    """Largest relative error between analytic and central-difference gradients of the surrogate loss.

    The network should be float64 with pruning in `surrogate` mask mode.
    """
    logits = network.forward(images, "train")
    _, grad_logits = softmax_cross_entropy(logits, labels)
    grads = network.backward(grad_logits)
    _, reg_grads = sparse_reg(network.thresholds())
    for layer, g in zip(network.masked_layers(), reg_grads):
        grads[f"{layer.name}.threshold"] = grads[f"{layer.name}.threshold"] + alpha * g
    params = network.named_parameters()
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    rng = SeededStreams(seed).stream("gradient-check")
    picks = rng.choice(int(sizes.sum()), size=coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, i = names[k], int(flat - offsets[k])
        view = params[name].reshape(-1)
        original = view[i]
        view[i] = original + eps
        up = surrogate_loss(network, images, labels, alpha)
        view[i] = original - eps
        down = surrogate_loss(network, images, labels, alpha)
        view[i] = original
        numeric = (up - down) / (2 * eps)
        analytic = float(grads[name].reshape(-1)[i])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
        worst = max(worst, err)
    return worst


def naive_metrics(R: np.ndarray, b_bar: np.ndarray) -> Tuple[float, float, float]:
    T = len(R)
    acc = sum(R[T - 1][i] for i in range(T)) / T
    bwt = sum(R[T - 1][i] - R[i][i] for i in range(T - 1)) / (T - 1)
    fwt = sum(R[i - 1][i] - b_bar[i] for i in range(1, T)) / (T - 1)
    return acc, bwt, fwt


class AcceptanceSuite:
    def __init__(self, seed: int = DEFAULT_SEED, inject_fault: bool = False):
        self.seed = seed
        self.inject_fault = inject_fault
        self.streams = SeededStreams(seed)

    # exact properties ----------------------------------------------------
    def check_freeze_exactness(self) -> dict:
        tasks = toy_sequence("strong", 3, self.seed)
        trainer = AdaptCLTrainer(toy_network(tasks, self.seed), toy_config(seed=self.seed))
        snapshots: List[Tuple[int, list]] = []
        trainer.dataset_hooks.append(lambda state, d: snapshots.append((d, frozen_snapshot(state.network))))
        if self.inject_fault:
            def fault(state: SequenceRunState, d: int, epoch: int, step_idx: int) -> None:
                if d == 2 and step_idx == 0 and epoch == state.config.epochs_per_dataset * 2 + 1:
                    corrupt_frozen_weight(state.network)
            trainer.step_hooks.append(fault)
        trainer.run_sequence(tasks)
        intact = [frozen_unchanged(trainer.network, snap) for _, snap in snapshots[:-1]]
        frozen = [int(sum(mask.sum() for mask, _ in snap)) for _, snap in snapshots]
        return {"passed": all(intact), "detail": {"frozen_per_dataset": frozen, "intact": intact}}

    def check_mask_free_identity(self) -> dict:
        tasks = toy_sequence("strong", 3, self.seed)
        trainer = AdaptCLTrainer(toy_network(tasks, self.seed), toy_config(seed=self.seed))
        inputs = self.streams.stream("mask-free-inputs").normal(size=(100,) + tasks.input_shape).astype(np.float32)
        results: List[bool] = []
        trainer.dataset_hooks.append(lambda state, d: results.append(mask_free_matches(state.network, inputs)))
        trainer.run_sequence(tasks)
        return {"passed": all(results) and len(results) == 3, "detail": {"per_dataset": results}}

    def check_mask_correctness(self) -> dict:
        tasks = toy_sequence("strong", 2, self.seed)
        trainer = AdaptCLTrainer(toy_network(tasks, self.seed), toy_config(seed=self.seed))
        checks: List[bool] = []

        def check_step(state: SequenceRunState, d: int, epoch: int, step_idx: int) -> None:
            if len(checks) < 100:
                checks.append(mask_is_current(state.network))

        trainer.step_hooks.append(check_step)
        trainer.run_sequence(tasks)
        return {"passed": len(checks) == 100 and all(checks), "detail": {"checked_steps": len(checks),
                                                                          "failures": checks.count(False)}}

    def check_unit_values(self) -> dict:
        got = {"S(-0.2)": step(-0.2), "S(0)": step(0), "H(0)": estimator_h(0), "H(-0.1)": estimator_h(-0.1),
               "H(0.5)": estimator_h(0.5), "H(2)": estimator_h(2)}
        want = {"S(-0.2)": 0, "S(0)": 1, "H(0)": 2.0, "H(-0.1)": 1.6, "H(0.5)": 0.4, "H(2)": 0.0}
        return {"passed": got == want, "detail": got}

    def check_gradients(self) -> dict:
        rng = self.streams.stream("gradient-data")
        net = build_toy_mlp((1, 4, 4), 3, self.seed, hidden=8, dtype=np.float64)
        net.set_pruning(True, "surrogate")
        for layer in net.masked_layers():
            layer.threshold[...] = rng.uniform(0.0, 0.5, size=layer.threshold.shape)
            layer.freeze_mask = rng.random(layer.weight.shape) < 0.2
        images = rng.normal(size=(6, 1, 4, 4))
        labels = rng.integers(0, 3, size=6)
        worst = gradient_check(net, images, labels, alpha=0.05, coords=30, seed=self.seed)
        params = sum(p.size for p in net.named_parameters().values())
        return {"passed": worst <= 1e-3 and params <= 500, "detail": {"max_rel_error": worst, "params": params}}

    def check_metrics_oracle(self) -> dict:
        rng = self.streams.stream("metrics-oracle")
        worst = 0.0
        for _ in range(1000):
            T = int(rng.integers(2, 7))
            R = rng.uniform(0, 100, size=(T, T))
            b = rng.uniform(0, 100, size=T)
            ref = naive_metrics(R.tolist(), b.tolist())
            got = (compute_acc(R), compute_bwt(R), compute_fwt(R, b))
            worst = max(worst, max(abs(g - r) for g, r in zip(got, ref)))
        R = np.array([[90, 0, 0], [0, 91, 0], [87, 89, 92]], dtype=float)
        example = (round(compute_acc(R), 2), compute_bwt(R))
        return {"passed": worst <= 1e-9 and example == (89.33, -2.5),
                "detail": {"max_abs_error": worst, "worked_example": example}}

    def check_lenet5_count(self) -> dict:
        count = build_lenet5().count_params()
        return {"passed": count == LENET5_PARAMS, "detail": {"params": count}}

    def check_sparsity_emerges(self) -> dict:
        tasks = TaskSequence("synthetic_single", [toy_sequence("strong", 1, self.seed).tasks[0]])
        sparse = AdaptCLTrainer(toy_network(tasks, self.seed), toy_config(seed=self.seed))
        _, r_sparse = sparse.run_sequence(tasks)
        ratio = remaining_ratio(sparse.network)
        dense = AdaptCLTrainer(toy_network(tasks, self.seed), toy_config(seed=self.seed, pruning=False))
        _, r_dense = dense.run_sequence(tasks)
        gap = float(r_dense.R[0, 0] - r_sparse.R[0, 0])
        return {"passed": ratio <= 0.9 and gap <= 2.0,
                "detail": {"remaining_ratio": ratio, "sparse_acc": r_sparse.R[0, 0], "dense_acc": r_dense.R[0, 0]}}

    def check_alpha_pressure(self) -> dict:
        tasks = TaskSequence("synthetic_single", [toy_sequence("strong", 1, self.seed).tasks[0]])
        curves = alpha_sweep(tasks, ALPHA_SWEEP, self.seed)
        means = [float(np.mean(curves[alpha])) for alpha in ALPHA_SWEEP]
        passed = all(a >= b for a, b in zip(means, means[1:]))
        return {"passed": passed, "detail": {"alphas": list(ALPHA_SWEEP), "mean_remaining_ratio": means,
                                             "curves": {f"{alpha:g}": curves[alpha] for alpha in ALPHA_SWEEP}}}

    def check_ewc_reduction(self) -> dict:
        tasks = toy_sequence("strong", 2, self.seed)
        sgd = NaiveSGDLearner(toy_network(tasks, self.seed), toy_config(seed=self.seed))
        _, r_sgd = sgd.run_sequence(tasks)
        ewc = EWCLearner(toy_network(tasks, self.seed), toy_config(seed=self.seed), ewc_lambda=0.0, ewc_samples=50)
        _, r_ewc = ewc.run_sequence(tasks)
        same_weights = all(np.array_equal(a, b) for a, b in zip(sgd.network.named_parameters().values(),
                                                                   ewc.network.named_parameters().values()))
        return {"passed": same_weights and np.array_equal(r_sgd.R, r_ewc.R), "detail": {"weights_equal": same_weights}}

    def check_packnet_bookkeeping(self) -> dict:
        rng = self.streams.stream("packnet-data")
        specs = [LayerSpec(LayerKind.FLATTEN), LayerSpec(LayerKind.DENSE, (9, 11))]
        net = build_from_specs(specs, (1, 3, 3), 11, SeededStreams(self.seed))
        images = rng.normal(size=(44, 1, 3, 3)).astype(np.float32)
        labels = np.arange(44) % 11
        data = ImageDataset(images, labels, "packnet_toy", "train", 11)
        tasks = TaskSequence("packnet_toy", [Task("packnet_toy", data, data)])
        learner = PackNetStarLearner(net, toy_config(seed=self.seed, epochs_per_dataset=2), 1.0 / 3.0, 1)
        learner.run_sequence(tasks)
        layer = net.masked_layers()[0]
        frozen = int(layer.freeze_mask.sum())
        expected = packnet_frozen_counts(99, 1.0 / 3.0, 1)[0]
        return {"passed": frozen == 66 == expected and layer.weight.size - frozen == 33,
                "detail": {"frozen": frozen, "free": layer.weight.size - frozen}}

    # empirical sequences -------------------------------------------------
    def _bwt_acc(self, learner_cls, tasks: TaskSequence,
                 network_fn: Callable[[TaskSequence, int], Network] = toy_network, **kwargs) -> Tuple[float, float]:
        learner = learner_cls(network_fn(tasks, self.seed), toy_config(seed=self.seed), **kwargs)
        _, result = learner.run_sequence(tasks)
        return compute_bwt(result.R), compute_acc(result.R)

    def check_strong_shift_ordering(self) -> dict:
        tasks = toy_sequence("strong", 3, self.seed)
        bwt_a, acc_a = self._bwt_acc(AdaptCLTrainer, tasks, ordering_network)
        bwt_p, _ = self._bwt_acc(PackNetStarLearner, tasks, ordering_network, retrain_epochs=2)
        bwt_s, acc_s = self._bwt_acc(NaiveSGDLearner, tasks, ordering_network)
        passed = bwt_a >= bwt_p >= bwt_s and bwt_a >= bwt_s + 10 and acc_a > acc_s
        return {"passed": passed, "detail": {"bwt": {"adaptcl": bwt_a, "packnet_star": bwt_p, "sgd": bwt_s},
                                             "acc": {"adaptcl": acc_a, "sgd": acc_s}}}

    def check_identical_tasks(self) -> dict:
        tasks = identical_sequence(2, n_per_class=60, seed=self.seed)
        bwt, _ = self._bwt_acc(AdaptCLTrainer, tasks)
        return {"passed": bwt >= -1.0, "detail": {"bwt": bwt}}

    def check_mnist_ordering(self) -> dict:
        tasks = mnist_sequence("strong", seed=self.seed)
        bwts = {}
        for name, cls, kwargs in (("adaptcl", AdaptCLTrainer, {}), ("packnet_star", PackNetStarLearner, {}),
                                  ("sgd", NaiveSGDLearner, {})):
            config = TrainConfig(learning_rate=0.001, epochs_per_dataset=20, batch_size=64, seed=self.seed)
            learner = cls(build_lenet5(tasks.input_shape, tasks.classes, self.seed), config, **kwargs)
            _, result = learner.run_sequence(tasks)
            bwts[name] = compute_bwt(result.R)
        return {"passed": bwts["adaptcl"] > bwts["packnet_star"] > bwts["sgd"], "detail": {"bwt": bwts}}

    # driver --------------------------------------------------------------
    def criteria(self, suite: str) -> List[Tuple[int, str, Callable[[], dict]]]:
        checks = [
            (1, "freeze_exactness", self.check_freeze_exactness),
            (2, "mask_free_inference", self.check_mask_free_identity),
            (3, "mask_correctness", self.check_mask_correctness),
            (4, "step_and_estimator_values", self.check_unit_values),
            (5, "gradient_correctness", self.check_gradients),
            (6, "metrics_oracle", self.check_metrics_oracle),
            (7, "lenet5_parameter_count", self.check_lenet5_count),
            (8, "sparsity_emerges", self.check_sparsity_emerges),
            (9, "ewc_zero_lambda_is_sgd", self.check_ewc_reduction),
            (10, "packnet_bookkeeping", self.check_packnet_bookkeeping),
            (11, "strong_shift_bwt_ordering", self.check_strong_shift_ordering),
            (12, "identical_tasks_bwt", self.check_identical_tasks),
            (13, "alpha_pressure", self.check_alpha_pressure),
        ]
        if suite == "full":
            if mnist_available():
                checks.append((14, "mnist_bwt_ordering", self.check_mnist_ordering))
            else:
                logger.warning("MNIST archives not found; skipping the full-scale ordering check.")
        return checks

    def run(self, suite: str = "quick", only: Optional[List[int]] = None, out=None) -> List[dict]:
        out = out or sys.stdout
        results = []
        for criterion, name, check in self.criteria(suite):
            if only and criterion not in only:
                continue
            started = time.perf_counter()
            try:
                outcome = check()
            except Exception as e:
                logger.error(f"Criterion {criterion} ({name}) raised: {e}")
                outcome = {"passed": False, "detail": {"error": f"{type(e).__name__}: {e}"}}
            record: Dict[str, object] = {"criterion": criterion, "name": name,
                                         "seconds": round(time.perf_counter() - started, 2), **outcome}
            record["passed"] = bool(record["passed"])
            print(json.dumps(record, sort_keys=True, default=float), file=out, flush=True)
            results.append(record)
        return results
