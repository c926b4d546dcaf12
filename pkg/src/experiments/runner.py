"""Run orchestration and run-directory persistence.

A run directory holds:
  manifest.json      config snapshot, code version, timestamps, checksums
  history.csv        one row per (epoch, task)
  layer_usage.csv    used fraction of each maskable layer after each dataset
  firing.csv         per-weight activity frequency of the first maskable layer
  result_matrix.json R and b_bar
  metrics.json       ACC/BWT/FWT and used parameters
  checkpoints/       ACLK1 snapshot after each dataset
"""
import hashlib
import json
import logging
import subprocess
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import pandas as pd

from src import __version__
from src.core.errors import InputError
from src.data.datasets import TaskSequence, mnist_sequence, synthetic_sequence
from src.experiments.config import ExperimentConfig, config_to_ini
from src.metrics.evaluation import MetricsReport, ResultMatrix, dump_json, read_metrics, summarize, write_metrics
from src.models.checkpoint import save_checkpoint
from src.models.network import Network, build_network
from src.training.baselines import learner_for
from src.training.trainer import SequenceRunState, StepHook

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = [
    "dataset_idx", "epoch", "task_idx", "test_accuracy", "mixed_accuracy", "remaining_ratio", "train_loss", "method",
]
COMPARE_COLUMNS = ["method", "sequence", "seed", "acc", "bwt", "fwt", "used_params"]
MANIFEST = "manifest.json"
METRICS = "metrics.json"


@dataclass
class RunResult:
    out_dir: Path
    state: SequenceRunState
    result: ResultMatrix
    report: MetricsReport


def code_version() -> str:
    """git-describe string when run from a checkout, package version otherwise."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def build_sequence(config: ExperimentConfig) -> TaskSequence:
    if config.sequence.startswith("synthetic"):
        kwargs = {"n_tasks": config.tasks or 3, "n_per_class": config.samples_per_class or 60,
                  "size": config.image_size or 8, "shift": config.shift, "seed": config.seed}
        if config.noise is not None:
            kwargs["noise"] = config.noise
        tasks = synthetic_sequence(**kwargs)
    else:
        tasks = mnist_sequence(config.shift, seed=config.seed, shared_stats=bool(config.shared_stats),
                               limit=config.limit)
    return tasks.reversed() if config.order == "reverse" else tasks


def network_factory(config: ExperimentConfig, tasks: TaskSequence) -> Callable[[], Network]:
    kwargs = {"batchnorm": True} if config.batchnorm else None

    def make() -> Network:
        return build_network(config.model, tasks.input_shape, tasks.classes, config.seed, builder_kwargs=kwargs)

    return make


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, config: ExperimentConfig, started: str, finished: Optional[str] = None) -> None:
    files = {}
    if finished is not None:
        for path in sorted(p for p in out_dir.rglob("*") if p.is_file() and p.name != MANIFEST):
            files[str(path.relative_to(out_dir))] = sha256_file(path)
    manifest = {
        "config": config.model_dump(),
        "config_ini": config_to_ini(config),
        "code_version": code_version(),
        "started_at": started,
        "finished_at": finished,
        "files": files,
    }
    with open(out_dir / MANIFEST, "w") as out:
        dump_json(manifest, out)


def history_frame(state: SequenceRunState) -> pd.DataFrame:
    rows = [
        {
            "dataset_idx": rec.dataset_idx,
            "epoch": rec.epoch,
            "task_idx": j,
            "test_accuracy": acc,
            "mixed_accuracy": rec.mixed_accuracy,
            "remaining_ratio": rec.remaining_ratio,
            "train_loss": rec.train_loss,
            "method": rec.method,
        }
        for rec in state.history
        for j, acc in enumerate(rec.task_accuracies)
    ]
    return pd.DataFrame(rows, columns=HISTORY_COLUMNS)


def layer_usage_frame(state: SequenceRunState) -> pd.DataFrame:
    rows = [
        {"dataset_idx": d, "layer": layer, "used_fraction": frac}
        for d, usage in enumerate(state.layer_usage)
        for layer, frac in usage.items()
    ]
    return pd.DataFrame(rows, columns=["dataset_idx", "layer", "used_fraction"])


def firing_frame(state: SequenceRunState) -> pd.DataFrame:
    rows = [
        {"dataset_idx": d, "weight_idx": i, "frequency": float(f)}
        for d, freqs in enumerate(state.firing)
        for i, f in enumerate(freqs)
    ]
    return pd.DataFrame(rows, columns=["dataset_idx", "weight_idx", "frequency"])


def run_experiment(config: ExperimentConfig, step_hooks: Sequence[StepHook] = ()) -> RunResult:
    out_dir = Path(config.output_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    write_manifest(out_dir, config, started)

    tasks = build_sequence(config)
    learner = learner_for(config.method, network_factory(config, tasks), config.train_config(),
                          config.method_options())
    learner.step_hooks.extend(step_hooks)
    learner.dataset_hooks.append(
        lambda state, d: save_checkpoint(state.network, out_dir / "checkpoints" / f"dataset_{d}.aclk")
    )
    logger.info(f"Running {config.method} on {tasks.name} ({len(tasks)} tasks) -> {out_dir}")
    state, result = learner.run_sequence(tasks)

    history_frame(state).to_csv(out_dir / "history.csv", index=False)
    layer_usage_frame(state).to_csv(out_dir / "layer_usage.csv", index=False)
    firing_frame(state).to_csv(out_dir / "firing.csv", index=False)
    with open(out_dir / "result_matrix.json", "w") as out:
        dump_json(result.to_dict(), out)
    # pooled accuracy needs one network answering for every task
    mixed = None if result.diagonal_only else learner.evaluate_mixed(tasks)
    report = summarize(result, state.used_params[-1], config.method, tasks.name, config.seed,
                       config.fwt_exclude_last, mixed)
    write_metrics(report, out_dir / METRICS)
    write_manifest(out_dir, config, started, datetime.now(timezone.utc).isoformat())
    logger.info(f"Run finished: {json.dumps(report.rounded(), sort_keys=True)}")
    return RunResult(out_dir, state, result, report)


def compare_runs(run_dirs: Sequence[Union[str, Path]], out: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """One row per completed run, in the ACC/BWT/FWT/used-params table schema."""
    rows: List[dict] = []
    for run_dir in run_dirs:
        path = Path(run_dir) / METRICS
        if not path.exists():
            logger.warning(f"Skipping {run_dir}: no {METRICS}")
            continue
        rows.append(read_metrics(path).rounded())
    if not rows:
        raise InputError("no completed runs to compare")
    table = pd.DataFrame(rows, columns=COMPARE_COLUMNS)
    if out is not None:
        table.to_csv(out, index=False)
    return table


def load_manifest(run_dir: Union[str, Path]) -> dict:
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise InputError(f"{run_dir} is not a run directory (no {MANIFEST})")
    with open(path) as f:
        return json.load(f)
