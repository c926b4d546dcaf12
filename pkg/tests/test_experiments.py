import json
import re
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from src.core.errors import ConfigurationError, InputError
from src.experiments.charts import curves_svg, keep_ratio_svg, layer_usage_svg, plot_run
from src.experiments.config import ExperimentConfig, config_to_ini, load_config, parse_ini
from src.experiments.runner import (
    COMPARE_COLUMNS,
    HISTORY_COLUMNS,
    build_sequence,
    compare_runs,
    load_manifest,
    run_experiment,
    sha256_file,
)
from src.models.checkpoint import load_checkpoint
from src.models.network import build_toy_cnn

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def small_config(out_dir, **overrides) -> ExperimentConfig:
    values = dict(method="adaptcl", sequence="synthetic_strong", model="toy_cnn", output_dir=str(out_dir), tasks=2,
                  samples_per_class=3, image_size=4, epochs_per_dataset=2, batch_size=16, learning_rate=0.05)
    values.update(overrides)
    return ExperimentConfig(**values)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "adaptcl"
    return run_experiment(small_config(out))


# config ----------------------------------------------------------------------

def test_presets_all_load():
    presets = sorted(CONFIG_DIR.glob("*.ini"))
    assert presets
    for path in presets:
        config = load_config(path)
        assert config.output_dir.endswith(path.stem), path.name


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[experiment]\nmethod = sgd\nseed = 3\n")
    config = load_config(path, {"seed": 9, "method": None})
    assert config.method == "sgd" and config.seed == 9


def test_unknown_key_is_rejected_by_name(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[experiment]\nlearning_rat = 0.1\n")
    with pytest.raises(ValidationError) as info:
        load_config(path)
    assert "learning_rat" in str(info.value)


@pytest.mark.parametrize("overrides", [
    {"method": "sgd", "alpha": 0.1},
    {"method": "adaptcl", "ewc_lambda": 1.0},
    {"method": "ewc", "prune_fraction": 0.3},
    {"sequence": "mnist_strong", "tasks": 2},
    {"sequence": "synthetic_strong", "limit": 100},
    {"model": "lenet5"},
    {"model": "toy_mlp", "batchnorm": True},
    {"method": "packnet_star", "epochs_per_dataset": 5},
    {"method": "packnet_star", "prune_fraction": 1.5, "retrain_epochs": 1},
    {"momentum": 1.0},
    {"momentum": 1.5},
])
def test_invalid_combinations(overrides):
    with pytest.raises(ValidationError):
        ExperimentConfig(**overrides)


def test_parse_ini_errors():
    with pytest.raises(ConfigurationError):
        parse_ini("[other]\nmethod = sgd\n")
    with pytest.raises(ConfigurationError):
        parse_ini("[experiment]\nmethod = sgd\n[extra]\nx = 1\n")
    with pytest.raises(ConfigurationError):
        parse_ini("method = sgd")
    with pytest.raises(ConfigurationError):
        load_config("/nonexistent/config.ini")


def test_config_ini_round_trip(tmp_path):
    config = small_config(tmp_path / "r", method="ewc", ewc_lambda=0.3, ewc_samples=20)
    path = tmp_path / "c.ini"
    path.write_text(config_to_ini(config))
    assert load_config(path) == config


def test_train_config_and_method_options(tmp_path):
    adaptcl = small_config(tmp_path, alpha=0.01, pruning=False)
    train = adaptcl.train_config()
    assert train.alpha == 0.01 and not train.pruning and train.epochs_per_dataset == 2
    assert adaptcl.method_options() == {}
    packnet = small_config(tmp_path, method="packnet_star", prune_fraction=0.5, retrain_epochs=1)
    assert packnet.method_options() == {"prune_fraction": 0.5, "retrain_epochs": 1}
    assert packnet.train_config().alpha is None


def test_build_sequence_order(tmp_path):
    forward = build_sequence(small_config(tmp_path))
    backward = build_sequence(small_config(tmp_path, order="reverse"))
    assert [t.name for t in backward] == [t.name for t in reversed(forward.tasks)]
    assert forward.input_shape == (1, 4, 4)


# runner ----------------------------------------------------------------------

def test_run_directory_layout(finished_run):
    out = finished_run.out_dir
    for name in ("manifest.json", "history.csv", "layer_usage.csv", "firing.csv", "result_matrix.json",
                 "metrics.json", "checkpoints/dataset_0.aclk", "checkpoints/dataset_1.aclk"):
        assert (out / name).exists(), name


def test_metrics_json_schema(finished_run):
    metrics = json.loads((finished_run.out_dir / "metrics.json").read_text())
    assert set(metrics) == {"acc", "bwt", "fwt", "mixed_accuracy", "used_params", "method", "sequence", "seed"}
    assert metrics["method"] == "adaptcl" and metrics["sequence"] == "synthetic_strong" and metrics["seed"] == 5
    assert all(metrics[k] is not None for k in ("acc", "bwt", "fwt", "mixed_accuracy"))
    assert 0.0 <= metrics["mixed_accuracy"] <= 100.0
    assert metrics["acc"] == round(metrics["acc"], 2)


def test_manifest_checksums(finished_run):
    manifest = load_manifest(finished_run.out_dir)
    assert manifest["finished_at"] and manifest["code_version"]
    assert manifest["config"]["epochs_per_dataset"] == 2
    assert "manifest.json" not in manifest["files"]
    for name, digest in manifest["files"].items():
        assert sha256_file(finished_run.out_dir / name) == digest, name


def test_history_csv(finished_run):
    history = pd.read_csv(finished_run.out_dir / "history.csv")
    assert list(history.columns) == HISTORY_COLUMNS
    # 2 datasets x 2 epochs x 2 tasks
    assert len(history) == 8
    assert history["remaining_ratio"].between(0, 1).all()
    assert sorted(history["epoch"].unique()) == [1, 2, 3, 4]
    assert history["mixed_accuracy"].between(0, 100).all()
    assert (history.groupby("epoch")["mixed_accuracy"].nunique() == 1).all(), "Should log one pooled score per epoch"
    first = history[(history["dataset_idx"] == 0) & (history["task_idx"] == 0)]
    assert np.allclose(first["mixed_accuracy"], first["test_accuracy"]), "Should pool only the first task at first"


def test_checkpoint_restores_final_network(finished_run):
    out = finished_run.out_dir
    net = build_toy_cnn((1, 4, 4), 10, seed=99)
    load_checkpoint(net, out / "checkpoints" / "dataset_1.aclk")
    for name, value in finished_run.state.network.state_dict().items():
        assert np.array_equal(net.state_dict()[name], value), name


def test_same_config_same_metrics_bytes(tmp_path):
    first = run_experiment(small_config(tmp_path / "a", method="sgd"))
    second = run_experiment(small_config(tmp_path / "b", method="sgd"))
    assert (first.out_dir / "metrics.json").read_bytes() == (second.out_dir / "metrics.json").read_bytes()


def test_sml_run_reports_accuracy_only(tmp_path):
    result = run_experiment(small_config(tmp_path / "sml", method="sml"))
    metrics = json.loads((result.out_dir / "metrics.json").read_text())
    assert metrics["bwt"] is None and metrics["fwt"] is None
    assert metrics["mixed_accuracy"] is None
    assert metrics["used_params"] == 2 * build_toy_cnn((1, 4, 4), 10).count_params()


def test_compare_runs(finished_run, tmp_path):
    other = run_experiment(small_config(tmp_path / "pk", method="packnet_star", retrain_epochs=1))
    out = tmp_path / "table.csv"
    table = compare_runs([finished_run.out_dir, other.out_dir, tmp_path / "missing"], out)
    assert list(table.columns) == COMPARE_COLUMNS
    assert table["method"].tolist() == ["adaptcl", "packnet_star"]
    assert out.read_text().splitlines()[0] == ",".join(COMPARE_COLUMNS)
    assert len(out.read_text().splitlines()) == 3


def test_compare_with_nothing_completed(tmp_path):
    with pytest.raises(InputError):
        compare_runs([tmp_path])


# charts ----------------------------------------------------------------------

def test_curves_chart_structure(finished_run, tmp_path):
    svg = plot_run(finished_run.out_dir, "curves", tmp_path / "curves.svg").read_text()
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert len(re.findall(r'class="task-curve"', svg)) == 2
    assert re.findall(r'class="boundary" data-epoch="(\d+)"', svg) == ["2", "4"]


def test_keep_ratio_values_in_unit_interval(finished_run, tmp_path):
    svg = plot_run(finished_run.out_dir, "keep_ratio", tmp_path / "keep.svg").read_text()
    values = [float(v) for v in re.findall(r'data-value="([0-9.]+)"', svg)]
    assert len(values) == 4 and all(0.0 <= v <= 1.0 for v in values)


def test_layer_usage_and_firing_charts(finished_run, tmp_path):
    usage = plot_run(finished_run.out_dir, "layer_usage", tmp_path / "usage.svg").read_text()
    layers = pd.read_csv(finished_run.out_dir / "layer_usage.csv")
    assert usage.count('class="bar"') == len(layers)
    firing = plot_run(finished_run.out_dir, "firing", tmp_path / "firing.svg").read_text()
    assert firing.count('class="cell"') == len(pd.read_csv(finished_run.out_dir / "firing.csv"))


def test_chart_errors(finished_run, tmp_path):
    with pytest.raises(ConfigurationError):
        plot_run(finished_run.out_dir, "pie", tmp_path / "x.svg")
    with pytest.raises(InputError):
        plot_run(tmp_path, "curves", tmp_path / "x.svg")
    with pytest.raises(InputError):
        curves_svg(pd.DataFrame(columns=HISTORY_COLUMNS), 2)
    with pytest.raises(InputError):
        keep_ratio_svg(pd.DataFrame(columns=HISTORY_COLUMNS))
    with pytest.raises(InputError):
        layer_usage_svg(pd.DataFrame(columns=["dataset_idx", "layer", "used_fraction"]))
