import json
from unittest.mock import patch

import pytest

from src.cli.main import EXIT_CONFIG, EXIT_FAILED, EXIT_NUMERIC, EXIT_OK, main
from src.core.errors import CapacityError, NumericError
from src.experiments.config import ExperimentConfig, config_to_ini


def write_config(tmp_path, name="run", **overrides):
    values = dict(method="adaptcl", sequence="synthetic_strong", model="toy_cnn",
                  output_dir=str(tmp_path / name), tasks=2, samples_per_class=3, image_size=4,
                  epochs_per_dataset=2, batch_size=16, learning_rate=0.05)
    values.update(overrides)
    path = tmp_path / f"{name}.ini"
    path.write_text(config_to_ini(ExperimentConfig(**values)))
    return path


def json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


def test_run_writes_metrics(tmp_path):
    path = write_config(tmp_path)
    assert main(["--log-level", "WARNING", "run", "-c", str(path)]) == EXIT_OK
    metrics = json.loads((tmp_path / "run" / "metrics.json").read_text())
    assert metrics["acc"] is not None and metrics["bwt"] is not None and metrics["fwt"] is not None


def test_run_method_and_seed_overrides(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", "-c", str(path), "--method", "sgd", "--seed", "7"]) == EXIT_OK
    metrics = json.loads((tmp_path / "run" / "metrics.json").read_text())
    assert metrics["method"] == "sgd" and metrics["seed"] == 7


def test_run_unknown_key_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[experiment]\nmethod = adaptcl\nlearning_rat = 0.1\n")
    assert main(["run", "-c", str(path)]) == EXIT_CONFIG
    assert "learning_rat" in capsys.readouterr().err


def test_run_method_specific_key_mismatch_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[experiment]\nmethod = sgd\nalpha = 0.01\n")
    assert main(["run", "-c", str(path)]) == EXIT_CONFIG
    assert "alpha" in capsys.readouterr().err


def test_run_missing_config_exits_2(tmp_path):
    assert main(["run", "-c", str(tmp_path / "absent.ini")]) == EXIT_CONFIG


def test_run_momentum_of_one_exits_2_before_creating_output(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    out_dir = tmp_path / "never"
    path.write_text(f"[experiment]\nmethod = adaptcl\nmomentum = 1.0\noutput_dir = {out_dir}\n")
    assert main(["run", "-c", str(path)]) == EXIT_CONFIG
    assert "momentum" in capsys.readouterr().err
    assert not out_dir.exists(), "Should reject the config before touching the run directory"


@pytest.mark.parametrize("error", [NumericError("non-finite loss", 0, 1, 2), CapacityError("no free weights")])
def test_run_abort_exits_3(tmp_path, error):
    path = write_config(tmp_path)
    with patch("src.cli.main.run_experiment", side_effect=error):
        assert main(["run", "-c", str(path)]) == EXIT_NUMERIC


def test_compare_and_plot(tmp_path):
    first = write_config(tmp_path, "a")
    second = write_config(tmp_path, "b", method="sgd")
    assert main(["run", "-c", str(first)]) == EXIT_OK
    assert main(["run", "-c", str(second)]) == EXIT_OK
    table = tmp_path / "table.csv"
    assert main(["compare", "--runs", str(tmp_path / "a"), str(tmp_path / "b"), "-o", str(table)]) == EXIT_OK
    assert table.read_text().splitlines()[0] == "method,sequence,seed,acc,bwt,fwt,used_params"
    assert len(table.read_text().splitlines()) == 3

    svg = tmp_path / "curves.svg"
    assert main(["plot", "--run", str(tmp_path / "a"), "--what", "curves", "-o", str(svg)]) == EXIT_OK
    assert svg.read_text().count('class="task-curve"') == 2


def test_compare_without_completed_runs_exits_1(tmp_path):
    assert main(["compare", "--runs", str(tmp_path), "-o", str(tmp_path / "t.csv")]) == EXIT_FAILED


def test_plot_unknown_chart_exits_2(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["plot", "--run", str(tmp_path), "--what", "pie", "-o", str(tmp_path / "x.svg")])
    assert info.value.code == 2


def test_verify_selected_criteria(capsys):
    assert main(["verify", "--only", "4,6,7"]) == EXIT_OK
    records = json_lines(capsys.readouterr().out)
    assert [r["criterion"] for r in records] == [4, 6, 7]
    assert all(r["passed"] for r in records)
    assert all(set(r) >= {"criterion", "name", "passed", "detail", "seconds"} for r in records)


def test_verify_reports_failures(capsys):
    failing = {"passed": False, "detail": {}}
    with patch("src.experiments.verify.AcceptanceSuite.check_unit_values", return_value=failing):
        assert main(["verify", "--only", "4"]) == EXIT_FAILED
    captured = capsys.readouterr()
    assert "step_and_estimator_values" in captured.err
    assert json_lines(captured.out)[0]["passed"] is False


@pytest.mark.slow
def test_verify_fault_injection_breaks_freeze_exactness(capsys):
    assert main(["verify", "--only", "1", "--inject-fault"]) == EXIT_FAILED
    record = json_lines(capsys.readouterr().out)[0]
    assert record["name"] == "freeze_exactness" and not record["passed"]
