import json
from unittest.mock import MagicMock

import numpy as np
import pytest

from src.core.errors import InputError, StateError
from src.core.rng import SeededStreams
from src.data.datasets import ImageDataset
from src.experiments.verify import naive_metrics
from src.metrics.evaluation import (
    MetricsReport,
    ResultMatrix,
    accuracy,
    compute_acc,
    compute_bwt,
    compute_fwt,
    dump_json,
    read_metrics,
    summarize,
    write_metrics,
)

WORKED_R = np.array([[90.0, 10.0, 5.0], [50.0, 91.0, 12.0], [87.0, 89.0, 92.0]])
WORKED_B = np.array([0.0, 10.0, 10.0])


def constant_predictor(logits_row):
    net = MagicMock()
    net.predict.side_effect = lambda images, batch_size=512: np.tile(logits_row, (len(images), 1))
    return net


def test_acc_examples():
    assert compute_acc(WORKED_R) == pytest.approx(89.3333333333)
    assert compute_acc([[42.0]]) == 42.0
    assert compute_acc(np.full((4, 4), 55.5)) == 55.5


def test_bwt_examples():
    assert compute_bwt(WORKED_R) == pytest.approx(-2.5)
    no_forgetting = WORKED_R.copy()
    no_forgetting[2, :2] = np.diag(WORKED_R)[:2]
    assert compute_bwt(no_forgetting) == 0.0
    improved = WORKED_R.copy()
    improved[2, 0] = 95.0
    assert compute_bwt(improved) > 0
    assert compute_bwt([[70.0]]) is None


def test_bwt_invariant_to_shift():
    shifted = WORKED_R.copy()
    shifted[np.diag_indices(3)] += 3.0
    shifted[2, :2] += 3.0
    assert compute_bwt(shifted) == pytest.approx(compute_bwt(WORKED_R))


def test_fwt_examples():
    assert compute_fwt(WORKED_R, WORKED_B) == pytest.approx(1.0)
    # the printed indexing drops the last task but keeps the divisor
    assert compute_fwt(WORKED_R, WORKED_B, exclude_last=True) == pytest.approx(0.0)
    matched = np.array([0.0, WORKED_R[0, 1], WORKED_R[1, 2]])
    assert compute_fwt(WORKED_R, matched) == 0.0
    raised = WORKED_R.copy()
    raised[0, 1] += 4.0
    assert compute_fwt(raised, WORKED_B) > compute_fwt(WORKED_R, WORKED_B)
    assert compute_fwt([[1.0]], [1.0]) is None


def test_metrics_agree_with_brute_force():
    rng = SeededStreams(5).stream("test-metrics")
    for _ in range(200):
        T = int(rng.integers(2, 7))
        R = rng.uniform(0, 100, size=(T, T))
        b = rng.uniform(0, 100, size=T)
        acc, bwt, fwt = naive_metrics(R.tolist(), b.tolist())
        assert abs(compute_acc(R) - acc) <= 1e-9
        assert abs(compute_bwt(R) - bwt) <= 1e-9
        assert abs(compute_fwt(R, b) - fwt) <= 1e-9


def test_incomplete_last_row_is_state_error():
    result = ResultMatrix(2)
    result.set_row(0, [50.0, 10.0])
    with pytest.raises(StateError):
        compute_acc(result.R)


def test_result_matrix_row_order_and_range():
    result = ResultMatrix(3)
    assert np.isnan(result.R).all()
    with pytest.raises(StateError):
        result.set_row(1, [1.0, 2.0, 3.0])
    with pytest.raises(InputError):
        result.set_row(0, [1.0, 101.0, 3.0])
    with pytest.raises(InputError):
        result.set_row(0, [1.0, 2.0])
    result.set_row(0, [1.0, 2.0, 3.0])
    assert result.rows_filled == 1
    with pytest.raises(InputError):
        result.set_baseline([-1.0, 0.0, 0.0])
    with pytest.raises(InputError):
        ResultMatrix(0)


def test_result_matrix_to_dict_uses_null_for_missing():
    result = ResultMatrix(2)
    result.set_row(0, [80.0, 20.0])
    data = result.to_dict()
    assert data["R"] == [[80.0, 20.0], [None, None]]
    assert data["b_bar"] == [None, None]
    json.dumps(data)


def test_summarize_and_rounding():
    result = ResultMatrix.from_rows(WORKED_R.tolist(), WORKED_B.tolist())
    report = summarize(result, used_params=1234, method="adaptcl", sequence="synthetic_strong", seed=5)
    assert report.rounded() == {"acc": 89.33, "bwt": -2.5, "fwt": 1.0, "used_params": 1234,
                                "method": "adaptcl", "sequence": "synthetic_strong", "seed": 5,
                                "mixed_accuracy": None}


def test_summarize_single_task_has_no_transfer_metrics():
    report = summarize(ResultMatrix.from_rows([[77.0]], [9.0]), 10, "adaptcl", "single", 5)
    assert report.acc == 77.0 and report.bwt is None and report.fwt is None


def test_summarize_diagonal_only():
    result = ResultMatrix(2, diagonal_only=True)
    result.set_entry(0, 0, 90.0)
    with pytest.raises(StateError):
        summarize(result, 10, "sml", "s", 5)
    result.set_entry(1, 1, 80.0)
    report = summarize(result, 10, "sml", "s", 5)
    assert report.acc == 85.0 and report.bwt is None and report.fwt is None


def test_metrics_json_round_trip(tmp_path):
    report = MetricsReport(acc=89.33333, bwt=-2.5, fwt=None, used_params=7, method="sgd", sequence="x", seed=5)
    path = tmp_path / "metrics.json"
    write_metrics(report, path)
    text = path.read_text()
    assert text.endswith("\n") and '"acc": 89.33' in text
    assert read_metrics(path).acc == 89.33


def test_dump_json_compact(tmp_path):
    path = tmp_path / "out.json"
    with open(path, "w") as out:
        dump_json({"b": 1, "a": [1, 2]}, out, pretty=False)
    assert path.read_text() == '{"a":[1,2],"b":1}'


def test_accuracy_all_correct_and_ties():
    labels = np.array([0, 0, 0])
    ds = ImageDataset(np.zeros((3, 1, 2, 2), np.float32), labels, "toy", "test", 3)
    # equal logits resolve to class 0
    assert accuracy(constant_predictor(np.zeros(3)), ds) == 100.0
    assert accuracy(constant_predictor(np.array([0.0, 1.0, 0.0])), ds) == 0.0


def test_accuracy_constant_predictor_near_chance():
    rng = SeededStreams(5).stream("test-accuracy")
    labels = rng.integers(0, 10, size=1000)
    ds = ImageDataset(np.zeros((1000, 1, 2, 2), np.float32), labels, "toy", "test", 10)
    net = constant_predictor(np.eye(10)[3])
    score = accuracy(net, ds)
    assert 7.0 <= score <= 13.0
    assert accuracy(net, ds) == score


def test_accuracy_empty_dataset():
    ds = ImageDataset(np.zeros((0, 1, 2, 2), np.float32), np.zeros(0, np.int64), "empty", "test")
    with pytest.raises(InputError):
        accuracy(constant_predictor(np.zeros(10)), ds)


def test_summarize_carries_mixed_accuracy():
    result = ResultMatrix.from_rows(WORKED_R.tolist(), WORKED_B.tolist())
    report = summarize(result, 10, "adaptcl", "s", 5, mixed_accuracy=71.23456)
    assert report.rounded()["mixed_accuracy"] == 71.23, "Should round the pooled accuracy like acc"
