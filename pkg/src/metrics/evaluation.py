"""Accuracy matrix R, random-init baseline b_bar and the ACC/BWT/FWT summaries.

R[i, j] is the test accuracy (percent) on task j after finishing task i.
Unpopulated entries hold NaN.
"""
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from src.core.errors import InputError, StateError
from src.core.tensor import METRIC_DTYPE

REPORT_DECIMALS = 2


class ResultMatrix:
    def __init__(self, tasks: int, diagonal_only: bool = False):
        if tasks <= 0:
            raise InputError("a result matrix needs at least one task")
        self.R = np.full((tasks, tasks), np.nan, dtype=METRIC_DTYPE)
        self.b_bar = np.full(tasks, np.nan, dtype=METRIC_DTYPE)
        self.diagonal_only = diagonal_only
        self._rows = 0

    @property
    def T(self) -> int:
        return self.R.shape[0]

    @property
    def rows_filled(self) -> int:
        return self._rows

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], b_bar: Optional[Sequence[float]] = None) -> "ResultMatrix":
        result = cls(len(rows))
        for row in rows:
            result.set_row(result.rows_filled, row)
        if b_bar is not None:
            result.set_baseline(b_bar)
        return result

    @staticmethod
    def _check_range(values: np.ndarray) -> None:
        finite = values[~np.isnan(values)]
        if finite.size and (finite.min() < 0 or finite.max() > 100):
            raise InputError("accuracies must lie in [0, 100]")

    def set_baseline(self, values: Sequence[float]) -> None:
        values = np.asarray(values, dtype=METRIC_DTYPE)
        if values.shape != (self.T,):
            raise InputError(f"baseline needs {self.T} entries, got {values.shape}")
        self._check_range(values)
        self.b_bar[...] = values

    def set_row(self, i: int, values: Sequence[float]) -> None:
        """Fill row i; rows are filled in task order as each task completes."""
        if i != self._rows:
            raise StateError(f"row {i} filled out of order; {self._rows} rows complete")
        values = np.asarray(values, dtype=METRIC_DTYPE)
        if values.shape != (self.T,):
            raise InputError(f"row needs {self.T} entries, got {values.shape}")
        self._check_range(values)
        self.R[i] = values
        self._rows += 1

    def set_entry(self, i: int, j: int, value: float) -> None:
        self._check_range(np.array([value], dtype=METRIC_DTYPE))
        self.R[i, j] = value
        if i == j and self.diagonal_only:
            self._rows = max(self._rows, i + 1)

    def to_dict(self) -> Dict[str, object]:
        def clean(a):
            return [None if np.isnan(v) else float(v) for v in a]

        return {"R": [clean(row) for row in self.R], "b_bar": clean(self.b_bar), "diagonal_only": self.diagonal_only}


class MetricsReport(BaseModel):
    acc: float
    bwt: Optional[float] = None
    fwt: Optional[float] = None
    mixed_accuracy: Optional[float] = None
    used_params: int
    method: str
    sequence: str
    seed: int

    def rounded(self) -> Dict[str, object]:
        out = self.model_dump()
        for key in ("acc", "bwt", "fwt", "mixed_accuracy"):
            if out[key] is not None:
                out[key] = round(out[key], REPORT_DECIMALS)
        return out


def accuracy(network, dataset, batch_size: int = 512) -> float:
    """Percent of argmax predictions equal to the label; ties go to the lowest class index."""
    if len(dataset) == 0:
        raise InputError(f"cannot score empty dataset {getattr(dataset, 'name', '')!r}")
    logits = network.predict(dataset.images, batch_size)
    correct = np.count_nonzero(np.argmax(logits, axis=1) == dataset.labels)
    return float(100.0 * correct / len(dataset))


def _last_row(R: np.ndarray) -> np.ndarray:
    row = np.asarray(R, dtype=METRIC_DTYPE)[-1]
    if np.isnan(row).any():
        raise StateError("final row of R is incomplete")
    return row


def compute_acc(R) -> float:
    return float(_last_row(R).mean())


def compute_bwt(R) -> Optional[float]:
    R = np.asarray(R, dtype=METRIC_DTYPE)
    T = R.shape[0]
    if T < 2:
        return None
    last = _last_row(R)
    return float((last[:-1] - np.diag(R)[:-1]).sum() / (T - 1))


def compute_fwt(R, b_bar, exclude_last: bool = False) -> Optional[float]:
    """Mean zero-shot gain over random init on tasks 2..T (2..T-1 with exclude_last)."""
    R = np.asarray(R, dtype=METRIC_DTYPE)
    b_bar = np.asarray(b_bar, dtype=METRIC_DTYPE)
    T = R.shape[0]
    if T < 2:
        return None
    stop = T - 1 if exclude_last else T
    gains = [R[i - 1, i] - b_bar[i] for i in range(1, stop)]
    if np.isnan(gains).any():
        raise StateError("superdiagonal of R or b_bar is incomplete")
    return float(np.sum(gains) / (T - 1))


def summarize(result: ResultMatrix, used_params: int, method: str, sequence: str, seed: int,
              fwt_exclude_last: bool = False, mixed_accuracy: Optional[float] = None) -> MetricsReport:
    if result.diagonal_only:
        diag = np.diag(result.R)
        if np.isnan(diag).any():
            raise StateError("diagonal of R is incomplete")
        return MetricsReport(acc=float(diag.mean()), used_params=used_params, method=method,
                             sequence=sequence, seed=seed)
    return MetricsReport(
        acc=compute_acc(result.R),
        bwt=compute_bwt(result.R),
        fwt=compute_fwt(result.R, result.b_bar, fwt_exclude_last),
        mixed_accuracy=mixed_accuracy,
        used_params=used_params,
        method=method,
        sequence=sequence,
        seed=seed,
    )


def dump_json(obj, out, pretty: bool = True) -> None:
    if pretty:
        json.dump(obj, out, indent=2, sort_keys=True)
        out.write("\n")
    else:
        json.dump(obj, out, separators=(",", ":"), sort_keys=True)


def write_metrics(report: MetricsReport, path: Union[str, Path]) -> None:
    with open(path, "w") as out:
        dump_json(report.rounded(), out)


def read_metrics(path: Union[str, Path]) -> MetricsReport:
    with open(path) as f:
        return MetricsReport(**json.load(f))


def task_accuracies(network, datasets: List, batch_size: int = 512) -> List[float]:
    return [accuracy(network, ds, batch_size) for ds in datasets]
