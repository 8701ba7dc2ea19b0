"""Lower-triangular result matrix and the curriculum metrics computed from it."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


class ResultMatrix:
    """``R[t][i]``: accuracy on task i's test split after training task t (i <= t)."""

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise ValueError("need at least one task")
        self.num_tasks = num_tasks
        self._R = np.full((num_tasks, num_tasks), np.nan)

    def record(self, t: int, i: int, acc: float) -> "ResultMatrix":
        if not 0 <= i <= t < self.num_tasks:
            raise IndexError(f"cell ({t}, {i}) is outside the lower triangle")
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        if not np.isnan(self._R[t, i]):
            raise ValueError(f"cell ({t}, {i}) already written")
        self._R[t, i] = acc
        return self

    def __getitem__(self, idx):
        t, i = idx
        if i > t:
            raise IndexError("upper triangle is undefined")
        return float(self._R[t, i])

    @property
    def values(self) -> np.ndarray:
        return self._R.copy()

    @classmethod
    def from_rows(cls, rows) -> "ResultMatrix":
        R = cls(len(rows))
        for t, row in enumerate(rows):
            for i, acc in enumerate(row[: t + 1]):
                if acc is not None and not (isinstance(acc, float) and np.isnan(acc)):
                    R.record(t, i, float(acc))
        return R

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["checkpoint"] + [f"task{i}" for i in range(self.num_tasks)])
            for t in range(self.num_tasks):
                w.writerow([t] + [("" if np.isnan(v) else f"{v:.6f}") for v in self._R[t]])

    @classmethod
    def from_csv(cls, path) -> "ResultMatrix":
        with Path(path).open() as fh:
            rows = list(csv.reader(fh))[1:]
        return cls.from_rows([[float(v) if v else None for v in row[1:]] for row in rows])


def _final_row(R) -> np.ndarray:
    arr = R.values if isinstance(R, ResultMatrix) else np.asarray(R, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    row = arr[-1, : arr.shape[0]] if arr.shape[0] == arr.shape[1] else arr[-1]
    if np.isnan(row).any():
        raise ValueError("final row is incomplete")
    return row


def avg_accuracy(R) -> float:
    """Mean of the final row. A bare 1-D sequence is treated as that row."""
    return float(np.mean(_final_row(R)))


def avg_forgetting(R) -> float:
    """Mean over tasks of (accuracy right after training it) - (final accuracy)."""
    arr = R.values if isinstance(R, ResultMatrix) else np.asarray(R, dtype=float)
    final = _final_row(arr)
    diag = np.diag(arr)
    if np.isnan(diag).any():
        raise ValueError("diagonal is incomplete")
    return float(np.mean(diag - final))


def as_percent(x: float) -> float:
    return round(100.0 * x, 2)
