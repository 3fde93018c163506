"""Accuracy, backward transfer and the token-ablation grid.

``A[j, k]`` is the accuracy on task ``j``'s test data after training step
``k`` (both 1-based in the public API, 0-based in the array); only ``j <= k``
is defined. Step weights are ``alpha_k = n_k / sum_{k' <= t} n_k'`` where
``n_k`` is the test-sample count of step ``k``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class MetricsError(ValueError):
    pass


def step_accuracy(predictions, targets) -> float:
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape:
        raise MetricsError(f"length mismatch: {predictions.shape} vs {targets.shape}")
    if predictions.size == 0:
        raise MetricsError("empty input")
    return float(np.mean(predictions == targets))


@dataclass
class AccuracyMatrix:
    counts: list[int] = field(default_factory=list)
    values: np.ndarray = field(default_factory=lambda: np.full((0, 0), np.nan))

    @classmethod
    def empty(cls, steps: int, counts: Sequence[int]) -> "AccuracyMatrix":
        if len(counts) != steps:
            raise MetricsError("need one test count per step")
        return cls([int(n) for n in counts], np.full((steps, steps), np.nan))

    @classmethod
    def from_array(cls, values, counts: Sequence[int]) -> "AccuracyMatrix":
        values = np.array(values, dtype=np.float64)
        return cls([int(n) for n in counts], values)

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    def record(self, task: int, step: int, accuracy: float) -> None:
        if not 1 <= task <= step <= self.steps:
            raise MetricsError(f"entry (task {task}, step {step}) outside the lower triangle")
        if not 0.0 <= accuracy <= 1.0:
            raise MetricsError(f"accuracy {accuracy} outside [0, 1]")
        self.values[task - 1, step - 1] = accuracy

    def get(self, task: int, step: int) -> float:
        v = self.values[task - 1, step - 1]
        if np.isnan(v):
            raise MetricsError(f"missing entry A[task {task}, step {step}]")
        return float(v)

    def alpha(self, t: int) -> np.ndarray:
        n = np.asarray(self.counts[:t], dtype=np.float64)
        return n / n.sum()

    def entries(self) -> list[tuple[int, int, float]]:
        """(step, task, accuracy) for every recorded entry, sorted ascending."""
        out = []
        for k in range(self.steps):
            for j in range(k + 1):
                v = self.values[j, k]
                if not np.isnan(v):
                    out.append((k + 1, j + 1, float(v)))
        return out


def overall_accuracy(matrix: AccuracyMatrix, t: int, alpha: Sequence[float] | None = None) -> float:
    """Data-weighted accuracy over the first ``t`` tasks after step ``t``."""
    a = matrix.alpha(t) if alpha is None else np.asarray(alpha, dtype=np.float64)
    col = np.array([matrix.get(k, t) for k in range(1, t + 1)])
    return float(np.dot(a[:t], col))


def backward_transfer(matrix: AccuracyMatrix, t: int, alpha: Sequence[float] | None = None) -> float:
    """Weighted forgetting after step ``t`` as a fraction (negative means forgetting).

    The weight of each term is that of the measuring step ``k``.
    """
    if t < 2:
        raise MetricsError("backward transfer needs t >= 2")
    a = matrix.alpha(t) if alpha is None else np.asarray(alpha, dtype=np.float64)
    total = 0.0
    for k in range(2, t + 1):
        diffs = np.array([matrix.get(j, k) - matrix.get(j, j) for j in range(1, k)])
        total += a[k - 1] * diffs.sum()
    return float(total / (t - 1))


def token_ablation_matrix(learner, test_data: Mapping[int, object]) -> tuple[list[int], np.ndarray]:
    """Grid ``[token, task]`` of task-IL accuracy using token ``i`` with task ``j``'s head.

    ``test_data`` maps task id to an object with ``images`` and ``labels``.
    """
    from .continual import UnknownTaskError, accuracy_on

    ids = learner.task_ids
    missing = [j for j in test_data if j not in ids]
    if missing:
        raise UnknownTaskError(f"tasks {missing} are not present in the learner")
    tasks = [j for j in ids if j in test_data]
    grid = np.zeros((len(tasks), len(tasks)))
    for a, i in enumerate(tasks):
        for b, j in enumerate(tasks):
            grid[a, b] = accuracy_on(learner, test_data[j], j, token_id=i)
    return tasks, grid


# -- CSV --------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.6f}"


def export_accuracy_csv(matrix: AccuracyMatrix) -> str:
    rows = matrix.entries()
    if not rows:
        raise MetricsError("no accuracy entries recorded")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "task", "accuracy"])
    for step, task, acc in rows:
        w.writerow([step, task, _fmt(acc)])
    return buf.getvalue()


def export_summary_csv(matrix: AccuracyMatrix) -> str:
    """``step,overall_accuracy,bwt``; BWT in percentage points, blank at step 1."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "overall_accuracy", "bwt"])
    for t in range(1, matrix.steps + 1):
        if np.isnan(matrix.values[:t, t - 1]).any():
            break
        bwt = _fmt(100.0 * backward_transfer(matrix, t)) if t >= 2 else ""
        w.writerow([t, _fmt(overall_accuracy(matrix, t)), bwt])
    return buf.getvalue()


def export_ablation_csv(tasks: Sequence[int], grid: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["token", "task", "accuracy"])
    for a, i in enumerate(tasks):
        for b, j in enumerate(tasks):
            w.writerow([i, j, _fmt(grid[a, b])])
    return buf.getvalue()


def parse_accuracy_csv(text: str, counts: Sequence[int] | None = None) -> AccuracyMatrix:
    rows = list(csv.DictReader(io.StringIO(text)))
    steps = max(int(r["step"]) for r in rows)
    m = AccuracyMatrix.empty(steps, counts if counts is not None else [1] * steps)
    for r in rows:
        m.record(int(r["task"]), int(r["step"]), float(r["accuracy"]))
    return m


def parse_ablation_csv(text: str) -> tuple[list[int], np.ndarray]:
    rows = list(csv.DictReader(io.StringIO(text)))
    tasks = sorted({int(r["token"]) for r in rows} | {int(r["task"]) for r in rows})
    pos = {t: i for i, t in enumerate(tasks)}
    grid = np.full((len(tasks), len(tasks)), np.nan)
    for r in rows:
        grid[pos[int(r["token"])], pos[int(r["task"])]] = float(r["accuracy"])
    return tasks, grid
