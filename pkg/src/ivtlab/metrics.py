"""Evaluation metrics over per-task accuracy matrices.

The accuracy matrix is lower-triangular: entry (t, i) is the accuracy on
task i's test split measured after training task t, and ``overall[t]``
is the accuracy over all classes seen by step t.  Average accuracy is
the mean of the overall column, last accuracy its final entry, and the
forgetting measure averages each task's maximal later drop.  All
arithmetic is plain sequential Python so independent recomputations
agree exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field


@dataclass
class AccuracyMatrix:
    """rows[t][i] = accuracy on task i after training task t (0-indexed, i <= t)."""

    rows: list[list[float]]
    overall: list[float]

    def __post_init__(self):
        if len(self.overall) != len(self.rows):
            raise ValueError("overall column must have one entry per completed task")
        for t, row in enumerate(self.rows):
            if len(row) != t + 1:
                raise ValueError(f"row {t} must have {t + 1} entries, got {len(row)}")
            for a in row:
                if not 0.0 <= a <= 1.0:
                    raise ValueError(f"accuracy {a} outside [0, 1]")
        for a in self.overall:
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"overall accuracy {a} outside [0, 1]")

    @property
    def num_tasks(self) -> int:
        return len(self.rows)


def average_accuracy(matrix: AccuracyMatrix) -> float:
    """Mean of the overall accuracies across steps."""
    if matrix.num_tasks == 0:
        raise ValueError("empty accuracy matrix")
    return sum(matrix.overall) / len(matrix.overall)


def last_accuracy(matrix: AccuracyMatrix) -> float:
    if matrix.num_tasks == 0:
        raise ValueError("empty accuracy matrix")
    return matrix.overall[-1]


def forgetting_measure(matrix: AccuracyMatrix, mode: str = "range") -> float:
    """Average over tasks i < T of max_t (a[t][i] - a[T][i]).

    ``mode="range"`` takes the maximum over t = i..T-1 (the standard
    reading); ``mode="two_point"`` restricts it to the two steps {i, T-1}
    for sensitivity analysis.
    """
    T = matrix.num_tasks
    if T < 2:
        raise ValueError("forgetting needs at least 2 tasks")
    if mode not in ("range", "two_point"):
        raise ValueError(f"unknown forgetting mode {mode!r}")
    total = 0.0
    for i in range(T - 1):
        final = matrix.rows[T - 1][i]
        if mode == "range":
            candidates = [matrix.rows[t][i] - final for t in range(i, T - 1)]
        else:
            candidates = [matrix.rows[i][i] - final, matrix.rows[T - 2][i] - final]
        total += max(candidates)
    return total / (T - 1)


@dataclass
class MetricsReport:
    aa: float
    la: float
    fm: float
    per_task_final: list[float] = field(default_factory=list)
    per_task_drop: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "AA": self.aa,
            "LA": self.la,
            "FM": self.fm,
            "per_task_final": self.per_task_final,
            "per_task_drop": self.per_task_drop,
        }


def compute_metrics(matrix: AccuracyMatrix, fm_mode: str = "range") -> MetricsReport:
    """AA/LA/FM plus per-task breakdowns; FM is NaN for single-task runs."""
    T = matrix.num_tasks
    last_row = matrix.rows[T - 1]
    drops = []
    for i in range(T - 1):
        drops.append(max(matrix.rows[t][i] - last_row[i] for t in range(i, T - 1)))
    return MetricsReport(
        aa=average_accuracy(matrix),
        la=last_accuracy(matrix),
        fm=forgetting_measure(matrix, fm_mode) if T >= 2 else math.nan,
        per_task_final=list(last_row),
        per_task_drop=drops,
    )


def avg_improvement(
    before: list[MetricsReport], after: list[MetricsReport]
) -> dict[str, float]:
    """Mean per-metric delta (after - before) over paired reports.

    Positive AA/LA deltas are improvements; FM deltas are reported raw,
    negative meaning less forgetting.
    """
    if len(before) != len(after):
        raise ValueError("before/after lists must pair up")
    if not before:
        raise ValueError("need at least one pair")
    n = len(before)
    return {
        "AA": sum(a.aa - b.aa for b, a in zip(before, after)) / n,
        "LA": sum(a.la - b.la for b, a in zip(before, after)) / n,
        "FM": sum(a.fm - b.fm for b, a in zip(before, after)) / n,
    }


def aggregate_reports(reports: list[MetricsReport]) -> dict[str, dict[str, float]]:
    """Per-metric mean and population standard deviation across runs."""
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {}
    for key, values in (
        ("AA", [r.aa for r in reports]),
        ("LA", [r.la for r in reports]),
        ("FM", [r.fm for r in reports]),
    ):
        n = len(values)
        mean = sum(values) / n
        var = sum((v - mean) ** 2 for v in values) / n
        out[key] = {"mean": mean, "std": math.sqrt(var)}
    return out


# ---------------------------------------------------------------------------
# Rendering

METRIC_HEADERS = ("AA ↑", "LA ↑", "FM ↓")


def render_aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines)


def _pct(x: float) -> str:
    return "--" if math.isnan(x) else f"{100.0 * x:.2f}"


def render_metrics_table(
    entries: list[tuple[str, dict[str, dict[str, float]]]],
    improvements: list[tuple[str, dict[str, float]]] | None = None,
) -> str:
    """Aligned text table of AA/LA/FM (percent, mean with std when present)."""
    rows = [["method", *METRIC_HEADERS]]
    for label, stats in entries:
        cells = [label]
        for key in ("AA", "LA", "FM"):
            mean = stats[key]["mean"]
            std = stats[key].get("std", 0.0)
            cell = _pct(mean)
            if std > 0.0:
                cell += f" ({_pct(std)})"
            cells.append(cell)
        rows.append(cells)
    for label, deltas in improvements or []:
        rows.append(
            [label]
            + [
                ("--" if math.isnan(deltas[k]) else f"{100.0 * deltas[k]:+.2f}")
                for k in ("AA", "LA", "FM")
            ]
        )
    return render_aligned(rows)


def report_to_json(report: MetricsReport) -> str:
    return json.dumps(report.as_dict(), indent=2, sort_keys=True)


def matrix_to_rows(matrix: AccuracyMatrix):
    """Long-format (after_task, scope, accuracy) records, 1-indexed tasks."""
    records = []
    for t, row in enumerate(matrix.rows, start=1):
        for i, acc in enumerate(row, start=1):
            records.append((t, f"task_{i}", acc))
        records.append((t, "pooled", matrix.overall[t - 1]))
    return records
