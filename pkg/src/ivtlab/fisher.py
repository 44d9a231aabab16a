"""Diagonal Fisher estimation and the cross-task cumulative ledger.

Per-task diagonals are accumulated online while training (one
accumulator per epoch, re-finalized each epoch) and committed to a
ledger whose cumulative vector is the coordinate-wise sum over tasks.
Two estimation modes exist because squaring the batch-mean gradient and
averaging per-example squared gradients differ by a batch-size-dependent
factor; ``batch_mean_sq`` is the default.  Only empirical Fisher is
supported: gradients are taken at the observed labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .network import GradientVector, ParamLayout


@dataclass(frozen=True)
class FisherDiagonal:
    """Nonnegative per-coordinate curvature estimate tied to a layout."""

    layout: ParamLayout
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.layout.total_len,):
            raise ValueError("fisher length does not match layout")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("fisher entries must be finite and >= 0")

    @staticmethod
    def zeros(layout: ParamLayout) -> "FisherDiagonal":
        return FisherDiagonal(layout, np.zeros(layout.total_len))


def pad_to_layout(diag: FisherDiagonal, layout: ParamLayout) -> FisherDiagonal:
    """Re-express a diagonal on an expanded layout.

    Coordinates that did not exist when the diagonal was estimated (new
    head rows) carry zero Fisher: they mattered to no measured task.
    """
    if diag.layout == layout:
        return diag
    if diag.layout.hidden_dims != layout.hidden_dims or diag.layout.input_dim != layout.input_dim:
        raise ValueError("layouts differ beyond the head; cannot pad")
    if diag.layout.head_classes != layout.head_classes[: len(diag.layout.head_classes)]:
        raise ValueError("head classes are not a prefix of the target layout")
    values = np.zeros(layout.total_len)
    for seg in diag.layout.segments:
        target = layout.segment(seg.name)
        values[target.offset : target.offset + seg.length] = diag.values[
            seg.offset : seg.offset + seg.length
        ]
    return FisherDiagonal(layout, values)


class FisherAccumulator:
    """Online mean of per-batch squared-gradient contributions."""

    def __init__(self, layout: ParamLayout):
        self.layout = layout
        self.total = np.zeros(layout.total_len)
        self.batches = 0

    def accumulate(self, grads, mode: str = "batch_mean_sq") -> "FisherAccumulator":
        """Add one batch.

        ``batch_mean_sq`` squares the batch-mean gradient (pass one
        GradientVector). ``per_sample_sq`` averages squared per-example
        gradients (pass the sequence of them). The two agree exactly on
        batches of one example.
        """
        if isinstance(grads, GradientVector):
            grads = [grads]
        grads = list(grads)
        if not grads:
            raise ValueError("no gradients supplied")
        for g in grads:
            if g.layout != self.layout:
                raise ValueError("gradient layout does not match accumulator")
            if not np.all(np.isfinite(g.values)):
                raise ValueError("non-finite gradient entries")
        if mode == "batch_mean_sq":
            stacked = np.stack([g.values for g in grads])
            self.total += stacked.mean(axis=0) ** 2
        elif mode == "per_sample_sq":
            stacked = np.stack([g.values**2 for g in grads])
            self.total += stacked.mean(axis=0)
        else:
            raise ValueError(f"unknown fisher mode {mode!r}")
        self.batches += 1
        return self

    def finalize(self) -> FisherDiagonal:
        """Mean over accumulated batches."""
        if self.batches == 0:
            raise ValueError("cannot finalize an accumulator with zero batches")
        return FisherDiagonal(self.layout, self.total / self.batches)


def begin_epoch_accumulator(layout: ParamLayout) -> FisherAccumulator:
    return FisherAccumulator(layout)


def accumulate_batch(acc: FisherAccumulator, grads, mode: str = "batch_mean_sq") -> FisherAccumulator:
    return acc.accumulate(grads, mode)


def finalize_epoch(acc: FisherAccumulator) -> FisherDiagonal:
    return acc.finalize()


@dataclass
class FisherLedger:
    """Per-task diagonals plus their exact cumulative sum."""

    per_task: dict[int, FisherDiagonal] = field(default_factory=dict)
    cumulative: FisherDiagonal | None = None

    def commit_task(self, task_id: int, fisher: FisherDiagonal) -> "FisherLedger":
        if task_id in self.per_task:
            raise ValueError(f"task {task_id} already committed")
        self.per_task[task_id] = fisher
        if self.cumulative is None:
            self.cumulative = FisherDiagonal(fisher.layout, fisher.values.copy())
        else:
            prev = pad_to_layout(self.cumulative, fisher.layout)
            self.cumulative = FisherDiagonal(fisher.layout, prev.values + fisher.values)
        return self

    def cumulative_on(self, layout: ParamLayout) -> FisherDiagonal:
        """Cumulative diagonal padded onto ``layout`` (zeros if empty)."""
        if self.cumulative is None:
            return FisherDiagonal.zeros(layout)
        return pad_to_layout(self.cumulative, layout)

    def sum_identity_gap(self) -> float:
        """Max |cumulative - sum of per-task diagonals|; zero by construction."""
        if self.cumulative is None:
            return 0.0
        total = np.zeros(self.cumulative.layout.total_len)
        for diag in self.per_task.values():
            total += pad_to_layout(diag, self.cumulative.layout).values
        return float(np.max(np.abs(total - self.cumulative.values)))


def commit_task(ledger: FisherLedger, task_id: int, fisher: FisherDiagonal) -> FisherLedger:
    return ledger.commit_task(task_id, fisher)


def mean_diagonals(diags: Sequence[FisherDiagonal]) -> FisherDiagonal:
    """Coordinate-wise mean of same-layout diagonals."""
    if not diags:
        raise ValueError("no diagonals to average")
    layout = diags[-1].layout
    stacked = np.stack([pad_to_layout(d, layout).values for d in diags])
    return FisherDiagonal(layout, stacked.mean(axis=0))
