"""The increment-vector transform and its application schedule.

The transform rescales the displacement from an anchor model (the
previous task's post-transform solution) toward the current iterate,
coordinate by coordinate, using the ratio of cumulative to combined
Fisher mass:

    c_j = (Fbar_prev_j + F_cur_j) / (2 * Fbar_prev_j + F_cur_j)

which is the diagonal form of pulling the raw increment back toward the
oracle region.  Coordinates with zero prior Fisher (new head rows, or
parameters no earlier task ever cared about) move freely with c_j = 1;
that convention covers the 0/0 case as well, since zero Fisher on both
sides means the coordinate matters to no measured task and plasticity is
the safe default.  Whenever prior Fisher is positive the coefficient
lies in [1/2, 1], so every transformed coordinate stays on the closed
segment between anchor and current value.  No damping constant is
needed: the denominator is strictly positive wherever the prior mass is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fisher import FisherDiagonal
from .network import ParamVector


@dataclass(frozen=True)
class IncrementTransform:
    """Per-coordinate contraction coefficients plus their anchor."""

    coefficients: np.ndarray
    anchor: ParamVector

    def __post_init__(self):
        if self.coefficients.shape != (self.anchor.layout.total_len,):
            raise ValueError("coefficient length does not match anchor layout")
        if np.any(self.coefficients < 0.0) or np.any(self.coefficients > 1.0):
            raise ValueError("coefficients must lie in [0, 1]")


def build_transform(
    prior_cum: FisherDiagonal, current_task: FisherDiagonal, anchor: ParamVector
) -> IncrementTransform:
    """Coefficients from the prior cumulative and current-task Fisher diagonals.

    ``prior_cum`` must already be padded onto the anchor's layout (new
    coordinates carry zero prior Fisher).
    """
    if prior_cum.layout != anchor.layout or current_task.layout != anchor.layout:
        raise ValueError("fisher layouts must match the anchor")
    prev = prior_cum.values
    cur = current_task.values
    if np.any(prev < 0) or np.any(cur < 0):
        raise ValueError("negative fisher input")
    coeff = np.ones_like(prev)
    live = prev > 0.0
    coeff[live] = (prev[live] + cur[live]) / (2.0 * prev[live] + cur[live])
    return IncrementTransform(coefficients=coeff, anchor=anchor)


def apply_transform(transform: IncrementTransform, current: ParamVector) -> ParamVector:
    """anchor + c * (current - anchor), coordinate-wise.

    Free coordinates (c == 1) keep the current value bit-exactly rather
    than round-tripping through the subtraction.
    """
    if current.layout != transform.anchor.layout:
        raise ValueError("layout mismatch between transform anchor and current parameters")
    a = transform.anchor.values
    out = a + transform.coefficients * (current.values - a)
    free = transform.coefficients == 1.0
    out[free] = current.values[free]
    return current.with_values(out)


def schedule_hook(epoch_index: int, interval: int) -> bool:
    """True on the epochs where the transform fires (1-based, every ``interval``)."""
    if interval < 1:
        raise ValueError("interval must be >= 1")
    if epoch_index < 1:
        raise ValueError("epoch_index is 1-based")
    return epoch_index % interval == 0
