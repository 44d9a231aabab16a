"""Linear-mode-connectivity instrumentation.

Interpolation scans walk the normalized straight line between two
models, scoring accuracy and loss per evaluation set at each distance;
stability-plasticity curves pair old-task and new-task accuracy along
one scan; landscape grids evaluate loss over a 2-D plane spanned by two
orthogonalized directions and project named models onto it.

Models with differently sized heads are reconciled first: coordinates
present only in the later model are added to the earlier one using the
recorded head initialization (zeros).  Scan endpoints are materialized
as the reconciled endpoint vectors themselves, so endpoint evaluations
reproduce direct evaluations bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import HEAD_BIAS, HEAD_WEIGHT, ParamVector, evaluate_loss, predict_classes

DIRECTION_NORM_TOL = 1e-12
ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class EvalSet:
    """A named test set plus the class scope it is argmaxed over."""

    name: str
    features: np.ndarray
    labels: np.ndarray
    class_scope: tuple[int, ...]

    def __len__(self) -> int:
        return self.features.shape[0]


def reconcile_params(
    anchor: ParamVector, target: ParamVector, alignment: str = "head_init"
) -> ParamVector:
    """Re-express ``anchor`` on ``target``'s layout.

    Head rows the anchor never had take the recorded initialization
    (zeros); ``alignment="strict"`` demands identical layouts instead.
    """
    if anchor.layout == target.layout:
        return anchor
    if alignment == "strict":
        raise ValueError("layouts differ and alignment is strict")
    if alignment != "head_init":
        raise ValueError(f"unknown alignment policy {alignment!r}")
    a_lay, t_lay = anchor.layout, target.layout
    if (
        a_lay.input_dim != t_lay.input_dim
        or a_lay.hidden_dims != t_lay.hidden_dims
        or a_lay.activation != t_lay.activation
    ):
        raise ValueError("layouts differ beyond the head; irreconcilable")
    missing = [c for c in a_lay.head_classes if c not in t_lay.head_classes]
    if missing:
        raise ValueError(f"anchor classes {missing} absent from target head")
    values = np.zeros(t_lay.total_len)
    for seg in a_lay.segments:
        if seg.name in (HEAD_WEIGHT, HEAD_BIAS):
            continue
        values[t_lay.slice_of(seg.name)] = anchor.segment_values(seg.name)
    width = a_lay.last_hidden_dim
    a_head = anchor.segment_values(HEAD_WEIGHT).reshape(a_lay.num_classes, width)
    t_head = values[t_lay.slice_of(HEAD_WEIGHT)].reshape(t_lay.num_classes, width)
    a_bias = anchor.segment_values(HEAD_BIAS)
    t_bias = values[t_lay.slice_of(HEAD_BIAS)]
    for row, cid in enumerate(a_lay.head_classes):
        t_row = t_lay.head_row(cid)
        t_head[t_row] = a_head[row]
        t_bias[t_row] = a_bias[row]
    return ParamVector(t_lay, values)


def build_direction(
    anchor: ParamVector, target: ParamVector, alignment: str = "head_init"
) -> tuple[ParamVector, float]:
    """Unit update direction and the distance that recovers the target."""
    anchor = reconcile_params(anchor, target, alignment)
    diff = target.values - anchor.values
    lambda_hat = float(np.linalg.norm(diff))
    if lambda_hat == 0.0:
        raise ValueError("zero displacement between anchor and target")
    return ParamVector(target.layout, diff / lambda_hat), lambda_hat


def default_lambda_grid(lambda_hat: float, points: int = 41, overshoot: float = 1.25) -> np.ndarray:
    """Evenly spaced distances on [0, overshoot*lambda_hat], with both endpoints exact."""
    grid = np.linspace(0.0, overshoot * lambda_hat, points)
    return np.unique(np.concatenate([grid, [0.0, lambda_hat]]))


@dataclass
class InterpolationScan:
    anchor: ParamVector
    target: ParamVector
    direction: ParamVector
    lambda_grid: np.ndarray
    lambda_hat: float
    accuracy: dict[str, list[float]] = field(default_factory=dict)
    loss: dict[str, list[float]] = field(default_factory=dict)
    eval_sizes: dict[str, int] = field(default_factory=dict)


def lmc_scan(
    anchor: ParamVector,
    target: ParamVector,
    lambda_grid,
    eval_sets: list[EvalSet],
    alignment: str = "head_init",
) -> InterpolationScan:
    """Accuracy and loss per evaluation set at every grid distance.

    The grid must contain 0 and lambda_hat exactly; those two rows are
    evaluated on the endpoint vectors themselves.
    """
    anchor = reconcile_params(anchor, target, alignment)
    direction, lambda_hat = build_direction(anchor, target)
    grid = np.asarray(lambda_grid, dtype=np.float64)
    if not (np.any(grid == 0.0) and np.any(grid == lambda_hat)):
        raise ValueError("lambda grid must include 0 and lambda_hat exactly")
    scan = InterpolationScan(
        anchor=anchor,
        target=target,
        direction=direction,
        lambda_grid=grid,
        lambda_hat=lambda_hat,
        accuracy={es.name: [] for es in eval_sets},
        loss={es.name: [] for es in eval_sets},
        eval_sizes={es.name: len(es) for es in eval_sets},
    )
    for lam in grid:
        if lam == 0.0:
            point = anchor
        elif lam == lambda_hat:
            point = target
        else:
            point = ParamVector(target.layout, anchor.values + lam * direction.values)
        for es in eval_sets:
            picks = predict_classes(point, es.features, es.class_scope)
            scan.accuracy[es.name].append(float(np.sum(picks == es.labels)) / len(es))
            scan.loss[es.name].append(
                evaluate_loss(point, es.features, es.labels, es.class_scope)
            )
    return scan


@dataclass(frozen=True)
class StabilityPlasticityCurve:
    points: tuple[tuple[float, float, float], ...]  # (old_acc, new_acc, lambda)
    slope: float
    intercept: float
    degenerate: bool


def stability_plasticity_curve(
    scan: InterpolationScan, old_names: list[str], new_name: str
) -> StabilityPlasticityCurve:
    """Pair old-group and new-task accuracy per distance, with a linear fit.

    Old-group accuracy pools the named sets weighted by their example
    counts.  The fit regresses new on old; a zero-variance old column is
    flagged degenerate instead of fitted.
    """
    for name in [*old_names, new_name]:
        if name not in scan.accuracy:
            raise KeyError(f"scan has no evaluation named {name!r}")
    weights = np.array([scan.eval_sizes[n] for n in old_names], dtype=np.float64)
    old_acc = np.array([scan.accuracy[n] for n in old_names])
    old = (weights @ old_acc) / weights.sum()
    new = np.array(scan.accuracy[new_name])
    lams = scan.lambda_grid
    if len(lams) < 2:
        raise ValueError("need at least 2 scan points for the fit")
    var = float(np.var(old))
    if var == 0.0:
        slope, intercept, degenerate = float("nan"), float("nan"), True
    else:
        slope = float(np.cov(old, new, bias=True)[0, 1] / var)
        intercept = float(new.mean() - slope * old.mean())
        degenerate = False
    points = tuple((float(o), float(n), float(l)) for o, n, l in zip(old, new, lams))
    return StabilityPlasticityCurve(points, slope, intercept, degenerate)


@dataclass
class LandscapeGrid:
    origin: ParamVector
    basis_u: ParamVector
    basis_v: ParamVector
    a_coords: np.ndarray
    b_coords: np.ndarray
    losses: np.ndarray  # shape (len(a_coords), len(b_coords))
    eval_name: str
    projections: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    def project(self, name: str, model: ParamVector) -> tuple[float, float, float]:
        """In-plane coordinates of a model plus its out-of-plane residual norm."""
        model = reconcile_params(model, self.origin)
        d = model.values - self.origin.values
        a = float(d @ self.basis_u.values)
        b = float(d @ self.basis_v.values)
        residual = float(
            np.linalg.norm(d - a * self.basis_u.values - b * self.basis_v.values)
        )
        self.projections[name] = (a, b, residual)
        return self.projections[name]


def landscape_grid(
    origin: ParamVector,
    dir_a: ParamVector,
    dir_b: ParamVector,
    extents: tuple[float, float, float, float],
    resolution: int | tuple[int, int],
    eval_set: EvalSet,
) -> LandscapeGrid:
    """Loss surface over the plane spanned by Gram-Schmidt(dir_a, dir_b).

    ``extents`` is (a_min, a_max, b_min, b_max) in parameter distance;
    grid point (0, 0), when the extents include it, is the origin itself.
    """
    da = dir_a.values if isinstance(dir_a, ParamVector) else np.asarray(dir_a, dtype=np.float64)
    db = dir_b.values if isinstance(dir_b, ParamVector) else np.asarray(dir_b, dtype=np.float64)
    norm_a = np.linalg.norm(da)
    if norm_a == 0.0:
        raise ValueError("dir_a is zero")
    u = da / norm_a
    w = db - (db @ u) * u
    norm_w = np.linalg.norm(w)
    if norm_w <= ORTHO_TOL * max(1.0, np.linalg.norm(db)):
        raise ValueError("directions are parallel; Gram-Schmidt degenerates")
    v = w / norm_w
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    a_min, a_max, b_min, b_max = extents
    a_coords = np.linspace(a_min, a_max, resolution[0])
    b_coords = np.linspace(b_min, b_max, resolution[1])
    losses = np.zeros((len(a_coords), len(b_coords)))
    for i, a in enumerate(a_coords):
        for j, b in enumerate(b_coords):
            point = ParamVector(origin.layout, origin.values + a * u + b * v)
            losses[i, j] = evaluate_loss(
                point, eval_set.features, eval_set.labels, eval_set.class_scope
            )
    return LandscapeGrid(
        origin=origin,
        basis_u=ParamVector(origin.layout, u),
        basis_v=ParamVector(origin.layout, v),
        a_coords=a_coords,
        b_coords=b_coords,
        losses=losses,
        eval_name=eval_set.name,
    )


# ---------------------------------------------------------------------------
# Plot-data emission


def _fmt(x: float) -> str:
    return repr(float(x))


def scan_to_csv(scan: InterpolationScan, config_digest: str = "") -> str:
    """Long-format rows: one per (lambda, evaluation set)."""
    lines = [f"# config_digest={config_digest}\n", "lambda,scope,accuracy,loss\n"]
    for k, lam in enumerate(scan.lambda_grid):
        for name in scan.accuracy:
            lines.append(
                f"{_fmt(lam)},{name},{_fmt(scan.accuracy[name][k])},{_fmt(scan.loss[name][k])}\n"
            )
    return "".join(lines)


def scan_manifest(scan: InterpolationScan, config_digest: str = "") -> dict:
    return {
        "config_digest": config_digest,
        "lambda_hat": scan.lambda_hat,
        "grid_points": len(scan.lambda_grid),
        "eval_sets": {name: scan.eval_sizes[name] for name in scan.accuracy},
        "direction_norm": float(np.linalg.norm(scan.direction.values)),
    }


def grid_to_csv(grid: LandscapeGrid, config_digest: str = "") -> str:
    lines = [f"# config_digest={config_digest}\n", "a,b,scope,loss\n"]
    for i, a in enumerate(grid.a_coords):
        for j, b in enumerate(grid.b_coords):
            lines.append(f"{_fmt(a)},{_fmt(b)},{grid.eval_name},{_fmt(grid.losses[i, j])}\n")
    return "".join(lines)


def grid_manifest(grid: LandscapeGrid, config_digest: str = "") -> dict:
    return {
        "config_digest": config_digest,
        "eval_set": grid.eval_name,
        "a_range": [float(grid.a_coords[0]), float(grid.a_coords[-1])],
        "b_range": [float(grid.b_coords[0]), float(grid.b_coords[-1])],
        "resolution": [len(grid.a_coords), len(grid.b_coords)],
        "projections": {
            name: {"a": a, "b": b, "residual_norm": r}
            for name, (a, b, r) in grid.projections.items()
        },
    }
