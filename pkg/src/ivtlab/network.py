"""Dense-network engine on flat parameter vectors.

Everything a task-sequential trainer needs from a model lives here: a
named segment layout over one flat float64 vector, a forward pass, exact
backpropagation of the masked softmax cross-entropy, SGD/Adam steps, and
head expansion when new classes arrive.  All math is 64-bit and
deterministic given (spec, seed, data order).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")

HEAD_WEIGHT = "head.weight"
HEAD_BIAS = "head.bias"

# Hard cap on parameter-vector length; anything larger is outside the
# desk-scale envelope this engine is built for.
MAX_TOTAL_LEN = 100_000_000


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int


@dataclass(frozen=True)
class ParamLayout:
    """Named, contiguous segments covering one flat parameter vector.

    ``head_classes`` lists class ids in head-row order; the head matrix
    is stored class-major so that appending classes never moves an
    existing (segment, offset) coordinate.  ``head_columns`` is the
    derived class-id -> segment-name map.
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    activation: str
    segments: tuple[Segment, ...]
    head_classes: tuple[int, ...]

    def __post_init__(self):
        cursor = 0
        for seg in self.segments:
            if seg.offset != cursor or seg.length < 0:
                raise ValueError(f"segment {seg.name!r} breaks contiguity at {cursor}")
            cursor += seg.length
        if len(set(self.head_classes)) != len(self.head_classes):
            raise ValueError("duplicate class ids in head")

    @property
    def total_len(self) -> int:
        return sum(s.length for s in self.segments)

    @property
    def head_columns(self) -> dict[int, str]:
        """Class id -> name of the head segment holding its row."""
        return {c: HEAD_WEIGHT for c in self.head_classes}

    @property
    def num_classes(self) -> int:
        return len(self.head_classes)

    @property
    def last_hidden_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.head_classes

    def segment(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(f"no segment named {name!r}")

    def slice_of(self, name: str) -> slice:
        seg = self.segment(name)
        return slice(seg.offset, seg.offset + seg.length)

    def head_row(self, class_id: int) -> int:
        try:
            return self.head_classes.index(class_id)
        except ValueError:
            raise KeyError(f"class {class_id} not in head") from None


@dataclass(frozen=True)
class ParamVector:
    """Flat model parameters bound to a layout."""

    layout: ParamLayout
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.layout.total_len,):
            raise ValueError(
                f"values length {self.values.shape} != layout length {self.layout.total_len}"
            )
        if self.values.dtype != np.float64:
            raise ValueError("parameter values must be float64")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter values must be finite")

    def segment_values(self, name: str) -> np.ndarray:
        return self.values[self.layout.slice_of(name)]

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.layout, values)

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.values.copy())


@dataclass(frozen=True)
class GradientVector:
    """Gradient aligned to the ParamVector it was computed against."""

    layout: ParamLayout
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.layout.total_len,):
            raise ValueError("gradient length does not match layout")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("gradient values must be finite")


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    activation: str = "relu"
    num_classes: int = 2

    def __post_init__(self):
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be >= 1")
        if any(d < 1 for d in self.hidden_dims):
            raise ValueError("hidden dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one task-sequential training run.

    ``ivt_interval`` is the epoch period of the increment-vector
    transform; ``regularizer_strength`` scales the Fisher-weighted
    quadratic anchor penalty. The three reset/estimation switches cover
    behaviours the update rule leaves open: optimizer state is reset at
    task boundaries unless ``carry_optimizer_state``, momentum is reset
    after each teleport unless ``carry_state_through_ivt``, and the
    Fisher used at a teleport is the last finalized epoch's estimate
    unless ``fisher_at_ivt == "running_mean"``.
    """

    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.0
    seed: int = 0
    ivt_interval: int = 10
    regularizer_strength: float = 0.0
    optimizer: str = "sgd"
    fisher_mode: str = "batch_mean_sq"  # or "per_sample_sq"
    fisher_at_ivt: str = "last_epoch"  # or "running_mean"
    carry_optimizer_state: bool = False
    carry_state_through_ivt: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.ivt_interval < 1:
            raise ValueError("epochs, batch_size and ivt_interval must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.regularizer_strength < 0:
            raise ValueError("regularizer_strength must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.fisher_mode not in ("batch_mean_sq", "per_sample_sq"):
            raise ValueError("unknown fisher_mode")
        if self.fisher_at_ivt not in ("last_epoch", "running_mean"):
            raise ValueError("unknown fisher_at_ivt policy")


def _build_layout(spec: NetworkSpec, class_ids: Sequence[int]) -> ParamLayout:
    segments = []
    offset = 0
    prev = spec.input_dim
    for i, width in enumerate(spec.hidden_dims, start=1):
        segments.append(Segment(f"hidden{i}.weight", offset, prev * width))
        offset += prev * width
        segments.append(Segment(f"hidden{i}.bias", offset, width))
        offset += width
        prev = width
    segments.append(Segment(HEAD_WEIGHT, offset, len(class_ids) * prev))
    offset += len(class_ids) * prev
    segments.append(Segment(HEAD_BIAS, offset, len(class_ids)))
    offset += len(class_ids)
    if offset > MAX_TOTAL_LEN:
        raise ValueError(f"parameter vector length {offset} exceeds {MAX_TOTAL_LEN}")
    return ParamLayout(
        input_dim=spec.input_dim,
        hidden_dims=tuple(spec.hidden_dims),
        activation=spec.activation,
        segments=tuple(segments),
        head_classes=tuple(int(c) for c in class_ids),
    )


def build_network(spec: NetworkSpec, seed: int, class_ids: Sequence[int] | None = None) -> ParamVector:
    """Initialize a fresh network.

    Hidden weights are uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)],
    drawn layer by layer from ``numpy.random.default_rng(seed)``; hidden
    biases and all head rows start at zero.  ``class_ids`` defaults to
    ``range(spec.num_classes)``.
    """
    if class_ids is None:
        class_ids = range(spec.num_classes)
    class_ids = [int(c) for c in class_ids]
    if len(set(class_ids)) != len(class_ids):
        raise ValueError("duplicate class ids")
    if len(class_ids) != spec.num_classes:
        spec = replace(spec, num_classes=len(class_ids))
    layout = _build_layout(spec, class_ids)
    rng = np.random.default_rng(seed)
    values = np.zeros(layout.total_len)
    prev = spec.input_dim
    for i, width in enumerate(spec.hidden_dims, start=1):
        bound = 1.0 / np.sqrt(prev)
        w = rng.uniform(-bound, bound, size=prev * width)
        values[layout.slice_of(f"hidden{i}.weight")] = w
        prev = width
    return ParamVector(layout, values)


def _hidden_weight(params: ParamVector, i: int) -> np.ndarray:
    lay = params.layout
    d_in = lay.input_dim if i == 1 else lay.hidden_dims[i - 2]
    d_out = lay.hidden_dims[i - 1]
    return params.segment_values(f"hidden{i}.weight").reshape(d_in, d_out)


def _head_weight(params: ParamVector) -> np.ndarray:
    lay = params.layout
    return params.segment_values(HEAD_WEIGHT).reshape(lay.num_classes, lay.last_hidden_dim)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _forward_trace(params: ParamVector, inputs: np.ndarray):
    """Forward pass keeping pre/post activations for backprop."""
    lay = params.layout
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != lay.input_dim:
        raise ValueError(f"expected inputs of width {lay.input_dim}, got shape {x.shape}")
    hs = [x]
    zs = []
    for i in range(1, len(lay.hidden_dims) + 1):
        z = hs[-1] @ _hidden_weight(params, i) + params.segment_values(f"hidden{i}.bias")
        zs.append(z)
        hs.append(_activate(z, lay.activation))
    logits = hs[-1] @ _head_weight(params).T + params.segment_values(HEAD_BIAS)
    return logits, hs, zs


def forward(params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Logits of shape (batch, num_classes), columns in head-row order."""
    logits, _, _ = _forward_trace(params, inputs)
    return logits


def _scope_rows(layout: ParamLayout, mask: Iterable[int] | None) -> np.ndarray:
    """Head-row indices of the active classes, sorted by class id.

    Sorting by class id makes the first-maximum convention of argmax
    resolve ties toward the lowest class id.
    """
    if mask is None:
        scoped = sorted(layout.head_classes)
    else:
        scoped = sorted(int(c) for c in mask)
        missing = [c for c in scoped if c not in layout.head_classes]
        if missing:
            raise ValueError(f"classes {missing} not present in head")
    if not scoped:
        raise ValueError("class scope is empty")
    return np.array([layout.head_row(c) for c in scoped], dtype=np.intp)


def _scoped_log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_batch(features: np.ndarray, labels: np.ndarray):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D batch")
    if features.shape[0] == 0:
        raise ValueError("empty batch")
    if labels.shape != (features.shape[0],):
        raise ValueError("labels must align with feature rows")
    return features, labels.astype(np.int64)


def loss_and_grad(
    params: ParamVector,
    features: np.ndarray,
    labels: np.ndarray,
    mask: Iterable[int] | None = None,
) -> tuple[float, GradientVector]:
    """Mean softmax cross-entropy over the masked classes, with its exact gradient.

    Head rows outside the mask receive exactly zero gradient.
    """
    features, labels = _check_batch(features, labels)
    lay = params.layout
    rows = _scope_rows(lay, mask)
    scoped_ids = [lay.head_classes[r] for r in rows]
    pos_of = {cid: j for j, cid in enumerate(scoped_ids)}
    try:
        label_pos = np.array([pos_of[int(y)] for y in labels], dtype=np.intp)
    except KeyError as exc:
        raise ValueError(f"label {exc} outside the active class mask") from None

    logits, hs, zs = _forward_trace(params, features)
    scoped = logits[:, rows]
    logp = _scoped_log_softmax(scoped)
    n = features.shape[0]
    loss = -float(logp[np.arange(n), label_pos].mean())

    dscoped = np.exp(logp)
    dscoped[np.arange(n), label_pos] -= 1.0
    dscoped /= n
    dlogits = np.zeros_like(logits)
    dlogits[:, rows] = dscoped

    grad = np.zeros(lay.total_len)
    h_last = hs[-1]
    grad[lay.slice_of(HEAD_WEIGHT)] = (dlogits.T @ h_last).ravel()
    grad[lay.slice_of(HEAD_BIAS)] = dlogits.sum(axis=0)
    dh = dlogits @ _head_weight(params)
    for i in range(len(lay.hidden_dims), 0, -1):
        z = zs[i - 1]
        if lay.activation == "relu":
            dz = dh * (z > 0.0)
        else:
            dz = dh * (1.0 - np.tanh(z) ** 2)
        grad[lay.slice_of(f"hidden{i}.weight")] = (hs[i - 1].T @ dz).ravel()
        grad[lay.slice_of(f"hidden{i}.bias")] = dz.sum(axis=0)
        dh = dz @ _hidden_weight(params, i).T
    return loss, GradientVector(lay, grad)


def evaluate_loss(
    params: ParamVector,
    features: np.ndarray,
    labels: np.ndarray,
    mask: Iterable[int] | None = None,
) -> float:
    """Mean masked cross-entropy without the gradient."""
    features, labels = _check_batch(features, labels)
    lay = params.layout
    rows = _scope_rows(lay, mask)
    pos_of = {lay.head_classes[r]: j for j, r in enumerate(rows)}
    try:
        label_pos = np.array([pos_of[int(y)] for y in labels], dtype=np.intp)
    except KeyError as exc:
        raise ValueError(f"label {exc} outside the active class mask") from None
    logp = _scoped_log_softmax(forward(params, features)[:, rows])
    return -float(logp[np.arange(features.shape[0]), label_pos].mean())


def predict_classes(
    params: ParamVector,
    features: np.ndarray,
    class_scope: Iterable[int] | None = None,
) -> np.ndarray:
    """Argmax class ids over the scoped logits; ties break toward the lowest id."""
    rows = _scope_rows(params.layout, class_scope)
    scoped_ids = np.array([params.layout.head_classes[r] for r in rows])
    return scoped_ids[np.argmax(forward(params, features)[:, rows], axis=1)]


def evaluate_accuracy(
    params: ParamVector,
    features: np.ndarray,
    labels: np.ndarray,
    class_scope: Iterable[int] | None = None,
) -> float:
    """Fraction correct under argmax over the scoped logits."""
    features, labels = _check_batch(features, labels)
    picks = predict_classes(params, features, class_scope)
    return int(np.sum(picks == labels)) / features.shape[0]


# ---------------------------------------------------------------------------
# Optimizers

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class SgdState:
    velocity: np.ndarray


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def init_optimizer_state(config: TrainConfig, n: int):
    if config.optimizer == "sgd":
        return SgdState(velocity=np.zeros(n))
    return AdamState(m=np.zeros(n), v=np.zeros(n))


def _check_grad_finite(grad: GradientVector):
    if not np.all(np.isfinite(grad.values)):
        raise ValueError("non-finite gradient entries")


def sgd_step(
    params: ParamVector, grad: GradientVector, config: TrainConfig, state: SgdState
) -> tuple[ParamVector, SgdState]:
    """Momentum SGD: v <- mu*v + g; theta <- theta - lr*v."""
    if grad.layout is not params.layout and grad.layout != params.layout:
        raise ValueError("gradient layout does not match parameters")
    _check_grad_finite(grad)
    velocity = config.momentum * state.velocity + grad.values
    return params.with_values(params.values - config.learning_rate * velocity), SgdState(velocity)


def adam_step(
    params: ParamVector, grad: GradientVector, config: TrainConfig, state: AdamState
) -> tuple[ParamVector, AdamState]:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""
    if grad.layout is not params.layout and grad.layout != params.layout:
        raise ValueError("gradient layout does not match parameters")
    _check_grad_finite(grad)
    step = state.step + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad.values
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad.values**2
    m_hat = m / (1.0 - ADAM_BETA1**step)
    v_hat = v / (1.0 - ADAM_BETA2**step)
    new_values = params.values - config.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return params.with_values(new_values), AdamState(m=m, v=v, step=step)


def optimizer_step(params, grad, config, state):
    if isinstance(state, SgdState):
        return sgd_step(params, grad, config, state)
    return adam_step(params, grad, config, state)


# ---------------------------------------------------------------------------
# Head expansion


def expand_head(params: ParamVector, new_classes: Sequence[int], seed: int = 0) -> ParamVector:
    """Append zero-initialized head rows for unseen classes.

    Every pre-existing (segment, offset) coordinate keeps its value
    bit-identically; only flat positions after the head shift. ``seed``
    is reserved for non-zero head initializers and is unused by the
    documented zero scheme.
    """
    lay = params.layout
    new_classes = [int(c) for c in new_classes]
    if len(set(new_classes)) != len(new_classes):
        raise ValueError("duplicate class ids in expansion")
    already = [c for c in new_classes if c in lay.head_classes]
    if already:
        raise ValueError(f"classes {already} already present in head")
    all_ids = list(lay.head_classes) + new_classes
    spec = NetworkSpec(lay.input_dim, lay.hidden_dims, lay.activation, len(all_ids))
    new_layout = _build_layout(spec, all_ids)
    values = np.zeros(new_layout.total_len)
    for seg in lay.segments:
        if seg.name in (HEAD_WEIGHT, HEAD_BIAS):
            continue
        values[new_layout.slice_of(seg.name)] = params.segment_values(seg.name)
    # class-major head storage: old rows are a prefix of the new segment
    old_w = params.segment_values(HEAD_WEIGHT)
    values[new_layout.segment(HEAD_WEIGHT).offset : new_layout.segment(HEAD_WEIGHT).offset + old_w.size] = old_w
    old_b = params.segment_values(HEAD_BIAS)
    values[new_layout.segment(HEAD_BIAS).offset : new_layout.segment(HEAD_BIAS).offset + old_b.size] = old_b
    return ParamVector(new_layout, values)
