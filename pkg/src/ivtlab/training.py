"""Task-sequential training drivers.

Six archetypes share one loop: plain fine-tuning, Fisher-weighted
quadratic regularization toward the previous solution, exemplar replay,
their combination, a full-replay oracle that mixes every seen task's
data uniformly by example (keeping the same anchor penalty), and the
joint multi-task optimum trained on everything at once.  Any of the
sequential archetypes can be wrapped with the increment-vector
transform, which fires on the epoch schedule and teleports parameters
toward the previous task's solution weighted by the Fisher ledger.

Batch order is drawn from ``default_rng([config.seed, task_id])``, one
permutation per epoch, consumed sequentially; replay batches use the
same seed with a trailing 1.  The Fisher accumulator sees the primary
cross-entropy batch gradient (the mixed-batch gradient for the oracle),
never the penalty or replay terms.  Task 1 always trains plainly: there
is no prior Fisher mass, so the transform is skipped even when enabled.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointMeta, save_checkpoint
from .data import LabeledDataset, ReplayMemory, Task, TaskStream, update_memory
from .fisher import (
    FisherDiagonal,
    FisherLedger,
    begin_epoch_accumulator,
    mean_diagonals,
)
from .ivt import apply_transform, build_transform, schedule_hook
from .metrics import AccuracyMatrix, MetricsReport, compute_metrics
from .network import (
    AdamState,
    GradientVector,
    NetworkSpec,
    ParamVector,
    SgdState,
    TrainConfig,
    build_network,
    expand_head,
    init_optimizer_state,
    loss_and_grad,
    optimizer_step,
    predict_classes,
)

ARCHETYPES = (
    "naive",
    "quad_reg",
    "replay",
    "quad_reg_replay",
    "full_replay_oracle",
    "joint_mtl",
)
_REPLAY_ARCHETYPES = ("replay", "quad_reg_replay")
_PENALIZED_ARCHETYPES = ("quad_reg", "quad_reg_replay", "full_replay_oracle")


@dataclass(frozen=True)
class MemoryConfig:
    per_class_budget: int = 20
    policy: str = "random"
    seed: int = 0


@dataclass(frozen=True)
class MethodSpec:
    archetype: str
    use_ivt: bool = False
    train: TrainConfig = TrainConfig()
    memory: MemoryConfig | None = None

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise ValueError(f"unknown archetype {self.archetype!r}")
        if self.archetype in _REPLAY_ARCHETYPES and self.memory is None:
            raise ValueError(f"{self.archetype} needs memory settings")


@dataclass(frozen=True)
class IvtEvent:
    task_id: int
    epoch: int
    mean_coefficient: float
    displacement_norm: float


@dataclass
class SequentialState:
    """Everything carried between tasks of one sequential run."""

    params: ParamVector
    ledger: FisherLedger = field(default_factory=FisherLedger)
    memory: ReplayMemory | None = None
    history: list[Task] = field(default_factory=list)
    opt_state: SgdState | AdamState | None = None
    ivt_events: list[IvtEvent] = field(default_factory=list)

    @property
    def completed(self) -> int:
        return len(self.history)


def quad_penalty(
    params: ParamVector, anchor: ParamVector, fisher: FisherDiagonal, strength: float
) -> tuple[float, np.ndarray]:
    """(strength/2) * sum_j F_j (theta_j - anchor_j)^2 and its gradient."""
    d = params.values - anchor.values
    loss = 0.5 * strength * float(fisher.values @ (d * d))
    return loss, strength * fisher.values * d


def penalized_loss_and_grad(
    params: ParamVector,
    features: np.ndarray,
    labels: np.ndarray,
    mask,
    fisher: FisherDiagonal,
    anchor: ParamVector,
    strength: float,
) -> tuple[float, GradientVector]:
    """Masked cross-entropy plus the Fisher-weighted anchor penalty."""
    loss, grad = loss_and_grad(params, features, labels, mask)
    pen_loss, pen_grad = quad_penalty(params, anchor, fisher, strength)
    return loss + pen_loss, GradientVector(grad.layout, grad.values + pen_grad)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Contiguous chunks of a fresh permutation; the tail batch may be short."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _pooled_training_data(state: SequentialState, task: Task) -> tuple[np.ndarray, np.ndarray]:
    feats = [t.train.features for t in state.history] + [task.train.features]
    labels = [t.train.labels for t in state.history] + [task.train.labels]
    return np.vstack(feats), np.concatenate(labels)


def train_task(state: SequentialState, task: Task, method: MethodSpec) -> SequentialState:
    """Run one task's epochs and return the advanced state.

    Appends the task's unseen classes to the head, anchors the quadratic
    penalty and the increment transform at the incoming parameters, and
    commits the last finalized epoch Fisher to the ledger at the end.
    """
    if method.archetype == "joint_mtl":
        raise ValueError("joint_mtl is not a sequential archetype; use train_joint_mtl")
    cfg = method.train
    params = state.params
    new_classes = [c for c in task.class_ids if c not in params.layout.head_classes]
    if new_classes:
        params = expand_head(params, new_classes, seed=cfg.seed)
    anchor = params
    layout = params.layout
    prior_cum = state.ledger.cumulative_on(layout)
    seen = list(layout.head_classes)
    first_task = state.completed == 0

    if method.archetype == "full_replay_oracle":
        feats, labels = _pooled_training_data(state, task)
    else:
        feats, labels = task.train.features, task.train.labels

    penalized = (
        method.archetype in _PENALIZED_ARCHETYPES
        and not first_task
        and cfg.regularizer_strength > 0.0
    )
    replaying = (
        method.archetype in _REPLAY_ARCHETYPES
        and state.memory is not None
        and bool(state.memory.store)
    )
    if replaying:
        mem_feats, mem_labels = state.memory.as_arrays()

    if cfg.carry_optimizer_state and state.opt_state is not None:
        opt_state = _pad_opt_state(state.opt_state, state.params.layout, layout)
    else:
        opt_state = init_optimizer_state(cfg, layout.total_len)

    rng = np.random.default_rng([cfg.seed, task.task_id])
    replay_rng = np.random.default_rng([cfg.seed, task.task_id, 1])
    events: list[IvtEvent] = []
    epoch_fishers: list[FisherDiagonal] = []
    task_fisher: FisherDiagonal | None = None

    for epoch in range(1, cfg.epochs + 1):
        acc = begin_epoch_accumulator(layout)
        for batch in epoch_batches(feats.shape[0], cfg.batch_size, rng):
            _, grad = loss_and_grad(params, feats[batch], labels[batch], seen)
            if cfg.fisher_mode == "per_sample_sq":
                per_example = [
                    loss_and_grad(params, feats[i : i + 1], labels[i : i + 1], seen)[1]
                    for i in batch
                ]
                acc.accumulate(per_example, "per_sample_sq")
            else:
                acc.accumulate(grad, "batch_mean_sq")
            total = grad.values
            if replaying:
                take = min(cfg.batch_size, mem_feats.shape[0])
                pick = replay_rng.choice(mem_feats.shape[0], size=take, replace=False)
                _, replay_grad = loss_and_grad(params, mem_feats[pick], mem_labels[pick], seen)
                total = total + replay_grad.values
            if penalized:
                _, pen_grad = quad_penalty(params, anchor, prior_cum, cfg.regularizer_strength)
                total = total + pen_grad
            params, opt_state = optimizer_step(
                params, GradientVector(layout, total), cfg, opt_state
            )
        task_fisher = acc.finalize()
        epoch_fishers.append(task_fisher)
        if method.use_ivt and not first_task and schedule_hook(epoch, cfg.ivt_interval):
            fisher_now = (
                task_fisher
                if cfg.fisher_at_ivt == "last_epoch"
                else mean_diagonals(epoch_fishers)
            )
            transform = build_transform(prior_cum, fisher_now, anchor)
            before = params
            params = apply_transform(transform, params)
            events.append(
                IvtEvent(
                    task_id=task.task_id,
                    epoch=epoch,
                    mean_coefficient=float(transform.coefficients.mean()),
                    displacement_norm=float(np.linalg.norm(params.values - before.values)),
                )
            )
            if not cfg.carry_state_through_ivt:
                opt_state = init_optimizer_state(cfg, layout.total_len)

    state.ledger.commit_task(task.task_id, task_fisher)
    memory = state.memory
    if memory is not None:
        memory = update_memory(memory, task.train)
    return SequentialState(
        params=params,
        ledger=state.ledger,
        memory=memory,
        history=state.history + [task],
        opt_state=opt_state,
        ivt_events=state.ivt_events + events,
    )


def _pad_opt_state(opt_state, old_layout, new_layout):
    if old_layout == new_layout:
        return opt_state

    def pad(vec):
        out = np.zeros(new_layout.total_len)
        for seg in old_layout.segments:
            target = new_layout.segment(seg.name)
            out[target.offset : target.offset + seg.length] = vec[
                seg.offset : seg.offset + seg.length
            ]
        return out

    if isinstance(opt_state, SgdState):
        return SgdState(velocity=pad(opt_state.velocity))
    return AdamState(m=pad(opt_state.m), v=pad(opt_state.v), step=opt_state.step)


# ---------------------------------------------------------------------------
# Full-sequence driver


@dataclass
class RunRecord:
    accuracy_matrix: AccuracyMatrix
    checkpoints: list[Checkpoint]
    ivt_events: list[IvtEvent]
    wall_clock: list[float]
    config_digest: str = ""
    metrics: MetricsReport | None = None


class TrainingError(RuntimeError):
    """Raised when a task fails mid-sequence; carries the partial record."""

    def __init__(self, task_id: int, partial: RunRecord):
        super().__init__(f"training failed on task {task_id}")
        self.task_id = task_id
        self.partial = partial


def _evaluate_step(
    params: ParamVector, tests: list[LabeledDataset], seen: list[int], overall_mode: str
) -> tuple[list[float], float]:
    row = []
    correct = 0
    total = 0
    for ds in tests:
        picks = predict_classes(params, ds.features, seen)
        hits = int(np.sum(picks == ds.labels))
        row.append(hits / len(ds))
        correct += hits
        total += len(ds)
    if overall_mode == "pooled":
        overall = correct / total
    else:
        overall = sum(row) / len(row)
    return row, overall


def run_sequence(
    stream: TaskStream,
    method: MethodSpec,
    hidden_dims: tuple[int, ...] = (16,),
    activation: str = "relu",
    config_digest: str = "",
    out_dir=None,
    overall_mode: str = "pooled",
) -> RunRecord:
    """Train the stream's tasks in order, scoring every seen task after each.

    ``overall_mode`` picks between pooled accuracy over all seen test
    examples (default) and the unweighted mean of per-task accuracies.
    On failure a partial record rides along on the raised TrainingError.
    """
    if overall_mode not in ("pooled", "mean"):
        raise ValueError("overall_mode must be 'pooled' or 'mean'")
    cfg = method.train
    first = stream.tasks[0]
    spec = NetworkSpec(
        input_dim=first.train.input_dim,
        hidden_dims=tuple(hidden_dims),
        activation=activation,
        num_classes=len(first.class_ids),
    )
    params = build_network(spec, cfg.seed, class_ids=first.class_ids)
    memory = None
    if method.memory is not None and method.archetype in _REPLAY_ARCHETYPES:
        memory = ReplayMemory(
            per_class_budget=method.memory.per_class_budget,
            policy=method.memory.policy,
            seed=method.memory.seed,
        )
    state = SequentialState(params=params, memory=memory)

    rows: list[list[float]] = []
    overall: list[float] = []
    checkpoints: list[Checkpoint] = []
    wall: list[float] = []
    for task in stream.tasks:
        started = time.perf_counter()
        try:
            state = train_task(state, task, method)
        except Exception as exc:
            partial = _make_record(rows, overall, checkpoints, state, wall, config_digest)
            raise TrainingError(task.task_id, partial) from exc
        wall.append(time.perf_counter() - started)
        seen = list(state.params.layout.head_classes)
        tests = [t.test for t in state.history]
        row, pooled = _evaluate_step(state.params, tests, seen, overall_mode)
        rows.append(row)
        overall.append(pooled)
        checkpoints.append(
            Checkpoint(
                params=state.params,
                meta=CheckpointMeta(
                    task_index=task.task_id, seed=cfg.seed, config_digest=config_digest
                ),
                ledger=_snapshot_ledger(state.ledger),
                optimizer_state=state.opt_state,
            )
        )
    record = _make_record(rows, overall, checkpoints, state, wall, config_digest)
    if out_dir is not None:
        write_run_record(record, out_dir)
    return record


def _snapshot_ledger(ledger: FisherLedger) -> FisherLedger:
    return FisherLedger(per_task=dict(ledger.per_task), cumulative=ledger.cumulative)


def _make_record(rows, overall, checkpoints, state, wall, config_digest) -> RunRecord:
    matrix = AccuracyMatrix(rows=[list(r) for r in rows], overall=list(overall))
    return RunRecord(
        accuracy_matrix=matrix,
        checkpoints=checkpoints,
        ivt_events=list(state.ivt_events),
        wall_clock=list(wall),
        config_digest=config_digest,
        metrics=compute_metrics(matrix) if rows else None,
    )


def train_full_replay_oracle(
    state: SequentialState, task: Task, train: TrainConfig
) -> SequentialState:
    """One oracle step: previous solution plus uniformly mixed replay of all data."""
    return train_task(state, task, MethodSpec(archetype="full_replay_oracle", train=train))


def train_joint_mtl(
    stream: TaskStream,
    train: TrainConfig,
    hidden_dims: tuple[int, ...] = (16,),
    activation: str = "relu",
) -> ParamVector:
    """Single training run on the union of every task's train split, full head."""
    classes = stream.all_classes()
    first = stream.tasks[0]
    spec = NetworkSpec(
        input_dim=first.train.input_dim,
        hidden_dims=tuple(hidden_dims),
        activation=activation,
        num_classes=len(classes),
    )
    params = build_network(spec, train.seed, class_ids=classes)
    feats = np.vstack([t.train.features for t in stream.tasks])
    labels = np.concatenate([t.train.labels for t in stream.tasks])
    opt_state = init_optimizer_state(train, params.layout.total_len)
    rng = np.random.default_rng([train.seed, 0])
    for _ in range(train.epochs):
        for batch in epoch_batches(feats.shape[0], train.batch_size, rng):
            _, grad = loss_and_grad(params, feats[batch], labels[batch], classes)
            params, opt_state = optimizer_step(params, grad, train, opt_state)
    return params


# ---------------------------------------------------------------------------
# On-disk emission


def _fmt(x: float) -> str:
    return repr(float(x))


def write_run_record(record: RunRecord, out_dir) -> None:
    """Emit the record as a directory of plain files.

    ``accuracy_matrix.csv`` and ``ivt_events.csv`` are byte-stable across
    reruns of the same config; wall-clock times go to a separate file.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest_line = f"# config_digest={record.config_digest}\n"

    lines = [digest_line, "after_task,scope,accuracy\n"]
    m = record.accuracy_matrix
    for t, row in enumerate(m.rows, start=1):
        for i, acc in enumerate(row, start=1):
            lines.append(f"{t},task_{i},{_fmt(acc)}\n")
        lines.append(f"{t},pooled,{_fmt(m.overall[t - 1])}\n")
    (out / "accuracy_matrix.csv").write_text("".join(lines), encoding="utf-8")

    lines = [digest_line, "task,epoch,mean_coefficient,displacement_norm\n"]
    for ev in record.ivt_events:
        lines.append(
            f"{ev.task_id},{ev.epoch},{_fmt(ev.mean_coefficient)},{_fmt(ev.displacement_norm)}\n"
        )
    (out / "ivt_events.csv").write_text("".join(lines), encoding="utf-8")

    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for ckpt in record.checkpoints:
        save_checkpoint(ckpt_dir / f"task_{ckpt.meta.task_index:03d}.ckpt", ckpt)

    if record.metrics is not None:
        (out / "metrics.json").write_text(
            json.dumps(
                {"config_digest": record.config_digest, **record.metrics.as_dict()},
                indent=2,
                sort_keys=True,
            ),
            encoding="utf-8",
        )
    (out / "timing.json").write_text(
        json.dumps(
            {"config_digest": record.config_digest, "wall_clock_seconds": record.wall_clock},
            indent=2,
        ),
        encoding="utf-8",
    )
