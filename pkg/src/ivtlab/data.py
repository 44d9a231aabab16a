"""Class-incremental task streams, synthetic generators, ingestion, replay memory.

Streams partition a labeled dataset's classes into an ordered task
sequence (a seeded permutation decides the order; the first task may be
larger than the rest).  The replay memory keeps a bounded per-class
exemplar store filled by either seeded uniform sampling or greedy
mean-matching ("herding") in feature space.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        l = np.asarray(self.labels, dtype=np.int64)
        if f.ndim != 2:
            raise ValueError("features must be 2-D (examples x input_dim)")
        if l.shape != (f.shape[0],):
            raise ValueError("labels count must equal feature rows")
        if l.size and l.min() < 0:
            raise ValueError("labels must be nonnegative")
        if self.split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", l)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def restrict_to(self, class_ids) -> "LabeledDataset":
        keep = np.isin(self.labels, list(class_ids))
        return LabeledDataset(self.features[keep], self.labels[keep], self.split)


@dataclass(frozen=True)
class SplitDataset:
    """A train/test pair over the same class universe."""

    train: LabeledDataset
    test: LabeledDataset


@dataclass(frozen=True)
class Task:
    task_id: int
    class_ids: tuple[int, ...]
    train: LabeledDataset
    test: LabeledDataset


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]
    class_order_seed: int

    def __post_init__(self):
        seen: set[int] = set()
        for task in self.tasks:
            overlap = seen.intersection(task.class_ids)
            if overlap:
                raise ValueError(f"classes {sorted(overlap)} appear in multiple tasks")
            seen.update(task.class_ids)
            for split in (task.train, task.test):
                if not set(split.classes()) <= set(task.class_ids):
                    raise ValueError(
                        f"task {task.task_id} {split.split} split has labels outside its classes"
                    )

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def all_classes(self) -> list[int]:
        out: list[int] = []
        for task in self.tasks:
            out.extend(task.class_ids)
        return out


def make_incremental_stream(
    dataset: SplitDataset, base_classes: int, num_tasks: int, seed: int
) -> TaskStream:
    """Seeded class permutation split into one base task plus even increments.

    The class counts must satisfy base + (num_tasks - 1) * k == total for
    an integer k >= 1 (k == base gives the uniform mode).
    """
    classes = dataset.train.classes()
    total = len(classes)
    if num_tasks < 1 or base_classes < 1:
        raise ValueError("num_tasks and base_classes must be >= 1")
    if num_tasks == 1:
        if base_classes != total:
            raise ValueError("single-task stream must take all classes")
        k = 0
    else:
        rest = total - base_classes
        if rest <= 0 or rest % (num_tasks - 1) != 0:
            raise ValueError(
                f"{total} classes cannot split as {base_classes} + {num_tasks - 1} even tasks"
            )
        k = rest // (num_tasks - 1)
    rng = np.random.default_rng(seed)
    order = [classes[i] for i in rng.permutation(total)]
    tasks = []
    cursor = 0
    for t in range(1, num_tasks + 1):
        width = base_classes if t == 1 else k
        ids = tuple(order[cursor : cursor + width])
        cursor += width
        tasks.append(
            Task(
                task_id=t,
                class_ids=ids,
                train=dataset.train.restrict_to(ids),
                test=dataset.test.restrict_to(ids),
            )
        )
    return TaskStream(tasks=tuple(tasks), class_order_seed=seed)


def synth_gaussian_tasks(
    dim: int,
    classes: int,
    clusters_per_class: int,
    separation: float,
    samples: int,
    seed: int,
) -> SplitDataset:
    """Isotropic unit-variance Gaussian clusters with seeded means.

    Candidate means are drawn from ``separation * N(0, I)`` and
    resampled until every inter-class mean distance is at least
    ``separation`` (so ``separation`` is the guaranteed margin in units
    of the noise sigma; 0 collapses all means to the origin, which is
    the maximal-overlap case).  ``samples`` is the per-class total,
    split 80/20 into train/test.
    """
    if separation < 0:
        raise ValueError("separation must be >= 0")
    if dim < 1 or classes < 1 or clusters_per_class < 1 or samples < 2:
        raise ValueError("dim/classes/clusters must be >= 1 and samples >= 2")
    rng = np.random.default_rng(seed)
    means = np.zeros((classes, clusters_per_class, dim))
    placed: list[tuple[int, np.ndarray]] = []
    for c in range(classes):
        for j in range(clusters_per_class):
            for _ in range(1000):
                cand = separation * rng.standard_normal(dim)
                if all(np.linalg.norm(cand - m) >= separation for cc, m in placed if cc != c):
                    break
            else:
                raise RuntimeError("could not place sufficiently separated class means")
            means[c, j] = cand
            placed.append((c, cand))
    n_test = max(1, samples // 5)
    n_train = samples - n_test
    train_rows, train_labels, test_rows, test_labels = [], [], [], []
    for c in range(classes):
        cluster_idx = np.arange(samples) % clusters_per_class
        points = means[c, cluster_idx] + rng.standard_normal((samples, dim))
        train_rows.append(points[:n_train])
        train_labels.append(np.full(n_train, c))
        test_rows.append(points[n_train:])
        test_labels.append(np.full(n_test, c))
    return SplitDataset(
        train=LabeledDataset(np.vstack(train_rows), np.concatenate(train_labels), "train"),
        test=LabeledDataset(np.vstack(test_rows), np.concatenate(test_labels), "test"),
    )


# ---------------------------------------------------------------------------
# On-disk ingestion

_IDX_DTYPES = {
    0x08: ("u1", 1),
    0x09: ("i1", 1),
    0x0B: (">i2", 2),
    0x0C: (">i4", 4),
    0x0D: (">f4", 4),
    0x0E: (">f8", 8),
}


def _read_idx(path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    z1, z2, code, ndim = raw[0], raw[1], raw[2], raw[3]
    if z1 != 0 or z2 != 0 or code not in _IDX_DTYPES:
        raise ValueError(f"{path}: bad IDX magic {raw[:4].hex()}")
    if len(raw) < 4 + 4 * ndim:
        raise ValueError(f"{path}: truncated IDX dimension table")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    dtype, itemsize = _IDX_DTYPES[code]
    expected = 4 + 4 * ndim + int(np.prod(dims, dtype=np.int64)) * itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype=dtype, offset=4 + 4 * ndim)
    return arr.reshape(dims), code


def load_idx(images_path, labels_path, split: str = "train") -> LabeledDataset:
    """IDX image/label file pair; byte-valued features are scaled to [0, 1]."""
    images, img_code = _read_idx(images_path)
    labels, _ = _read_idx(labels_path)
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: label file must be 1-D")
    if images.shape[0] != labels.shape[0]:
        raise ValueError("image and label counts differ")
    features = images.reshape(images.shape[0], -1).astype(np.float64)
    if img_code == 0x08:
        features = features / 255.0
    return LabeledDataset(features, labels.astype(np.int64), split)


@dataclass(frozen=True)
class CsvSchema:
    label_column: str
    feature_columns: tuple[str, ...] | None = None


def load_csv(path, schema: CsvSchema, split: str = "train") -> LabeledDataset:
    """Headered CSV with one label column; every other (or named) column is a feature."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if schema.label_column not in header:
            raise ValueError(f"{path}: no column named {schema.label_column!r}")
        label_idx = header.index(schema.label_column)
        if schema.feature_columns is None:
            feat_idx = [i for i in range(len(header)) if i != label_idx]
        else:
            feat_idx = [header.index(c) for c in schema.feature_columns]
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[i]) for i in feat_idx])
                labels.append(int(row[label_idx]))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: bad cell ({exc})") from None
    return LabeledDataset(np.array(rows, dtype=np.float64), np.array(labels), split)


# ---------------------------------------------------------------------------
# Exemplar replay memory


@dataclass(frozen=True)
class ReplayMemory:
    per_class_budget: int
    policy: str = "random"
    seed: int = 0
    store: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.per_class_budget < 1:
            raise ValueError("per-class budget must be >= 1")
        if self.policy not in ("random", "herding"):
            raise ValueError("policy must be 'random' or 'herding'")
        for cid, arr in self.store.items():
            if arr.shape[0] > self.per_class_budget:
                raise ValueError(f"class {cid} exceeds the per-class budget")

    def total(self) -> int:
        return sum(arr.shape[0] for arr in self.store.values())

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Pooled (features, labels) over every stored class."""
        if not self.store:
            raise ValueError("replay memory is empty")
        feats = np.vstack([self.store[c] for c in sorted(self.store)])
        labels = np.concatenate(
            [np.full(self.store[c].shape[0], c, dtype=np.int64) for c in sorted(self.store)]
        )
        return feats, labels


def _herding_order(features: np.ndarray, budget: int) -> list[int]:
    """Greedy selection whose running mean best matches the class mean."""
    target = features.mean(axis=0)
    chosen: list[int] = []
    total = np.zeros(features.shape[1])
    remaining = list(range(features.shape[0]))
    while remaining and len(chosen) < budget:
        best, best_dist = None, np.inf
        for idx in remaining:
            cand_mean = (total + features[idx]) / (len(chosen) + 1)
            dist = float(np.linalg.norm(target - cand_mean))
            if dist < best_dist:
                best, best_dist = idx, dist
        chosen.append(best)
        total += features[best]
        remaining.remove(best)
    return chosen


def update_memory(
    memory: ReplayMemory,
    train: LabeledDataset,
    feature_extractor: Callable[[np.ndarray], np.ndarray] | None = None,
) -> ReplayMemory:
    """Fill the store for every class present in ``train``.

    The random policy draws a seeded uniform sample without replacement;
    herding greedily matches the class mean in feature space (raw inputs
    unless an extractor is supplied, in which case selection happens on
    extracted features but raw inputs are stored).
    """
    if len(train) == 0:
        raise ValueError("cannot update memory from an empty training split")
    store = dict(memory.store)
    for cid in train.classes():
        rows = train.features[train.labels == cid]
        if memory.policy == "random":
            rng = np.random.default_rng([memory.seed, cid])
            take = min(memory.per_class_budget, rows.shape[0])
            idx = rng.choice(rows.shape[0], size=take, replace=False)
            store[cid] = rows[idx]
        else:
            space = feature_extractor(rows) if feature_extractor is not None else rows
            order = _herding_order(space, memory.per_class_budget)
            store[cid] = rows[order]
    return replace(memory, store=store)


def stream_manifest(stream: TaskStream) -> str:
    """Structured-text provenance record for a task stream."""
    doc = {
        "class_order_seed": stream.class_order_seed,
        "num_tasks": stream.num_tasks,
        "tasks": [
            {
                "task_id": t.task_id,
                "class_ids": list(t.class_ids),
                "train_examples": len(t.train),
                "test_examples": len(t.test),
            }
            for t in stream.tasks
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)
