"""Experiment configuration: one TOML file, canonicalized and digested.

The digest is the SHA-256 of the parsed document re-serialized as
canonical JSON (sorted keys, compact separators), so comments and key
order never change it.  A second digest over just the dataset and
stream sections identifies the data a run saw, independent of method
and training knobs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib

from .data import CsvSchema, SplitDataset, TaskStream, load_csv, load_idx, make_incremental_stream, synth_gaussian_tasks
from .network import TrainConfig
from .training import MemoryConfig, MethodSpec


class ConfigError(ValueError):
    """Malformed or incomplete experiment configuration."""


def canonical_digest(doc: dict) -> str:
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _require(doc: dict, section: str) -> dict:
    if section not in doc:
        raise ConfigError(f"missing [{section}] section")
    return doc[section]


@dataclass(frozen=True)
class ExperimentConfig:
    doc: dict
    digest: str
    dataset_digest: str

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        raw = Path(path).read_bytes()
        try:
            doc = tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        data_sections = {k: doc.get(k, {}) for k in ("dataset", "stream")}
        return cls(
            doc=doc,
            digest=canonical_digest(doc),
            dataset_digest=canonical_digest(data_sections),
        )

    # -- materializers ------------------------------------------------

    def dataset(self) -> SplitDataset:
        d = _require(self.doc, "dataset")
        kind = d.get("kind", "gaussian")
        if kind == "gaussian":
            return synth_gaussian_tasks(
                dim=d.get("dim", 2),
                classes=d.get("classes", 6),
                clusters_per_class=d.get("clusters_per_class", 1),
                separation=d.get("separation", 8.0),
                samples=d.get("samples", 100),
                seed=d.get("seed", 0),
            )
        if kind == "idx":
            return SplitDataset(
                train=load_idx(d["train_images"], d["train_labels"], "train"),
                test=load_idx(d["test_images"], d["test_labels"], "test"),
            )
        if kind == "csv":
            schema = CsvSchema(
                label_column=d.get("label_column", "label"),
                feature_columns=tuple(d["feature_columns"]) if "feature_columns" in d else None,
            )
            return SplitDataset(
                train=load_csv(d["train_path"], schema, "train"),
                test=load_csv(d["test_path"], schema, "test"),
            )
        raise ConfigError(f"unknown dataset kind {kind!r}")

    def stream(self, dataset: SplitDataset | None = None) -> TaskStream:
        s = _require(self.doc, "stream")
        ds = dataset if dataset is not None else self.dataset()
        total = len(ds.train.classes())
        num_tasks = s.get("num_tasks", 1)
        base = s.get("base_classes", total if num_tasks == 1 else None)
        if base is None:
            raise ConfigError("[stream] needs base_classes")
        return make_incremental_stream(
            ds, base_classes=base, num_tasks=num_tasks, seed=s.get("class_order_seed", 1993)
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        t = dict(self.doc.get("train", {}))
        if seed is not None:
            t["seed"] = seed
        allowed = {f for f in TrainConfig.__dataclass_fields__}
        unknown = set(t) - allowed
        if unknown:
            raise ConfigError(f"unknown [train] keys: {sorted(unknown)}")
        try:
            return TrainConfig(**t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[train]: {exc}") from None

    def method(self, seed: int | None = None) -> MethodSpec:
        m = _require(self.doc, "method")
        memory = None
        if "memory" in m:
            mem = m["memory"]
            memory = MemoryConfig(
                per_class_budget=mem.get("per_class_budget", 20),
                policy=mem.get("policy", "random"),
                seed=mem.get("seed", 0),
            )
        try:
            return MethodSpec(
                archetype=m.get("archetype", "naive"),
                use_ivt=m.get("use_ivt", False),
                train=self.train_config(seed),
                memory=memory,
            )
        except ValueError as exc:
            raise ConfigError(f"[method]: {exc}") from None

    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(self.doc.get("model", {}).get("hidden_dims", [16]))

    def activation(self) -> str:
        return self.doc.get("model", {}).get("activation", "relu")

    def seeds(self) -> list[int]:
        return list(self.doc.get("run", {}).get("seeds", [0]))

    def output(self) -> str | None:
        return self.doc.get("run", {}).get("output")

    def overall_mode(self) -> str:
        return self.doc.get("run", {}).get("overall_mode", "pooled")
