"""Self-describing checkpoint container.

One canonical binary framing: an 8-byte magic, a little-endian u32
header length, a JSON header (layout table, metadata record, section
table), then the raw sections.  Parameter and Fisher values are stored
as little-endian float64; the optimizer state travels as an opaque
JSON blob with hex-encoded floats so round-trips are lossless.  A text
export mirrors the same content as a single JSON document with
hex-encoded values, for debugging with ordinary tools.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fisher import FisherDiagonal, FisherLedger
from .network import AdamState, ParamLayout, ParamVector, Segment, SgdState

MAGIC = b"IVTCKPT1"


@dataclass(frozen=True)
class CheckpointMeta:
    task_index: int = 0
    seed: int = 0
    config_digest: str = ""
    extra: dict = field(default_factory=dict)


@dataclass
class Checkpoint:
    params: ParamVector
    meta: CheckpointMeta
    ledger: FisherLedger | None = None
    optimizer_state: SgdState | AdamState | None = None


def _layout_doc(layout: ParamLayout) -> dict:
    return {
        "input_dim": layout.input_dim,
        "hidden_dims": list(layout.hidden_dims),
        "activation": layout.activation,
        "segments": [
            {"name": s.name, "offset": s.offset, "length": s.length} for s in layout.segments
        ],
        "head_classes": list(layout.head_classes),
    }


def _layout_from_doc(doc: dict) -> ParamLayout:
    return ParamLayout(
        input_dim=doc["input_dim"],
        hidden_dims=tuple(doc["hidden_dims"]),
        activation=doc["activation"],
        segments=tuple(Segment(s["name"], s["offset"], s["length"]) for s in doc["segments"]),
        head_classes=tuple(doc["head_classes"]),
    )


def _hex_list(values: np.ndarray) -> list[str]:
    return [float(v).hex() for v in values]


def _from_hex(values: list[str]) -> np.ndarray:
    return np.array([float.fromhex(v) for v in values], dtype=np.float64)


def _state_doc(state) -> dict:
    if state is None:
        return {"kind": "none"}
    if isinstance(state, SgdState):
        return {"kind": "sgd", "velocity": _hex_list(state.velocity)}
    if isinstance(state, AdamState):
        return {"kind": "adam", "m": _hex_list(state.m), "v": _hex_list(state.v), "step": state.step}
    raise TypeError(f"unknown optimizer state {type(state)!r}")


def _state_from_doc(doc: dict):
    kind = doc.get("kind", "none")
    if kind == "none":
        return None
    if kind == "sgd":
        return SgdState(velocity=_from_hex(doc["velocity"]))
    if kind == "adam":
        return AdamState(m=_from_hex(doc["m"]), v=_from_hex(doc["v"]), step=doc["step"])
    raise ValueError(f"unknown optimizer state kind {kind!r}")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write the canonical binary framing."""
    sections: list[tuple[str, bytes, str]] = [
        ("params", ckpt.params.values.astype("<f8").tobytes(), "f64")
    ]
    if ckpt.ledger is not None and ckpt.ledger.cumulative is not None:
        sections.append(
            ("fisher.cumulative", ckpt.ledger.cumulative.values.astype("<f8").tobytes(), "f64")
        )
        for task_id in sorted(ckpt.ledger.per_task):
            diag = ckpt.ledger.per_task[task_id]
            doc = {"layout": _layout_doc(diag.layout)}
            payload = (
                len(json.dumps(doc)).to_bytes(4, "little")
                + json.dumps(doc).encode()
                + diag.values.astype("<f8").tobytes()
            )
            sections.append((f"fisher.task.{task_id}", payload, "blob"))
    sections.append(("optimizer_state", json.dumps(_state_doc(ckpt.optimizer_state)).encode(), "blob"))

    table = []
    cursor = 0
    for name, payload, kind in sections:
        entry = {"name": name, "kind": kind, "offset": cursor, "length": len(payload)}
        if kind == "f64":
            entry["count"] = len(payload) // 8
        table.append(entry)
        cursor += len(payload)
    header = {
        "format_version": 1,
        "layout": _layout_doc(ckpt.params.layout),
        "meta": {
            "task_index": ckpt.meta.task_index,
            "seed": ckpt.meta.seed,
            "config_digest": ckpt.meta.config_digest,
            "extra": ckpt.meta.extra,
        },
        "sections": table,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, payload, _ in sections:
            fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + header_len].decode())
    data = raw[12 + header_len :]
    layout = _layout_from_doc(header["layout"])
    sections = {s["name"]: s for s in header["sections"]}

    def read_f64(name: str) -> np.ndarray:
        s = sections[name]
        chunk = data[s["offset"] : s["offset"] + s["length"]]
        if len(chunk) != s["length"]:
            raise ValueError(f"{path}: section {name!r} truncated")
        return np.frombuffer(chunk, dtype="<f8").astype(np.float64)

    params = ParamVector(layout, read_f64("params"))
    ledger = None
    if "fisher.cumulative" in sections:
        ledger = FisherLedger()
        for name in sections:
            if not name.startswith("fisher.task."):
                continue
            s = sections[name]
            chunk = data[s["offset"] : s["offset"] + s["length"]]
            doc_len = int.from_bytes(chunk[:4], "little")
            doc = json.loads(chunk[4 : 4 + doc_len].decode())
            diag_layout = _layout_from_doc(doc["layout"])
            values = np.frombuffer(chunk[4 + doc_len :], dtype="<f8").astype(np.float64)
            ledger.per_task[int(name.rsplit(".", 1)[1])] = FisherDiagonal(diag_layout, values)
        ledger.per_task = dict(sorted(ledger.per_task.items()))
        ledger.cumulative = FisherDiagonal(layout, read_f64("fisher.cumulative"))
    state_sec = sections["optimizer_state"]
    state_doc = json.loads(data[state_sec["offset"] : state_sec["offset"] + state_sec["length"]])
    meta = header["meta"]
    return Checkpoint(
        params=params,
        meta=CheckpointMeta(
            task_index=meta["task_index"],
            seed=meta["seed"],
            config_digest=meta["config_digest"],
            extra=meta.get("extra", {}),
        ),
        ledger=ledger,
        optimizer_state=_state_from_doc(state_doc),
    )


def save_checkpoint_text(path, ckpt: Checkpoint) -> None:
    """Lossless single-document JSON export (floats as hex strings)."""
    doc = {
        "format_version": 1,
        "layout": _layout_doc(ckpt.params.layout),
        "meta": {
            "task_index": ckpt.meta.task_index,
            "seed": ckpt.meta.seed,
            "config_digest": ckpt.meta.config_digest,
            "extra": ckpt.meta.extra,
        },
        "params": _hex_list(ckpt.params.values),
        "optimizer_state": _state_doc(ckpt.optimizer_state),
    }
    if ckpt.ledger is not None and ckpt.ledger.cumulative is not None:
        doc["fisher"] = {
            "cumulative": _hex_list(ckpt.ledger.cumulative.values),
            "per_task": {
                str(tid): {
                    "layout": _layout_doc(d.layout),
                    "values": _hex_list(d.values),
                }
                for tid, d in ckpt.ledger.per_task.items()
            },
        }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def load_checkpoint_text(path) -> Checkpoint:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    layout = _layout_from_doc(doc["layout"])
    ledger = None
    if "fisher" in doc:
        ledger = FisherLedger()
        for tid, entry in sorted(doc["fisher"]["per_task"].items(), key=lambda kv: int(kv[0])):
            ledger.per_task[int(tid)] = FisherDiagonal(
                _layout_from_doc(entry["layout"]), _from_hex(entry["values"])
            )
        ledger.cumulative = FisherDiagonal(layout, _from_hex(doc["fisher"]["cumulative"]))
    meta = doc["meta"]
    return Checkpoint(
        params=ParamVector(layout, _from_hex(doc["params"])),
        meta=CheckpointMeta(
            task_index=meta["task_index"],
            seed=meta["seed"],
            config_digest=meta["config_digest"],
            extra=meta.get("extra", {}),
        ),
        ledger=ledger,
        optimizer_state=_state_from_doc(doc["optimizer_state"]),
    )
