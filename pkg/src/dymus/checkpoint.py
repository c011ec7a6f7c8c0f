"""JSON parameter checkpoints.

Layout::

    {"format": "dymus-checkpoint", "version": 1,
     "meta": {...free-form model/run metadata...},
     "tensors": {"dymus.gru.purchase.W_ir": {"shape": [16, 16], "values": [...]}, ...}}

``values`` are row-major.  Python's float repr round-trips float64 exactly,
so a save/load cycle is bit-for-bit.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "dymus-checkpoint"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    tensors = {
        name: {"shape": list(a.shape), "values": np.asarray(a, dtype=np.float64).reshape(-1).tolist()}
        for name, a in arrays.items()
    }
    doc = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "tensors": tensors}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arrays = {}
    for name, entry in doc["tensors"].items():
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"{path}: tensor {name!r} has {values.size} values for shape {shape}")
        arrays[name] = values.reshape(shape)
    return doc.get("meta", {}), arrays
