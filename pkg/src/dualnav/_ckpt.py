"""Versioned JSON checkpoints of named numeric arrays."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def arrays_to_json(params: dict[str, np.ndarray]) -> dict:
    return {
        name: {"shape": list(np.shape(arr)), "data": np.asarray(arr, dtype=float).ravel().tolist()}
        for name, arr in params.items()
    }


def arrays_from_json(blob: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in blob.items():
        arr = np.asarray(entry["data"], dtype=np.float64)
        out[name] = arr.reshape(entry["shape"])
    return out


def write_checkpoint(path, schema: str, params: dict[str, np.ndarray], **meta) -> None:
    doc = {"schema": schema, **meta, "params": arrays_to_json(params)}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_checkpoint(path, schema: str) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema") != schema:
        raise ValueError(f"{path}: expected schema {schema!r}, found {doc.get('schema')!r}")
    params = arrays_from_json(doc.pop("params"))
    return params, doc
