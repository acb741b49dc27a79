"""Parameter checkpoints.

A checkpoint is one UTF-8 JSON document::

    {"format": "archdiff-checkpoint", "version": 1,
     "kind": "<model kind>", "config": {...},
     "params": [{"name": str, "shape": [int, ...], "data": "<base64>"}, ...]}

``data`` is the row-major float64 payload in little-endian byte order,
base64 encoded. Entries are sorted by name and keys are sorted, so equal
parameters always serialise to identical bytes.
"""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from archdiff.errors import UsageError

FORMAT = "archdiff-checkpoint"
VERSION = 1


def dumps(params: dict[str, np.ndarray], config: dict, kind: str) -> str:
    entries = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii"),
        })
    doc = {"format": FORMAT, "version": VERSION, "kind": kind, "config": config, "params": entries}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def loads(text: str) -> tuple[dict[str, np.ndarray], dict, str]:
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise UsageError("not an archdiff checkpoint")
    if doc.get("version") != VERSION:
        raise UsageError(f"unsupported checkpoint version {doc.get('version')}")
    params = {}
    for e in doc["params"]:
        raw = base64.b64decode(e["data"])
        params[e["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return params, doc["config"], doc["kind"]


def save(path: str | Path, params: dict[str, np.ndarray], config: dict, kind: str) -> None:
    Path(path).write_text(dumps(params, config, kind))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict, str]:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"checkpoint not found: {p}")
    return loads(p.read_text())
