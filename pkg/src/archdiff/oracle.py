"""Synthetic tabular benchmark with closed-form ground truth.

    raw(A)   = sum_i b(op_i) + sum_{(i,j): e_ij = 1} s(op_i, op_j)
    b(k)     = sin(k + 1)
    s(p, q)  = 0.1 cos(1 + p F + q)
    acc(A)   = 1 / (1 + exp(-raw(A) / N))
    latency  = sum_i (1 + op_i^2 / F)

Operation indices are positions in the space's full vocabulary.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from archdiff.archspace import Architecture, SearchSpaceSpec, canonical_key, enumerate_space, validate
from archdiff.errors import CapacityError, UsageError

FORMULA_VERSION = "sincos-v1"
MAX_TABLE = 10**6


def _checked(a: Architecture) -> list[int]:
    ok, reason = validate(a)
    if not ok:
        raise UsageError(f"oracle needs a valid architecture: {reason}")
    return a.ops


def acc_raw(a: Architecture) -> float:
    ops = _checked(a)
    f = a.space.num_ops
    raw = sum(math.sin(k + 1) for k in ops)
    for i, j in zip(*np.nonzero(a.e)):
        raw += 0.1 * math.cos(1 + ops[i] * f + ops[j])
    return raw


def acc(a: Architecture) -> float:
    return 1.0 / (1.0 + math.exp(-acc_raw(a) / a.space.num_nodes))


def latency(a: Architecture) -> float:
    ops = _checked(a)
    f = a.space.num_ops
    return sum(1.0 + k * k / f for k in ops)


PROPERTIES = {"acc": acc, "latency": latency}


@dataclass
class BenchmarkTable:
    space: str
    entries: dict[str, dict[str, float]]
    version: str = FORMULA_VERSION

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def acc(self, key: str) -> float:
        return self.entries[key]["acc"]

    def lookup(self, a: Architecture) -> dict[str, float]:
        return self.entries[canonical_key(a)]

    def dumps(self) -> str:
        lines = [json.dumps({"format": "archdiff-table", "space": self.space, "version": self.version,
                             "entries": len(self.entries)}, sort_keys=True)]
        for key in sorted(self.entries):
            e = self.entries[key]
            lines.append(json.dumps({"key": key, "acc": e["acc"], "latency": e["latency"]}))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "BenchmarkTable":
        p = Path(path)
        if not p.exists():
            raise UsageError(f"table not found: {p}")
        lines = p.read_text().splitlines()
        header = json.loads(lines[0])
        if header.get("format") != "archdiff-table":
            raise UsageError(f"{p} is not a benchmark table")
        entries = {}
        for line in lines[1:]:
            if line.strip():
                d = json.loads(line)
                entries[d["key"]] = {"acc": d["acc"], "latency": d["latency"]}
        return cls(header["space"], entries, header["version"])


def build_table(space: SearchSpaceSpec) -> BenchmarkTable:
    if not space.is_template or space.size > MAX_TABLE:
        raise CapacityError(f"space {space.name} is too large to tabulate")
    entries = {}
    for a in enumerate_space(space, MAX_TABLE):
        entries[canonical_key(a)] = {"acc": acc(a), "latency": latency(a)}
    return BenchmarkTable(space.name, entries)


def top_quantile(table: BenchmarkTable, q: float) -> list[str]:
    """Keys of the ceil(q |table|) highest-acc entries; ties broken by key order."""
    if not 0 < q <= 1:
        raise UsageError("quantile must lie in (0, 1]")
    k = math.ceil(q * len(table) - 1e-9)
    ranked = sorted(table.entries, key=lambda key: (-table.entries[key]["acc"], key))
    return ranked[:k]


def argmax_key(table: BenchmarkTable) -> str:
    return top_quantile(table, 1.0 / len(table))[0]
