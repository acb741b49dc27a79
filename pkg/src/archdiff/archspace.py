"""Search spaces and architecture representations.

An architecture is a DAG given by a one-hot operator matrix ``v`` (N x F)
and a strictly upper-triangular adjacency matrix ``e`` (N x N). Template
spaces fix ``e``; ``free`` spaces let it vary.

Built-in spaces:

``tiny5``
    N=5, node 0 ``input``, node 4 ``output``, three free nodes choosing
    among five operations (125 architectures). Template edges are the chain
    (i, i+1) for i=0..3 plus the shortcut (0, 4).
``nb201``
    The NAS-Bench-201 cell converted to an operation-on-node graph. The
    four-node cell has six edges 0->1, 0->2, 1->2, 0->3, 1->3, 2->3, each
    becoming a node (1..6 in that order) between ``input`` (0) and
    ``output`` (7). An operation node j->i feeds every operation node that
    leaves cell node i, and the three operations entering cell node 3 feed
    ``output``. Template edges: (0,1) (0,2) (0,4) (1,3) (1,5) (2,6) (3,6)
    (4,7) (5,7) (6,7); 5**6 = 15625 architectures.
``mbv3``
    N=20 layer slots, F=9 with ``free`` adjacency; only a structural
    stand-in (not enumerable).
``free5``
    N=5, F=5, ``free`` adjacency; small enough to test free-space code paths.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from archdiff.errors import CapacityError, DimensionError, UsageError
from archdiff.numerics import Rng

NB201_OPS = ("input", "none", "skip_connect", "nor_conv_1x1", "nor_conv_3x3", "avg_pool_3x3", "output")


@dataclass(frozen=True, eq=False)
class SearchSpaceSpec:
    name: str
    num_nodes: int
    op_vocab: tuple[str, ...]
    adjacency_template: np.ndarray | None  # None means a free adjacency
    fixed_nodes: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.adjacency_template is not None:
            t = np.asarray(self.adjacency_template, dtype=np.int8)
            if t.shape != (self.num_nodes, self.num_nodes):
                raise DimensionError("adjacency template has the wrong shape")
            if np.tril(t).any():
                raise UsageError("adjacency template must be strictly upper-triangular")
            t.setflags(write=False)
            object.__setattr__(self, "adjacency_template", t)
            for i in self.free_nodes:
                if not t[:, i].any() or not t[i, :].any():
                    raise UsageError(f"template node {i} needs an incoming and an outgoing edge")

    @property
    def num_ops(self) -> int:
        return len(self.op_vocab)

    @property
    def is_template(self) -> bool:
        return self.adjacency_template is not None

    @property
    def free_nodes(self) -> list[int]:
        return [i for i in range(self.num_nodes) if i not in self.fixed_nodes]

    @property
    def free_ops(self) -> list[int]:
        reserved = set(self.fixed_nodes.values())
        return [k for k in range(self.num_ops) if k not in reserved]

    @property
    def input_node(self) -> int:
        return 0

    @property
    def output_node(self) -> int:
        return self.num_nodes - 1

    @property
    def size(self) -> int | None:
        """Number of architectures for template spaces, None for free ones."""
        if not self.is_template:
            return None
        return len(self.free_ops) ** len(self.free_nodes)

    def upper_mask(self) -> np.ndarray:
        return np.triu(np.ones((self.num_nodes, self.num_nodes)), k=1)

    def __repr__(self) -> str:
        return f"SearchSpaceSpec({self.name!r}, N={self.num_nodes}, F={self.num_ops})"


def _template(n: int, edges: Iterable[tuple[int, int]]) -> np.ndarray:
    t = np.zeros((n, n), dtype=np.int8)
    for i, j in edges:
        t[i, j] = 1
    return t


def _build_spaces() -> dict[str, SearchSpaceSpec]:
    tiny5 = SearchSpaceSpec(
        "tiny5", 5, NB201_OPS,
        _template(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]),
        {0: 0, 4: 6},
    )
    nb201 = SearchSpaceSpec(
        "nb201", 8, NB201_OPS,
        _template(8, [(0, 1), (0, 2), (0, 4), (1, 3), (1, 5), (2, 6), (3, 6), (4, 7), (5, 7), (6, 7)]),
        {0: 0, 7: 6},
    )
    mbv3_ops = ("input",) + tuple(f"mb_k{k}_e{e}" for k in (3, 5, 7) for e in (3, 6)) + ("skip", "output")
    mbv3 = SearchSpaceSpec("mbv3", 20, mbv3_ops, None, {0: 0, 19: len(mbv3_ops) - 1})
    free5 = SearchSpaceSpec("free5", 5, ("input", "conv", "pool", "skip", "output"), None, {0: 0, 4: 4})
    return {s.name: s for s in (tiny5, nb201, mbv3, free5)}


SPACES = _build_spaces()


def get_space(name: str) -> SearchSpaceSpec:
    try:
        return SPACES[name]
    except KeyError:
        raise UsageError(f"unknown search space {name!r}; known: {', '.join(sorted(SPACES))}") from None


@dataclass(frozen=True, eq=False)
class Architecture:
    """Discrete architecture. Not validated on construction; see :func:`validate`."""

    v: np.ndarray
    e: np.ndarray
    space: SearchSpaceSpec

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.int8)
        e = np.asarray(self.e, dtype=np.int8)
        v.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "e", e)

    @property
    def ops(self) -> list[int]:
        return [int(np.argmax(row)) for row in self.v]

    @property
    def key(self) -> str:
        return canonical_key(self)

    def __eq__(self, other) -> bool:
        return isinstance(other, Architecture) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def __repr__(self) -> str:
        names = [self.space.op_vocab[k] for k in self.ops]
        return f"Architecture({self.space.name}, ops={names})"

    def to_continuous(self, t: float = 0.0) -> "ContinuousArchitecture":
        return ContinuousArchitecture(self.v.astype(np.float64), self.e.astype(np.float64), t)


@dataclass
class ContinuousArchitecture:
    v: np.ndarray
    e: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        self.e = np.triu(np.asarray(self.e, dtype=np.float64), k=1)


def from_ops(space: SearchSpaceSpec, ops: Iterable[int], e: np.ndarray | None = None) -> Architecture:
    ops = list(ops)
    if len(ops) != space.num_nodes:
        raise DimensionError(f"expected {space.num_nodes} ops, got {len(ops)}")
    v = np.zeros((space.num_nodes, space.num_ops), dtype=np.int8)
    v[np.arange(space.num_nodes), ops] = 1
    if e is None:
        if not space.is_template:
            raise UsageError("free spaces need an explicit adjacency")
        e = space.adjacency_template
    return Architecture(v, e, space)


def from_free_ops(space: SearchSpaceSpec, free_ops: Iterable[int]) -> Architecture:
    """Template-space architecture from the operations of the free nodes, in node order."""
    ops = [0] * space.num_nodes
    for node, op in space.fixed_nodes.items():
        ops[node] = op
    for node, op in zip(space.free_nodes, free_ops, strict=True):
        ops[node] = op
    return from_ops(space, ops)


def _reachable(e: np.ndarray, start: int, forward: bool) -> np.ndarray:
    adj = e if forward else e.T
    seen = np.zeros(len(e), dtype=bool)
    seen[start] = True
    frontier = [start]
    while frontier:
        i = frontier.pop()
        for j in np.nonzero(adj[i])[0]:
            if not seen[j]:
                seen[j] = True
                frontier.append(j)
    return seen


def validate(a: Architecture) -> tuple[bool, str]:
    space = a.space
    n, f = space.num_nodes, space.num_ops
    if a.v.shape != (n, f) or a.e.shape != (n, n):
        raise DimensionError(f"architecture shapes {a.v.shape}, {a.e.shape} do not match space {space.name}")
    if not np.isin(a.v, (0, 1)).all() or not np.isin(a.e, (0, 1)).all():
        return False, "entries not binary"
    if (a.v.sum(axis=1) != 1).any():
        return False, "row not one-hot"
    if np.tril(a.e).any():
        return False, "not upper-triangular"
    ops = a.ops
    for node, op in space.fixed_nodes.items():
        if ops[node] != op:
            return False, f"fixed node {node} has wrong op"
    reserved = set(space.fixed_nodes.values())
    for node in space.free_nodes:
        if ops[node] in reserved:
            return False, f"node {node} uses a reserved op"
    if space.is_template:
        if not np.array_equal(a.e, space.adjacency_template):
            return False, "adjacency differs from template"
        return True, "ok"
    fwd = _reachable(a.e, space.input_node, True)
    bwd = _reachable(a.e, space.output_node, False)
    for node in space.free_nodes:
        if not fwd[node]:
            return False, f"node {node} unreachable from input"
        if not bwd[node]:
            return False, f"node {node} does not reach output"
    if not fwd[space.output_node]:
        return False, "output unreachable"
    return True, "ok"


def is_valid(a: Architecture) -> bool:
    return validate(a)[0]


def discretize(c: ContinuousArchitecture, space: SearchSpaceSpec, mode: str = "threshold") -> Architecture:
    """Map a continuous sample to 0/1 matrices.

    ``threshold`` applies 1{x > 0.5} entrywise and may produce invalid rows.
    ``snap`` takes each v-row's argmax, forces fixed nodes, and uses the
    template adjacency when the space has one (thresholded e otherwise).
    """
    upper = space.upper_mask()
    if mode == "threshold":
        v = (c.v > 0.5).astype(np.int8)
        e = ((c.e > 0.5) & (upper > 0)).astype(np.int8)
        return Architecture(v, e, space)
    if mode == "snap":
        scores = np.array(c.v, dtype=np.float64)
        ops = list(np.argmax(scores, axis=1))
        for node, op in space.fixed_nodes.items():
            ops[node] = op
        if space.is_template:
            e = space.adjacency_template
        else:
            e = ((c.e > 0.5) & (upper > 0)).astype(np.int8)
        return from_ops(space, ops, e)
    raise UsageError(f"unknown discretization mode {mode!r}")


def random_arch(space: SearchSpaceSpec, rng: Rng) -> Architecture:
    free_ops = space.free_ops
    if space.is_template:
        picks = rng.integers(0, len(free_ops), size=len(space.free_nodes))
        return from_free_ops(space, [free_ops[i] for i in picks])
    n = space.num_nodes
    iu = np.triu_indices(n, k=1)
    while True:
        picks = rng.integers(0, len(free_ops), size=len(space.free_nodes))
        ops = [0] * n
        for node, op in space.fixed_nodes.items():
            ops[node] = op
        for node, i in zip(space.free_nodes, picks):
            ops[node] = free_ops[i]
        e = np.zeros((n, n), dtype=np.int8)
        e[iu] = rng.integers(0, 2, size=len(iu[0]))
        a = from_ops(space, ops, e)
        if is_valid(a):
            return a


def mutate(a: Architecture, rng: Rng) -> Architecture:
    """Replace the operation of one free node with a different free operation."""
    space = a.space
    free_ops = space.free_ops
    if len(free_ops) <= 1:
        raise UsageError(f"space {space.name} has no alternative operations to mutate to")
    ops = a.ops
    node = space.free_nodes[int(rng.integers(0, len(space.free_nodes)))]
    choices = [k for k in free_ops if k != ops[node]]
    ops[node] = choices[int(rng.integers(0, len(choices)))]
    return from_ops(space, ops, a.e)


def canonical_key(a: Architecture) -> str:
    vbits = "".join(map(str, a.v.reshape(-1).tolist()))
    iu = np.triu_indices(a.space.num_nodes, k=1)
    ebits = "".join(map(str, a.e[iu].tolist()))
    return f"{a.space.name}:{vbits}:{ebits}"


def enumerate_space(space: SearchSpaceSpec, limit: int = 10**6) -> Iterator[Architecture]:
    """Every architecture of a template space, in lexicographic order of free ops."""
    if not space.is_template:
        raise CapacityError(f"space {space.name} has a free adjacency and is not enumerable")
    if space.size > limit:
        raise CapacityError(f"space {space.name} has {space.size} architectures (limit {limit})")
    for combo in itertools.product(space.free_ops, repeat=len(space.free_nodes)):
        yield from_free_ops(space, combo)


def sample_metrics(samples: list[Architecture | None], train_keys: set[str] | None = None) -> dict:
    """Validity, uniqueness and novelty in percent.

    ``None`` entries count as invalid samples. Uniqueness and novelty are
    ``None`` when nothing is valid; novelty is ``None`` without ``train_keys``.
    """
    if not samples:
        raise UsageError("sample_metrics needs at least one sample")
    valid_keys = [s.key for s in samples if s is not None and is_valid(s)]
    n_valid = len(valid_keys)
    out = {
        "total": len(samples),
        "valid": n_valid,
        "validity": 100.0 * n_valid / len(samples),
        "uniqueness": None,
        "novelty": None,
    }
    if n_valid:
        out["uniqueness"] = 100.0 * len(set(valid_keys)) / n_valid
        if train_keys is not None:
            out["novelty"] = 100.0 * sum(k not in train_keys for k in valid_keys) / n_valid
    return out


# serialization ---------------------------------------------------------------

def to_json(a: Architecture) -> str:
    return json.dumps({"space": a.space.name, "v": a.v.tolist(), "e": a.e.tolist()}, separators=(", ", ": "))


def from_dict(d: dict) -> Architecture:
    space = get_space(d["space"])
    v = np.asarray(d["v"])
    e = np.asarray(d["e"])
    if v.shape != (space.num_nodes, space.num_ops) or e.shape != (space.num_nodes, space.num_nodes):
        raise DimensionError(f"architecture record does not match space {space.name}")
    return Architecture(v, e, space)


def from_json(line: str) -> Architecture:
    return from_dict(json.loads(line))


def write_jsonl(path, archs: Iterable[Architecture]) -> None:
    with open(path, "w") as fh:
        for a in archs:
            fh.write(to_json(a) + "\n")


def read_jsonl(path) -> list[Architecture]:
    with open(path) as fh:
        return [from_json(line) for line in fh if line.strip()]
