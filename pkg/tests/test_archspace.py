import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import chi2

from archdiff import archspace as asp
from archdiff.archspace import (
    Architecture,
    ContinuousArchitecture,
    discretize,
    enumerate_space,
    from_free_ops,
    from_ops,
    get_space,
    is_valid,
    mutate,
    random_arch,
    sample_metrics,
    validate,
)
from archdiff.errors import CapacityError, DimensionError, UsageError
from archdiff.numerics import Rng

TINY = get_space("tiny5")
NB201 = get_space("nb201")
FREE5 = get_space("free5")


@pytest.mark.parametrize("name,n,f", [("tiny5", 5, 7), ("nb201", 8, 7), ("mbv3", 20, 9), ("free5", 5, 5)])
def test_space_dimensions(name, n, f):
    s = get_space(name)
    assert (s.num_nodes, s.num_ops) == (n, f)


@pytest.mark.parametrize("space", [TINY, NB201])
def test_template_structure(space):
    t = space.adjacency_template
    assert not np.tril(t).any()
    for node in space.free_nodes:
        assert t[:, node].sum() >= 1 and t[node, :].sum() >= 1


def test_unknown_space_is_a_usage_error():
    with pytest.raises(UsageError):
        get_space("nope")


def test_space_sizes():
    assert TINY.size == 125
    assert NB201.size == 15625


def test_validate_reasons():
    a = from_free_ops(TINY, [1, 2, 3])
    assert validate(a) == (True, "ok")
    v = a.v.copy()
    v[1, 4] = 1
    assert validate(Architecture(v, a.e, TINY)) == (False, "row not one-hot")
    e = a.e.copy()
    e[3, 1] = 1
    assert validate(Architecture(a.v, e, TINY)) == (False, "not upper-triangular")


def test_validate_rejects_template_violation_and_reserved_ops():
    a = from_free_ops(TINY, [1, 2, 3])
    e = a.e.copy()
    e[0, 2] = 1
    assert not is_valid(Architecture(a.v, e, TINY))
    assert not is_valid(from_ops(TINY, [0, 6, 2, 3, 6]))


def test_validate_shape_mismatch():
    with pytest.raises(DimensionError):
        validate(Architecture(np.zeros((4, 7)), np.zeros((4, 4)), TINY))


def test_free_space_reachability():
    ops = [0, 1, 2, 3, 4]
    e = np.zeros((5, 5), dtype=int)
    e[0, 1] = e[1, 4] = e[0, 2] = e[2, 4] = e[0, 3] = 1  # node 3 never reaches the output
    assert validate(from_ops(FREE5, ops, e))[0] is False
    e[3, 4] = 1
    assert is_valid(from_ops(FREE5, ops, e))


def test_discretize_examples():
    c = ContinuousArchitecture(np.zeros((5, 7)), np.zeros((5, 5)))
    c.v[1, :3] = [0.9, 0.1, 0.2]
    c.v[2, :3] = [0.6, 0.6, 0.1]
    c.v[3, :3] = [0.4, 0.45, 0.1]
    th = discretize(c, TINY, "threshold")
    assert th.v[1, :3].tolist() == [1, 0, 0]
    assert th.v[2, :3].tolist() == [1, 1, 0]
    snap = discretize(c, TINY, "snap")
    assert snap.v[3, :3].tolist() == [0, 1, 0]
    assert snap.ops[0] == 0 and snap.ops[4] == 6
    np.testing.assert_array_equal(snap.e, TINY.adjacency_template)


def test_continuous_lower_triangle_forced_zero():
    c = ContinuousArchitecture(np.zeros((3, 2)), np.ones((3, 3)))
    assert not np.tril(c.e).any()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(-3, 3)), arrays(np.float64, (5, 5), elements=st.floats(-3, 3)))
def test_snap_is_idempotent(v, e):
    for space in (TINY, FREE5) if v.shape[1] == 7 else (FREE5,):
        vv = v[:, : space.num_ops]
        once = discretize(ContinuousArchitecture(vv, e), space, "snap")
        twice = discretize(once.to_continuous(), space, "snap")
        assert once.key == twice.key


def test_random_arch_uniform_chi_square():
    rng = Rng(11)
    counts = Counter(random_arch(TINY, rng).key for _ in range(10_000))
    assert len(counts) == 125
    expected = 10_000 / 125
    stat = sum((c - expected) ** 2 / expected for c in counts.values())
    assert chi2.sf(stat, df=124) > 1e-3


@pytest.mark.parametrize("space", [TINY, NB201, FREE5, get_space("mbv3")])
def test_random_arch_always_valid(space):
    rng = Rng(2)
    for _ in range(50):
        a = random_arch(space, rng)
        assert is_valid(a)
        assert a.ops[space.input_node] == 0 and a.ops[space.output_node] == space.num_ops - 1


def test_mutate_changes_exactly_one_free_row():
    rng = Rng(5)
    for _ in range(200):
        a = random_arch(TINY, rng)
        b = mutate(a, rng)
        diff = [i for i in range(5) if not np.array_equal(a.v[i], b.v[i])]
        assert len(diff) == 1 and diff[0] in TINY.free_nodes
        assert is_valid(b)


def test_mutation_walks_cover_the_space():
    # 80 walks of 125 steps, 10^4 mutations in total
    rng = Rng(6)
    seen = set()
    for _ in range(80):
        a = random_arch(TINY, rng)
        for _ in range(125):
            a = mutate(a, rng)
            seen.add(a.key)
    assert len(seen) >= 0.9 * 125


def test_enumeration_keys_are_distinct():
    keys = [a.key for a in enumerate_space(TINY)]
    assert len(keys) == len(set(keys)) == 125
    assert all(is_valid(a) for a in enumerate_space(TINY))


def test_enumeration_capacity_errors():
    with pytest.raises(CapacityError):
        list(enumerate_space(FREE5))
    with pytest.raises(CapacityError):
        list(enumerate_space(NB201, limit=100))


def test_keys_distinguish_single_op_changes():
    a = from_free_ops(TINY, [1, 2, 3])
    b = from_free_ops(TINY, [1, 2, 4])
    assert a.key == from_free_ops(TINY, [1, 2, 3]).key
    assert a.key != b.key and a != b and a == from_free_ops(TINY, [1, 2, 3])


def test_sample_metrics_examples():
    a = from_free_ops(TINY, [1, 2, 3])
    out = sample_metrics([a, a, None], {a.key})
    assert out["validity"] == pytest.approx(200 / 3)
    assert out["uniqueness"] == 50.0
    assert out["novelty"] == 0.0


def test_sample_metrics_all_invalid_reports_null():
    out = sample_metrics([None, None])
    assert out["validity"] == 0.0 and out["uniqueness"] is None and out["novelty"] is None


@settings(max_examples=40, deadline=None)
@given(st.lists(st.one_of(st.none(), st.tuples(*[st.integers(1, 5)] * 3)), min_size=1, max_size=30),
       st.sets(st.tuples(*[st.integers(1, 5)] * 3), max_size=20))
def test_sample_metrics_bounds(picks, train):
    samples = [None if p is None else from_free_ops(TINY, p) for p in picks]
    out = sample_metrics(samples, {from_free_ops(TINY, t).key for t in train})
    for k in ("validity", "uniqueness", "novelty"):
        if out[k] is not None:
            assert 0.0 <= out[k] <= 100.0


def test_json_round_trip(tmp_path):
    archs = [random_arch(FREE5, Rng(i)) for i in range(5)] + [from_free_ops(TINY, [5, 4, 3])]
    for a in archs:
        b = asp.from_json(asp.to_json(a))
        assert b.space is a.space
        np.testing.assert_array_equal(a.v, b.v)
        np.testing.assert_array_equal(a.e, b.e)
    path = tmp_path / "a.jsonl"
    asp.write_jsonl(path, archs)
    assert [a.key for a in asp.read_jsonl(path)] == [a.key for a in archs]
    rec = json.loads(asp.to_json(archs[-1]))
    assert set(rec) == {"space", "v", "e"}


def test_from_dict_checks_shapes():
    with pytest.raises(DimensionError):
        asp.from_dict({"space": "tiny5", "v": [[1]], "e": [[0]]})
