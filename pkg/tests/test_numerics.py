import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from archdiff import numerics as nx
from archdiff.errors import NumericError, UsageError
from archdiff.numerics import Rng, Tensor, checkpoint
from archdiff.numerics.gradcheck import central_difference, relative_error

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def numeric_grad(fn, x):
    return central_difference(lambda z: fn(Tensor(z)).item(), x)


def test_softmax_two_logits():
    y = nx.softmax(Tensor([1.0, 2.0])).data
    assert y[0] == pytest.approx(1 / (1 + math.e), abs=1e-12)
    assert y[1] == pytest.approx(math.e / (1 + math.e), abs=1e-12)


def test_masked_entries_get_exactly_zero_weight():
    mask = np.array([[0.0, nx.MASK_VALUE, 0.0]])
    y = nx.softmax_masked(Tensor([[0.3, 50.0, -0.2]]), mask).data
    assert y[0, 1] == 0.0
    assert y.sum() == pytest.approx(1.0)


def test_fully_masked_row_rejected():
    with pytest.raises(NumericError):
        nx.softmax_masked(Tensor([[1.0, 2.0]]), np.full((1, 2), nx.MASK_VALUE))


def test_log_of_zero_is_a_numeric_error():
    with pytest.raises(NumericError):
        nx.log(Tensor([0.0, 1.0]))


def test_backward_needs_scalar_or_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        nx.backward(nx.square(x))
    gm = nx.backward(nx.square(x), seed_grad=np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(gm[x], [2.0, 4.0, 6.0])


def test_grad_accumulates_over_reused_nodes():
    # f = x*x + x -> df/dx = 2x + 1
    val, (g,) = nx.grad_of(lambda x: (x * x + x).sum(), np.array([1.5, -2.0]))
    np.testing.assert_allclose(g, [4.0, -3.0])
    assert val == pytest.approx(1.5 ** 2 + 1.5 + 4 - 2)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        y = nx.square(x)
    with pytest.raises(UsageError):
        nx.backward(y.sum())


@pytest.mark.parametrize("op", ["sigmoid", "swish", "exp", "square", "relu"])
def test_unary_grads(op):
    rng = Rng(3)
    x = rng.randn((4, 3)) + 0.05  # keep relu away from its kink
    fn = lambda t: getattr(nx, op)(t).sum()
    _, (g,) = nx.grad_of(fn, x)
    assert relative_error(g, numeric_grad(fn, x)) < 1e-6


def test_matmul_softmax_chain_grad():
    rng = Rng(4)
    a, b, w = rng.randn((2, 3, 4)), rng.randn((4, 5)), rng.randn((2, 3, 5))
    mask = np.where(rng.uniform((3, 5)) > 0.3, 0.0, nx.MASK_VALUE)
    mask[:, 0] = 0.0
    fn = lambda x: (nx.softmax(nx.matmul(x, b), mask) * w).sum()
    _, (g,) = nx.grad_of(fn, a)
    assert relative_error(g, numeric_grad(fn, a)) < 1e-6


def test_shape_op_grads():
    rng = Rng(5)
    x = rng.randn((2, 3, 4))
    w = rng.randn((4, 6))
    fn = lambda t: (nx.transpose(nx.reshape(t, (2, 12)), (1, 0)) @ nx.reshape(nx.swapaxes(t, 1, 2), (2, 12))).mean() \
        + nx.concat([t, t * t], axis=2).sum() + (nx.mean(t, axis=1) @ w).sum()
    _, (g,) = nx.grad_of(fn, x)
    assert relative_error(g, numeric_grad(fn, x)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite),
       arrays(np.float64, st.integers(1, 4), elements=finite))
def test_broadcast_add_mul_grads_have_operand_shapes(a, b):
    if a.shape[1] != b.shape[0]:
        b = np.resize(b, a.shape[1])
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    gm = nx.backward((ta * tb + tb).sum())
    assert gm[ta].shape == a.shape and gm[tb].shape == b.shape
    np.testing.assert_allclose(gm[ta], np.broadcast_to(b, a.shape))
    np.testing.assert_allclose(gm[tb], a.sum(axis=0) + a.shape[0])


def test_mse_value_and_grad():
    p = Tensor([1.0, 3.0], requires_grad=True)
    loss = nx.mse(p, np.array([0.0, 1.0]))
    assert loss.item() == pytest.approx(2.5)
    np.testing.assert_allclose(nx.backward(loss)[p], [1.0, 2.0])


def test_dropout_eval_identity_and_train_scaling():
    x = Tensor(np.ones((200, 50)))
    assert nx.dropout(x, 0.5, Rng(0), training=False) is x
    y = nx.dropout(x, 0.5, Rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0])}
    nx.adam_step(params, {"w": np.array([2.0])}, nx.AdamState(lr=0.1))
    assert params["w"][0] == pytest.approx(0.9, abs=1e-8)


def test_adam_rejects_non_finite_gradient_without_update():
    params = {"w": np.array([1.0])}
    state = nx.AdamState(lr=0.1)
    with pytest.raises(NumericError):
        nx.adam_step(params, {"w": np.array([np.nan])}, state)
    assert params["w"][0] == 1.0 and state.skipped == 1 and state.step == 0


def test_clip_global_norm_example():
    out = nx.clip_global_norm({"g": np.array([3.0, 4.0])}, 1.0)
    np.testing.assert_allclose(out["g"], [0.6, 0.8])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-100, 100)), st.floats(0.01, 10))
def test_clip_is_idempotent_and_bounded(g, max_norm):
    once = nx.clip_global_norm({"g": g}, max_norm)
    twice = nx.clip_global_norm(once, max_norm)
    np.testing.assert_allclose(once["g"], twice["g"], rtol=1e-12, atol=1e-12)
    assert nx.global_norm(once) <= max_norm * (1 + 1e-12)


def test_warmup_and_ema():
    assert nx.warmup_lr(1.0, 5, 10) == 0.5
    assert nx.warmup_lr(1.0, 50, 10) == 1.0
    ema = nx.Ema({"w": np.array([0.0])}, decay=0.9)
    ema.update({"w": np.array([1.0])})
    assert ema.shadow["w"][0] == pytest.approx(0.1)


def test_rng_streams_are_reproducible_and_distinct():
    a = Rng(7).randn(5)
    np.testing.assert_array_equal(a, Rng(7).randn(5))
    assert not np.allclose(a, Rng(7, 1).randn(5))
    assert not np.allclose(Rng(7).child(0).randn(5), Rng(7).child(1).randn(5))
    np.testing.assert_array_equal(Rng(7).child(2, 3).randn(4), Rng(7).child(2, 3).randn(4))


def test_checkpoint_round_trip_is_byte_stable():
    params = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([np.pi])}
    text = checkpoint.dumps(params, {"x": 1}, "demo")
    back, cfg, kind = checkpoint.loads(text)
    assert kind == "demo" and cfg == {"x": 1}
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
    assert checkpoint.dumps(back, cfg, kind) == text


def test_checkpoint_rejects_foreign_documents():
    with pytest.raises(UsageError):
        checkpoint.loads('{"format": "other"}')
