import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from archdiff.archspace import ContinuousArchitecture, from_free_ops, get_space
from archdiff.errors import ConfigError, DimensionError, UsageError
from archdiff.numerics import Rng, Tensor, backward
from archdiff.numerics.gradcheck import central_difference, relative_error
from archdiff.sde import VeSde, VeSdeConfig, dsm_loss

SDE = VeSde()
TINY = get_space("tiny5")


def test_marginal_std_endpoints_exact():
    assert SDE.marginal_std(0.0) == 0.1
    assert SDE.marginal_std(1.0) == 5.0


def test_marginal_std_midpoint():
    assert SDE.marginal_std(0.5) == pytest.approx(0.1 * math.sqrt(50), rel=1e-12)


def test_marginal_std_monotone():
    s = SDE.marginal_std(np.linspace(0, 1, 1000))
    assert (np.diff(s) > 0).all()


@pytest.mark.parametrize("t", [-0.01, 1.01])
def test_time_outside_unit_interval(t):
    with pytest.raises(UsageError):
        SDE.marginal_std(t)
    with pytest.raises(UsageError):
        SDE.diffusion_coeff(t)


def test_diffusion_coeff_at_zero():
    assert SDE.diffusion_coeff(0.0) == pytest.approx(0.1 * math.sqrt(2 * math.log(50)), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.001, 0.999))
def test_g_squared_is_variance_rate(t):
    h = 1e-5
    num = (SDE.marginal_std(t + h) ** 2 - SDE.marginal_std(t - h) ** 2) / (2 * h)
    assert SDE.diffusion_coeff(t) ** 2 == pytest.approx(num, rel=1e-6)
    assert SDE.diffusion_coeff(t) > 0


@pytest.mark.parametrize("kw", [dict(sigma_min=1, sigma_max=0.5), dict(num_steps=0), dict(eps=0.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        VeSdeConfig(**kw)


def test_drift_is_zero():
    assert not SDE.drift(np.ones(3)).any()


def test_perturb_std_and_lower_triangle():
    a0 = from_free_ops(TINY, [1, 2, 3]).to_continuous()
    rng = Rng(0)
    dv, de = [], []
    for _ in range(2000):
        at, (zv, ze) = SDE.perturb(a0, 0.5, rng)
        assert not np.tril(at.e).any()
        np.testing.assert_allclose(at.v, a0.v + SDE.marginal_std(0.5) * zv)
        dv.append(at.v - a0.v)
        de.append((at.e - a0.e)[np.triu_indices(5, 1)])
    diffs = np.concatenate([np.ravel(dv), np.ravel(de)])
    assert diffs.size >= 10_000
    assert abs(diffs.std() / (0.1 * math.sqrt(50)) - 1) < 0.03


def test_perturb_near_eps_stays_close():
    a0 = from_free_ops(TINY, [1, 2, 3]).to_continuous()
    at, _ = SDE.perturb(a0, 1e-5, Rng(1))
    assert np.abs(at.v - a0.v).max() < 0.4


def test_prior_sample_statistics_and_determinism():
    draws = np.concatenate([np.ravel(SDE.prior_sample(TINY, Rng(3).child(i)).v) for i in range(300)])
    assert abs(draws.std() / 5.0 - 1) < 0.03
    assert abs(draws.mean()) < 3 * 5.0 / math.sqrt(draws.size)
    p1, p2 = SDE.prior_sample(TINY, Rng(9)), SDE.prior_sample(TINY, Rng(9))
    np.testing.assert_array_equal(p1.v, p2.v)
    assert not np.tril(p1.e).any()


def test_sample_time_range():
    t = SDE.sample_time(Rng(0), 10_000)
    assert t.min() > 1e-5 - 1e-15 and t.max() <= 1.0


def test_dsm_loss_zero_at_target_and_one_at_zero_score():
    rng = Rng(4)
    a0 = rng.randn((2000,))
    sigma = 0.7
    z = rng.randn((2000,))
    at = a0 + sigma * z
    target = -(at - a0) / sigma ** 2
    assert dsm_loss(Tensor(target), at, a0, sigma).item() == pytest.approx(0.0, abs=1e-20)
    assert dsm_loss(Tensor(np.zeros(2000)), at, a0, sigma).item() == pytest.approx(1.0, abs=0.1)


def test_dsm_loss_grad_matches_finite_differences():
    rng = Rng(5)
    a0, at, s = rng.randn((3, 4)), rng.randn((3, 4)), rng.randn((3, 4))
    w = (rng.uniform((3, 4)) > 0.3).astype(float)
    x = Tensor(s, requires_grad=True)
    g = backward(dsm_loss(x, at, a0, 0.3, w))[x]
    num = central_difference(lambda z: dsm_loss(Tensor(z), at, a0, 0.3, w).item(), s)
    assert relative_error(g, num) < 1e-7


def test_dsm_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        dsm_loss(Tensor(np.zeros(3)), np.zeros(4), np.zeros(4), 1.0)
