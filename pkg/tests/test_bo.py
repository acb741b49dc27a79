import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from archdiff import oracle
from archdiff.archspace import discretize, from_free_ops, get_space
from archdiff.bo import BoConfig, BoContext, Population, acquisition, bo_loop, propose_candidates
from archdiff.errors import ConfigError
from archdiff.numerics import Rng
from archdiff.predictor import PredictorConfig
from archdiff.sampler import SamplerConfig, sample_batch
from archdiff.sde import VeSde

TINY = get_space("tiny5")


def test_acquisition_examples():
    assert acquisition("PI", 0.5, 0.1, 0.5)[0] == pytest.approx(0.5)
    assert acquisition("UCB", 0.5, 0.1, 0.0, beta=1.0)[0] == pytest.approx(0.6)
    ei = acquisition("EI", 0.6, 0.1, 0.5)[0]
    ref, _ = integrate.quad(lambda y: (y - 0.5) * norm.pdf(y, 0.6, 0.1), 0.5, np.inf, epsabs=1e-12, epsrel=1e-12)
    assert abs(ei - ref) <= 1e-6


def test_zero_sigma_limits():
    mu = np.array([0.4, 0.6])
    np.testing.assert_array_equal(acquisition("PI", mu, [0, 0], 0.5), [0.0, 1.0])
    np.testing.assert_allclose(acquisition("EI", mu, [0, 0], 0.5), [0.0, 0.1])
    np.testing.assert_array_equal(acquisition("ITS", mu, [0, 0], 0.5, rng=Rng(0)), mu)


def test_acquisition_errors():
    with pytest.raises(ConfigError):
        acquisition("XYZ", 0.5, 0.1, 0.5)
    with pytest.raises(ConfigError):
        acquisition("PI", 0.5, -0.1, 0.5)
    with pytest.raises(ConfigError):
        acquisition("ITS", 0.5, 0.1, 0.5)


def test_its_mean():
    draws = acquisition("ITS", np.full(10_000, 0.3), np.full(10_000, 0.2), 0.5, rng=Rng(1))
    assert abs(draws.mean() - 0.3) < 3 * 0.2 / 100


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(1e-3, 0.5), st.floats(0, 1), st.floats(-1, 1))
def test_shift_invariance(mu, sigma, y_max, delta):
    for kind in ("PI", "EI"):
        a = acquisition(kind, mu, sigma, y_max)
        b = acquisition(kind, mu + delta, sigma, y_max + delta)
        np.testing.assert_allclose(a, b, atol=1e-12)
    assert acquisition("UCB", mu + delta, sigma, 0)[0] == pytest.approx(acquisition("UCB", mu, sigma, 0)[0] + delta)


def test_population():
    pop = Population()
    a, b = from_free_ops(TINY, [1, 1, 1]), from_free_ops(TINY, [2, 2, 2])
    pop.add(a, 0.3)
    pop.add(b, 0.7)
    assert pop.y_max == 0.7 and pop.best == b and len(pop) == 2 and pop.keys() == {a.key, b.key}


@pytest.mark.parametrize("kw", [dict(n0=0), dict(budget=10, n0=10), dict(candidates=0), dict(acq="XX"),
                                dict(strategy="grid"), dict(ensemble_size=1)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        BoConfig(**kw)


def _ctx(net=None):
    return BoContext(TINY, PredictorConfig.desk(), VeSde(), net)


def _seeded_population(n=6):
    pop = Population()
    for ops in [(1, 1, 1), (2, 3, 4), (5, 5, 1), (3, 3, 3), (4, 2, 5), (1, 5, 2)][:n]:
        a = from_free_ops(TINY, ops)
        pop.add(a, oracle.acc(a))
    return pop


@pytest.mark.parametrize("strategy", ["random", "mutation", "mutation+random"])
def test_candidate_counts_and_freshness(strategy):
    pop = _seeded_population()
    cands = propose_candidates(strategy, pop, 16, _ctx(), BoConfig(strategy=strategy), Rng(0))
    assert len(cands) == 16
    assert not {c.key for c in cands} & pop.keys()


def test_mutation_candidates_are_one_op_from_best():
    pop = _seeded_population()
    best = pop.best
    for c in propose_candidates("mutation", pop, 8, _ctx(), BoConfig(strategy="mutation"), Rng(1)):
        assert sum(x != y for x, y in zip(c.ops, best.ops)) == 1


def test_guided_needs_score_net():
    with pytest.raises(ConfigError):
        propose_candidates("guided", _seeded_population(), 4, _ctx(), BoConfig(), Rng(0))


def test_loop_invariants_and_determinism():
    cfg = BoConfig(n0=4, budget=9, candidates=6, strategy="mutation+random", ensemble_steps=15, ensemble_size=2)
    r1 = bo_loop(TINY, oracle.acc, cfg, Rng(3), _ctx())
    r2 = bo_loop(TINY, oracle.acc, cfg, Rng(3), _ctx())
    assert len(r1.population) == 9 and len(r1.history) == 9
    best = [h.best_so_far for h in r1.history]
    assert all(b1 <= b2 for b1, b2 in zip(best, best[1:]))
    assert [h.chosen_key for h in r1.history] == [h.chosen_key for h in r2.history]
    assert r1.best_y == max(y for _, y in r1.population.entries)
    assert len({a.key for a, _ in r1.population.entries}) == 9


@pytest.mark.parametrize("acq", ["EI", "ITS", "UCB"])
def test_loop_runs_with_each_acquisition(acq):
    cfg = BoConfig(n0=3, budget=5, candidates=4, acq=acq, strategy="random", ensemble_steps=5, ensemble_size=2)
    assert len(bo_loop(TINY, oracle.acc, cfg, Rng(0), _ctx()).population) == 5


@pytest.mark.slow
def test_guided_zero_scale_matches_unconditional_generation(tiny_full_net):
    """With k = 0 the guided proposals are draws from the learned unconditional model."""
    pop = _seeded_population()
    cfg = BoConfig(guide_k=0.0, sampler_steps=200, guide_fit_steps=50)
    cands = propose_candidates("guided", pop, 64, _ctx(tiny_full_net), cfg, Rng(5))
    plain = sample_batch(tiny_full_net, TINY, SamplerConfig(num_steps=200), Rng(6), n_samples=64)
    plain_acc = [oracle.acc(discretize(s, TINY, "snap")) for s in plain]
    guided_acc = [oracle.acc(c) for c in cands]
    se = np.sqrt(np.var(plain_acc) / 64 + np.var(guided_acc) / 64)
    assert abs(np.mean(guided_acc) - np.mean(plain_acc)) < 3 * se
