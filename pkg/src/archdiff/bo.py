"""Ensemble-predictor Bayesian optimisation over architectures.

Each iteration retrains an M-member predictor ensemble on the population,
proposes c candidates with an acquisition-optimisation strategy, scores
them by an acquisition function of the ensemble mean and std, and evaluates
the argmax with the oracle. The ``guided`` strategy generates candidates
with the score network steered by a Gaussian likelihood model fitted to the
population.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from archdiff.archspace import Architecture, SearchSpaceSpec, discretize, is_valid, mutate, random_arch
from archdiff.errors import ConfigError
from archdiff.numerics import Rng
from archdiff.predictor import PredictorConfig, ensemble_stats, gaussian_fit, train_ensemble
from archdiff.sampler import GuidanceConfig, SamplerConfig, guided_sample_batch
from archdiff.scorenet import ScoreNet
from archdiff.sde import VeSde

log = logging.getLogger(__name__)

ACQUISITIONS = ("PI", "EI", "ITS", "UCB")
STRATEGIES = ("random", "mutation", "mutation+random", "guided")


def acquisition(kind: str, mu, sigma, y_max: float, beta: float = 1.0, rng: Rng | None = None) -> np.ndarray:
    """PI, EI, ITS or UCB from ensemble mean/std; sigma = 0 takes the deterministic limits."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if (sigma < 0).any():
        raise ConfigError("sigma must be non-negative")
    pos = sigma > 0
    safe = np.where(pos, sigma, 1.0)
    z = (mu - y_max) / safe
    if kind == "PI":
        return np.where(pos, norm.cdf(z), (mu > y_max).astype(np.float64))
    if kind == "EI":
        ei = (mu - y_max) * norm.cdf(z) + safe * norm.pdf(z)
        return np.where(pos, ei, np.maximum(mu - y_max, 0.0))
    if kind == "ITS":
        if rng is None:
            raise ConfigError("ITS needs a random stream")
        return mu + sigma * rng.randn(mu.shape)
    if kind == "UCB":
        return mu + beta * sigma
    raise ConfigError(f"unknown acquisition {kind!r}; expected one of {ACQUISITIONS}")


@dataclass
class Population:
    entries: list[tuple[Architecture, float]] = field(default_factory=list)

    def add(self, a: Architecture, y: float) -> None:
        self.entries.append((a, float(y)))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def y_max(self) -> float:
        return max(y for _, y in self.entries)

    @property
    def best(self) -> Architecture:
        return max(self.entries, key=lambda item: item[1])[0]

    def keys(self) -> set[str]:
        return {a.key for a, _ in self.entries}


@dataclass(frozen=True)
class BoConfig:
    n0: int = 10
    budget: int = 40
    candidates: int = 16
    acq: str = "PI"
    beta: float = 1.0
    strategy: str = "guided"
    ensemble_size: int = 5
    ensemble_steps: int = 150
    # guided generation
    guide_k: float = 1.0
    guide_mode: str = "gaussian"
    guide_target_margin: float = 0.0
    guide_fit_steps: int = 400
    sampler_steps: int = 200
    threads: int = 1

    def __post_init__(self):
        if self.n0 < 1:
            raise ConfigError("n0 must be >= 1")
        if self.budget <= self.n0:
            raise ConfigError("budget N must exceed n0")
        if self.candidates < 1:
            raise ConfigError("need at least one candidate per iteration")
        if self.acq not in ACQUISITIONS:
            raise ConfigError(f"unknown acquisition {self.acq!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.ensemble_size < 2:
            raise ConfigError("ensemble size must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BoContext:
    """Models and settings shared by every iteration."""

    space: SearchSpaceSpec
    predictor_config: PredictorConfig
    sde: VeSde
    score_net: ScoreNet | None = None


def _fresh(space, population_keys, taken, rng, make, attempts: int = 50):
    for _ in range(attempts):
        a = make()
        if a.key not in population_keys and a.key not in taken:
            return a
    return make()


def propose_candidates(strategy: str, population: Population, c: int, ctx: BoContext, config: BoConfig,
                       rng: Rng) -> list[Architecture]:
    """Exactly ``c`` candidates; already-evaluated architectures are replaced where possible."""
    space = ctx.space
    seen = population.keys()
    out: list[Architecture] = []
    taken: set[str] = set()

    def push(a):
        out.append(a)
        taken.add(a.key)

    def rand():
        return random_arch(space, rng)

    if strategy == "random":
        while len(out) < c:
            push(_fresh(space, seen, taken, rng, rand))
    elif strategy in ("mutation", "mutation+random"):
        best = population.best
        n_mut = c if strategy == "mutation" else math.ceil(c / 2)
        while len(out) < n_mut:
            push(_fresh(space, seen, taken, rng, lambda: mutate(best, rng)))
        while len(out) < c:
            push(_fresh(space, seen, taken, rng, rand))
    elif strategy == "guided":
        if ctx.score_net is None:
            raise ConfigError("guided strategy needs a trained score network")
        model = gaussian_fit(population.entries, ctx.predictor_config, space, ctx.sde, rng.child(1),
                             noise_aware=True, steps=config.guide_fit_steps)
        guidance = GuidanceConfig(k=config.guide_k, mode=config.guide_mode,
                                  target=min(1.0, population.y_max + config.guide_target_margin))
        samples = guided_sample_batch(ctx.score_net, model, guidance, space,
                                      SamplerConfig(num_steps=config.sampler_steps, threads=config.threads),
                                      rng.child(2), n_samples=c)
        for s in samples:
            a = discretize(s, space, "snap")
            if is_valid(a) and a.key not in seen:
                push(a)
        while len(out) < c:
            push(_fresh(space, seen, taken, rng, rand))
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    return out


@dataclass
class IterationRecord:
    iteration: int
    chosen_key: str
    y: float
    best_so_far: float
    wallclock_ms: float


@dataclass
class BoResult:
    best: Architecture
    best_y: float
    population: Population
    history: list[IterationRecord]

    def evaluations_to(self, key: str) -> int | None:
        """1-based evaluation count at which ``key`` entered the population."""
        for i, (a, _) in enumerate(self.population.entries, start=1):
            if a.key == key:
                return i
        return None


def bo_loop(space: SearchSpaceSpec, h: Callable[[Architecture], float], config: BoConfig, rng: Rng,
            ctx: BoContext) -> BoResult:
    pop = Population()
    history: list[IterationRecord] = []
    init_rng = rng.child(0)
    t_start = time.perf_counter()
    seen: set[str] = set()
    while len(pop) < config.n0:
        a = _fresh(space, seen, set(), init_rng, lambda: random_arch(space, init_rng))
        seen.add(a.key)
        pop.add(a, h(a))
        history.append(IterationRecord(len(pop), a.key, pop.entries[-1][1], pop.y_max,
                                       (time.perf_counter() - t_start) * 1e3))
    for n in range(config.n0, config.budget):
        it_rng = rng.child(1, n)
        ensemble = train_ensemble(pop.entries, ctx.predictor_config, space, ctx.sde, it_rng.child(0),
                                  size=config.ensemble_size, steps=config.ensemble_steps,
                                  threads=config.threads)
        cands = propose_candidates(config.strategy, pop, config.candidates, ctx, config, it_rng.child(1))
        mu, sigma = ensemble_stats(ensemble.member_predictions(cands))
        scores = acquisition(config.acq, mu, sigma, pop.y_max, config.beta, it_rng.child(2))
        choice = cands[int(np.argmax(scores))]
        pop.add(choice, h(choice))
        history.append(IterationRecord(n + 1, choice.key, pop.entries[-1][1], pop.y_max,
                                       (time.perf_counter() - t_start) * 1e3))
        log.debug("iteration %d: y=%.4f best=%.4f", n + 1, pop.entries[-1][1], pop.y_max)
    best, best_y = max(pop.entries, key=lambda item: item[1])
    return BoResult(best, best_y, pop, history)
