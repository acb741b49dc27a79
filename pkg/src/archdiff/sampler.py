"""Reverse-time Euler-Maruyama sampling with optional Langevin corrector and predictor guidance.

Chains are processed in fixed-size chunks; each chain draws all of its noise
from its own stream (``rng.child(chain_index)``), so the output does not
depend on the chunking schedule or on how many worker threads run it.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from archdiff.archspace import ContinuousArchitecture, SearchSpaceSpec
from archdiff.errors import ConfigError, NumericError
from archdiff.numerics import Rng
from archdiff.predictor import Predictor, TaskDataset
from archdiff.scorenet import ScoreNet

CHUNK = 32


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 1000
    corrector: bool = False
    corrector_snr: float = 0.16
    batch_size: int = 256
    denoise_final: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if self.corrector_snr <= 0:
            raise ConfigError("corrector_snr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GuidanceConfig:
    k: float = 1.0
    mode: str = "log_prob"
    target: float = 1.0
    sigma: float | None = None
    weights: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if not (self.k >= 0 and math.isfinite(self.k)):
            raise ConfigError("guidance scale k must be finite and >= 0")
        if self.mode not in ("log_prob", "value", "gaussian"):
            raise ConfigError(f"unknown guidance mode {self.mode!r}")
        if any(not math.isfinite(w) for w in self.weights):
            raise ConfigError("guidance weights must be finite")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d


def reverse_step(x: np.ndarray, score: np.ndarray, g: float, dt: float, z: np.ndarray | None,
                 structure: np.ndarray | float = 1.0) -> np.ndarray:
    """One Euler-Maruyama step of the reverse VE SDE (zero drift).

    x_{t-dt} = x_t + g^2 score dt + g sqrt(dt) z; ``structure`` zeroes
    entries outside the diffused region. ``z=None`` gives the pure drift step.
    """
    out = x + (g * g * dt) * score
    if z is not None:
        out = out + (g * math.sqrt(dt)) * z
    return out * structure


def corrector_step(x: np.ndarray, score: np.ndarray, snr: float, z: np.ndarray,
                   structure: np.ndarray | float = 1.0) -> np.ndarray:
    """Langevin update per chain (leading axis): x + eps score + sqrt(2 eps) z,
    eps = 2 (snr ||z|| / ||score||)^2. Chains with zero score are left unchanged."""
    if snr <= 0:
        raise ConfigError("snr must be positive")
    axes = tuple(range(1, x.ndim))
    s_norm = np.sqrt((score ** 2).sum(axis=axes, keepdims=True))
    z_norm = np.sqrt((z ** 2).sum(axis=axes, keepdims=True))
    safe = np.where(s_norm > 0, s_norm, 1.0)
    step = np.where(s_norm > 0, 2.0 * (snr * z_norm / safe) ** 2, 0.0)
    return (x + step * score + np.sqrt(2.0 * step) * z) * structure


class _Chains:
    """Noise source for a chunk of chains, one stream per chain."""

    def __init__(self, rng: Rng, indices: list[int]):
        self.rngs = [rng.child(i) for i in indices]

    def normal(self, shape) -> np.ndarray:
        return np.stack([r.randn(shape) for r in self.rngs])


def _guidance_term(predictors, guidance: GuidanceConfig, v, e, t, dataset, step_index):
    weights = guidance.weights or (1.0,) * len(predictors)
    gv = np.zeros_like(v)
    ge = np.zeros_like(e)
    for pred, w in zip(predictors, weights):
        dv, de, _ = pred.guidance_grad(v, e, t, guidance.mode, guidance.target, guidance.sigma,
                                       dataset if pred.dataset_aware else None)
        gv += w * dv
        ge += w * de
    if not (np.isfinite(gv).all() and np.isfinite(ge).all()):
        raise NumericError("non-finite guidance gradient", step=step_index)
    return guidance.k * gv, guidance.k * ge


def _run_chunk(net: ScoreNet, space: SearchSpaceSpec, cfg: SamplerConfig, rng: Rng, indices: list[int],
               predictors, guidance: GuidanceConfig | None, dataset: TaskDataset | None):
    sde = net.sde
    n, f = space.num_nodes, space.num_ops
    upper = space.upper_mask()
    chains = _Chains(rng, indices)
    b = len(indices)
    sigma_max = sde.config.sigma_max
    v = sigma_max * chains.normal((n, f))
    e = sigma_max * chains.normal((n, n)) * upper
    eps = sde.config.eps
    k_steps = cfg.num_steps
    dt = (1.0 - eps) / k_steps
    guided = guidance is not None and guidance.k > 0 and predictors
    for i in range(k_steps):
        t = 1.0 - i * dt
        tb = np.full(b, t)
        g = sde.diffusion_coeff(t)
        if cfg.corrector:
            s_v, s_e = _total_score(net, predictors, guidance, v, e, tb, dataset, i, guided)
            zc_v, zc_e = chains.normal((n, f)), chains.normal((n, n)) * upper
            v = corrector_step(v, s_v, cfg.corrector_snr, zc_v)
            e = corrector_step(e, s_e, cfg.corrector_snr, zc_e, upper)
        s_v, s_e = _total_score(net, predictors, guidance, v, e, tb, dataset, i, guided)
        z_v = chains.normal((n, f))
        z_e = chains.normal((n, n)) * upper
        last = i == k_steps - 1
        if last and cfg.denoise_final:
            v = reverse_step(v, s_v, g, dt, None)
            e = reverse_step(e, s_e, g, dt, None, upper)
        else:
            v = reverse_step(v, s_v, g, dt, z_v)
            e = reverse_step(e, s_e, g, dt, z_e, upper)
        if not (np.isfinite(v).all() and np.isfinite(e).all()):
            raise NumericError("sampler state became non-finite", step=i)
    return v, e


def _total_score(net, predictors, guidance, v, e, tb, dataset, step_index, guided):
    s_v, s_e = net(v, e, tb)
    if guided:
        gv, ge = _guidance_term(predictors, guidance, v, e, tb, dataset, step_index)
        s_v = s_v + gv
        s_e = s_e + ge * net.space.upper_mask()
    return s_v, s_e


def _sample(net, space, cfg, rng, n_samples, predictors, guidance, dataset):
    n_samples = cfg.batch_size if n_samples is None else n_samples
    chunks = [list(range(s, min(s + CHUNK, n_samples))) for s in range(0, n_samples, CHUNK)]

    def job(idx):
        return _run_chunk(net, space, cfg, rng, idx, predictors, guidance, dataset)

    if cfg.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(job, chunks))
    else:
        results = [job(c) for c in chunks]
    eps = net.sde.config.eps
    out = []
    for v, e in results:
        for j in range(v.shape[0]):
            out.append(ContinuousArchitecture(v[j], e[j], eps))
    return out


def sample_batch(net: ScoreNet, space: SearchSpaceSpec, cfg: SamplerConfig, rng: Rng,
                 n_samples: int | None = None) -> list[ContinuousArchitecture]:
    """Unconditional samples at t = eps, ordered by chain index."""
    return _sample(net, space, cfg, rng, n_samples, [], None, None)


def guided_sample_batch(net: ScoreNet, predictors: Predictor | list[Predictor], guidance: GuidanceConfig,
                        space: SearchSpaceSpec, cfg: SamplerConfig, rng: Rng, n_samples: int | None = None,
                        dataset: TaskDataset | None = None) -> list[ContinuousArchitecture]:
    """Samples whose reverse drift uses score + k * sum_j w_j grad G_j."""
    if isinstance(predictors, Predictor):
        predictors = [predictors]
    if guidance.weights and len(guidance.weights) != len(predictors):
        raise ConfigError("one guidance weight per predictor is required")
    return _sample(net, space, cfg, rng, n_samples, list(predictors), guidance, dataset)


def stack(samples: list[ContinuousArchitecture]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.v for s in samples]), np.stack([s.e for s in samples])
