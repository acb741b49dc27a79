"""Variance-exploding SDE on architecture matrices.

dA = sigma_min (sigma_max/sigma_min)^t sqrt(2 log(sigma_max/sigma_min)) dw,
with Gaussian transition kernel N(A_0, sigma_t^2 I) where
sigma_t = sigma_min (sigma_max/sigma_min)^t.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from archdiff.archspace import ContinuousArchitecture, SearchSpaceSpec
from archdiff.errors import ConfigError, DimensionError, UsageError
from archdiff.numerics import Rng, Tensor, mean, scale, square, add


@dataclass(frozen=True)
class VeSdeConfig:
    sigma_min: float = 0.1
    sigma_max: float = 5.0
    num_steps: int = 1000
    eps: float = 1e-5

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("need 0 < sigma_min < sigma_max")
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if not 0 < self.eps < 1:
            raise ConfigError("eps must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class VeSde:
    def __init__(self, config: VeSdeConfig | None = None):
        self.config = config or VeSdeConfig()
        c = self.config
        self._ratio = c.sigma_max / c.sigma_min
        self._log_ratio = math.log(self._ratio)

    @staticmethod
    def _check_t(t) -> None:
        t = np.asarray(t)
        if (t < 0).any() or (t > 1).any():
            raise UsageError(f"diffusion time must lie in [0, 1], got {t}")

    def marginal_std(self, t):
        self._check_t(t)
        c = self.config
        if np.ndim(t) == 0:
            t = float(t)
            if t == 0.0:
                return c.sigma_min
            if t == 1.0:
                return c.sigma_max
            return c.sigma_min * self._ratio ** t
        return c.sigma_min * self._ratio ** np.asarray(t, dtype=np.float64)

    def diffusion_coeff(self, t):
        return self.marginal_std(t) * math.sqrt(2.0 * self._log_ratio)

    def drift(self, x):
        return np.zeros_like(x)

    def perturb(self, a0: ContinuousArchitecture, t: float, rng: Rng):
        """Sample A_t ~ N(A_0, sigma_t^2 I) over v and the strict upper triangle of e.

        Returns ``(a_t, (z_v, z_e))`` with the standard-normal noise used.
        """
        if not 0 < t <= 1:
            raise UsageError("perturb needs t in (0, 1]")
        s = self.marginal_std(t)
        n = a0.e.shape[0]
        z_v = rng.randn(a0.v.shape)
        z_e = rng.randn(a0.e.shape) * np.triu(np.ones((n, n)), k=1)
        return ContinuousArchitecture(a0.v + s * z_v, a0.e + s * z_e, t), (z_v, z_e)

    def perturb_batch(self, v0: np.ndarray, e0: np.ndarray, t: np.ndarray, rng: Rng):
        """Batched perturbation: v0 (B,N,F), e0 (B,N,N), t (B,)."""
        s = self.marginal_std(t)[:, None, None]
        n = e0.shape[-1]
        z_v = rng.randn(v0.shape)
        z_e = rng.randn(e0.shape) * np.triu(np.ones((n, n)), k=1)
        return v0 + s * z_v, e0 + s * z_e, z_v, z_e

    def prior_sample(self, space: SearchSpaceSpec, rng: Rng) -> ContinuousArchitecture:
        n, f = space.num_nodes, space.num_ops
        s = self.config.sigma_max
        v = s * rng.randn((n, f))
        e = s * rng.randn((n, n)) * space.upper_mask()
        return ContinuousArchitecture(v, e, 1.0)

    def sample_time(self, rng: Rng, size: int) -> np.ndarray:
        """t ~ Uniform(eps, 1]."""
        eps = self.config.eps
        return 1.0 - (1.0 - eps) * rng.uniform(size)


def dsm_loss(score_pred: Tensor, a_t, a0, sigma, weight=None) -> Tensor:
    """Denoising score matching with weight lambda(t) = sigma_t^2.

    ``score_pred``, ``a_t`` and ``a0`` share a shape; ``sigma`` is a scalar
    or broadcastable array. ``weight`` (0/1, broadcastable) selects the
    entries the diffusion acts on; the loss averages over selected entries:
    mean || sigma * s + (a_t - a0) / sigma ||^2.
    """
    a_t = np.asarray(a_t, dtype=np.float64)
    a0 = np.asarray(a0, dtype=np.float64)
    if score_pred.shape != a_t.shape or a_t.shape != a0.shape:
        raise DimensionError(f"dsm_loss shape mismatch: {score_pred.shape}, {a_t.shape}, {a0.shape}")
    sigma = np.asarray(sigma, dtype=np.float64)
    residual = add(score_pred * sigma, (a_t - a0) / sigma)
    if weight is None:
        return mean(square(residual))
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), a_t.shape)
    return scale((square(residual) * w).sum(), 1.0 / w.sum())
