from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from archdiff.errors import NumericError

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | None = None) -> None:
    """In-place Adam update with bias correction.

    Non-finite gradients leave parameters and moments untouched, are counted
    in ``state.skipped`` and raise :class:`NumericError`.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
        if not np.isfinite(g).all():
            state.skipped += 1
            raise NumericError(f"non-finite gradient for {name}", step=state.step + 1)
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    f = max_norm / norm
    return {k: g * f for k, g in grads.items()}


def warmup_lr(base_lr: float, step: int, warmup: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` steps, constant afterwards."""
    if warmup <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup)


class Ema:
    """Exponential moving average of a parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], decay: float):
        self.decay = decay
        self.shadow = {k: v.copy() for k, v in params.items()}

    def update(self, params: dict[str, np.ndarray]) -> None:
        d = self.decay
        for k, v in params.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * v
