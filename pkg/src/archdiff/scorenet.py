"""Masked-transformer score network for architecture matrices.

Node i enters as Emb_ops(v_i) + Emb_pos(i) + Emb_time(t). L blocks of
multi-head attention, masked by the adjacency (plus self-attention), each
followed by a two-layer ReLU feed-forward map; the blocks carry no residual
connections or normalisation. An MLP head maps H_L to the v-score and a
bilinear pairwise head gives the e-score.

The raw network output F is turned into a score through the usual VE
preconditioning with data scale ``sigma_data``::

    D = c_skip * x + c_out * F(c_in * x, t),   score = (D - x) / sigma_t^2
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from archdiff import numerics as nx
from archdiff.archspace import Architecture, SearchSpaceSpec
from archdiff.errors import ConfigError, NumericError, UsageError
from archdiff.numerics import MASK_VALUE, Rng, Tensor
from archdiff.sde import VeSde

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreNetConfig:
    num_blocks: int = 12
    num_heads: int = 8
    model_dim: int = 64
    ffn_dim: int = 128
    dropout: float = 0.1
    time_dim: int = 16
    sigma_data: float = 0.5
    use_pos_emb: bool = True
    # training
    lr: float = 2e-5
    batch_size: int = 256
    warmup: int = 1000
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    steps: int = 3000
    init_seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ConfigError("model_dim must be divisible by num_heads")
        if min(self.num_blocks, self.num_heads, self.model_dim, self.ffn_dim, self.time_dim) <= 0:
            raise ConfigError("score network dimensions must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    @classmethod
    def full(cls, **kw) -> "ScoreNetConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "ScoreNetConfig":
        base = dict(num_blocks=3, num_heads=4, model_dim=32, ffn_dim=64, lr=2e-3, batch_size=64,
                    warmup=100, ema_decay=0.995, dropout=0.0)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown score network keys: {sorted(unknown)}")
        return cls(**d)


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of t (B,) -> (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def build_mask(e: np.ndarray) -> np.ndarray:
    """Additive attention mask: 0 where E_ij = 1 or i = j, -1e9 elsewhere."""
    e = np.asarray(e)
    n = e.shape[-1]
    allowed = (e > 0.5) | np.eye(n, dtype=bool)
    return np.where(allowed, 0.0, MASK_VALUE)


def _glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.randn((fan_in, fan_out)) * math.sqrt(2.0 / (fan_in + fan_out))


def init_params(config: ScoreNetConfig, space: SearchSpaceSpec, rng: Rng) -> dict[str, np.ndarray]:
    d, f, n = config.model_dim, space.num_ops, space.num_nodes
    p = {
        "emb.ops": _glorot(rng, f, d),
        "emb.pos": 0.1 * rng.randn((n, d)) if config.use_pos_emb else np.zeros((n, d)),
        "emb.time.w1": _glorot(rng, config.time_dim, d),
        "emb.time.b1": np.zeros(d),
        "emb.time.w2": _glorot(rng, d, d),
        "emb.time.b2": np.zeros(d),
    }
    for l in range(config.num_blocks):
        p[f"block{l}.wq"] = _glorot(rng, d, d)
        p[f"block{l}.wk"] = _glorot(rng, d, d)
        p[f"block{l}.wv"] = _glorot(rng, d, d)
        p[f"block{l}.w1"] = _glorot(rng, d, config.ffn_dim)
        p[f"block{l}.b1"] = np.zeros(config.ffn_dim)
        p[f"block{l}.w2"] = _glorot(rng, config.ffn_dim, d)
        p[f"block{l}.b2"] = np.zeros(d)
    p.update({
        "head.v.w1": _glorot(rng, d, d),
        "head.v.b1": np.zeros(d),
        "head.v.w2": _glorot(rng, d, f),
        "head.v.b2": np.zeros(f),
        "head.e.wa": _glorot(rng, d, d),
        "head.e.wb": _glorot(rng, d, d),
        "head.e.gain.w": np.zeros((d, 1)),
        "head.e.gain.b": np.zeros(1),
        "head.e.bias": np.zeros((n, n)),
    })
    return p


class ScoreNet:
    """Score model s(A_t, t) bound to a search space and parameter set."""

    def __init__(self, config: ScoreNetConfig, space: SearchSpaceSpec, params: dict[str, np.ndarray],
                 sde: VeSde | None = None):
        self.config = config
        self.space = space
        self.params = params
        self.sde = sde or VeSde()
        self._upper = space.upper_mask()
        self._template_mask = None if space.adjacency_template is None else build_mask(space.adjacency_template)

    @classmethod
    def create(cls, config: ScoreNetConfig, space: SearchSpaceSpec, sde: VeSde | None = None,
               rng: Rng | None = None) -> "ScoreNet":
        rng = rng or Rng(config.init_seed, 0)
        return cls(config, space, init_params(config, space, rng), sde)

    def attention_mask(self, e_t: np.ndarray) -> np.ndarray:
        if self._template_mask is not None:
            return self._template_mask
        return build_mask(e_t)[:, None, :, :]

    def _block(self, h: Tensor, l: int, mask: np.ndarray, p, training: bool, rng: Rng | None) -> Tensor:
        cfg = self.config
        b, n, d = h.shape
        nh = cfg.num_heads
        dk = d // nh

        def heads(x):
            return nx.transpose(nx.reshape(x, (b, n, nh, dk)), (0, 2, 1, 3))

        q = heads(h @ p[f"block{l}.wq"])
        k = heads(h @ p[f"block{l}.wk"])
        v = heads(h @ p[f"block{l}.wv"])
        scores = nx.scale(q @ nx.swapaxes(k, -1, -2), 1.0 / math.sqrt(d))
        att = nx.softmax(scores, mask)
        hh = nx.reshape(nx.transpose(att @ v, (0, 2, 1, 3)), (b, n, d))
        hid = nx.relu(hh @ p[f"block{l}.w1"] + p[f"block{l}.b1"])
        hid = nx.dropout(hid, cfg.dropout, rng, training)
        return hid @ p[f"block{l}.w2"] + p[f"block{l}.b2"]

    def network(self, v_in, e_in, t: np.ndarray, p, training: bool = False, rng: Rng | None = None,
                e_for_mask: np.ndarray | None = None, return_hidden: bool = False):
        """Raw network F on preconditioned inputs. Returns (F_v, F_e)."""
        cfg = self.config
        v_in = nx.as_tensor(v_in)
        e_in = nx.as_tensor(e_in)
        tf = time_features(t, cfg.time_dim)
        temb = nx.swish(nx.matmul(tf, p["emb.time.w1"]) + p["emb.time.b1"]) @ p["emb.time.w2"] + p["emb.time.b2"]
        b = v_in.shape[0]
        h = v_in @ p["emb.ops"] + nx.reshape(temb, (b, 1, cfg.model_dim))
        if cfg.use_pos_emb:
            h = h + p["emb.pos"]
        mask = self.attention_mask(e_in.data if e_for_mask is None else e_for_mask)
        hidden = [h]
        for l in range(cfg.num_blocks):
            h = self._block(h, l, mask, p, training, rng)
            hidden.append(h)
        f_v = nx.swish(h @ p["head.v.w1"] + p["head.v.b1"]) @ p["head.v.w2"] + p["head.v.b2"]
        ha = h @ p["head.e.wa"]
        hb = h @ p["head.e.wb"]
        pair = nx.scale(ha @ nx.swapaxes(hb, -1, -2), 1.0 / math.sqrt(cfg.model_dim))
        gain = nx.reshape(temb @ p["head.e.gain.w"] + p["head.e.gain.b"], (b, 1, 1))
        f_e = (pair + gain * e_in + p["head.e.bias"]) * self._upper
        if return_hidden:
            return f_v, f_e, hidden
        return f_v, f_e

    def score(self, v_t, e_t, t: np.ndarray, params=None, training: bool = False, rng: Rng | None = None):
        """Score estimate for a batch; v_t (B,N,F), e_t (B,N,N), t (B,). Returns (s_v, s_e)."""
        p = self.params if params is None else params
        cfg = self.config
        v_t = nx.as_tensor(v_t)
        e_t = nx.as_tensor(e_t)
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        sigma = self.sde.marginal_std(t)[:, None, None]
        sd2 = cfg.sigma_data ** 2
        c_in = 1.0 / np.sqrt(sigma ** 2 + sd2)
        c_skip = sd2 / (sigma ** 2 + sd2)
        c_out = sigma * cfg.sigma_data * c_in
        e_mask_src = (e_t.data > 0.5) * self._upper
        f_v, f_e = self.network(v_t * c_in, e_t * c_in, t, p, training, rng, e_for_mask=e_mask_src)
        inv_s2 = 1.0 / sigma ** 2
        s_v = (f_v * c_out + v_t * (c_skip - 1.0)) * inv_s2
        s_e = (f_e * c_out + e_t * ((c_skip - 1.0) * self._upper)) * inv_s2
        return s_v, s_e

    def __call__(self, v_t, e_t, t):
        with nx.no_grad():
            s_v, s_e = self.score(v_t, e_t, t)
        return s_v.data, s_e.data

    def with_params(self, params: dict[str, np.ndarray]) -> "ScoreNet":
        return ScoreNet(self.config, self.space, params, self.sde)


def param_tensors(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


@dataclass
class TrainResult:
    model: ScoreNet  # holds the EMA parameters
    raw_params: dict[str, np.ndarray]
    losses: list[float]
    skipped_steps: int = 0


def dataset_arrays(archs: list[Architecture]) -> tuple[np.ndarray, np.ndarray]:
    v = np.stack([a.v for a in archs]).astype(np.float64)
    e = np.stack([a.e for a in archs]).astype(np.float64)
    return v, e


def train(space: SearchSpaceSpec, archs: list[Architecture], config: ScoreNetConfig, sde: VeSde,
          rng: Rng, steps: int | None = None, callback=None) -> TrainResult:
    """Denoising score matching with Adam, linear warmup, norm clipping and EMA."""
    if not archs:
        raise UsageError("cannot train a score network on an empty dataset")
    steps = config.steps if steps is None else steps
    net = ScoreNet.create(config, space, sde, rng.child(0))
    params = net.params
    if not config.use_pos_emb:
        params.pop("emb.pos")
    v0_all, e0_all = dataset_arrays(archs)
    upper = space.upper_mask()
    count = space.num_nodes * space.num_ops + upper.sum()
    state = nx.AdamState(lr=config.lr)
    ema = nx.Ema(params, config.ema_decay)
    data_rng = rng.child(1)
    losses: list[float] = []
    skipped = 0
    for step in range(1, steps + 1):
        idx = data_rng.integers(0, len(archs), size=config.batch_size)
        v0, e0 = v0_all[idx], e0_all[idx]
        t = sde.sample_time(data_rng, config.batch_size)
        v_t, e_t, z_v, z_e = sde.perturb_batch(v0, e0, t, data_rng)
        sigma = sde.marginal_std(t)[:, None, None]
        pt = param_tensors(params)
        s_v, s_e = net.score(v_t, e_t, t, params=pt, training=True, rng=data_rng)
        r_v = s_v * sigma + z_v
        r_e = (s_e * sigma + z_e) * upper
        loss = nx.scale(nx.square(r_v).sum() + nx.square(r_e).sum(), 1.0 / (count * config.batch_size))
        gm = nx.backward(loss)
        grads = nx.clip_global_norm({k: gm[t_] for k, t_ in pt.items()}, config.grad_clip)
        try:
            nx.adam_step(params, grads, state, lr=nx.warmup_lr(config.lr, step, config.warmup))
        except NumericError as exc:
            skipped += 1
            log.warning("skipping score-net step: %s", exc)
            continue
        ema.update(params)
        losses.append(loss.item())
        if callback is not None:
            callback(step, loss.item())
    ema_params = dict(ema.shadow)
    if not config.use_pos_emb:
        ema_params["emb.pos"] = np.zeros((space.num_nodes, config.model_dim))
        params["emb.pos"] = ema_params["emb.pos"]
    return TrainResult(net.with_params(ema_params), params, losses, skipped)


def save(path, net: ScoreNet) -> None:
    from archdiff.numerics import checkpoint

    config = {"space": net.space.name, "scorenet": net.config.to_dict(), "sde": net.sde.config.to_dict()}
    checkpoint.save(path, net.params, config, kind="scorenet")


def load(path) -> ScoreNet:
    from archdiff.archspace import get_space
    from archdiff.numerics import checkpoint
    from archdiff.sde import VeSdeConfig

    params, config, kind = checkpoint.load(path)
    if kind != "scorenet":
        raise UsageError(f"{path} holds a {kind} checkpoint, not a score network")
    return ScoreNet(ScoreNetConfig.from_dict(config["scorenet"]), get_space(config["space"]), params,
                    VeSde(VeSdeConfig(**config["sde"])))
