"""Time-conditioned property predictors f(y | A_t).

Architecture encoder: DiGCN layers
    H^l = 1/2 ReLU(Ê H^{l-1} W+) + 1/2 ReLU(Êᵀ H^{l-1} W-)
with Ê = D^-1 (E + I) row-normalised, H^0 the (input-scaled) operator
matrix plus a time embedding, followed by mean pooling and an MLP.
An optional dataset encoder averages instance vectors into class
prototypes, averages the prototypes and maps the result through an MLP.
The head is sigmoid(MLP([z_A ; z_D])).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from archdiff import numerics as nx
from archdiff.archspace import Architecture, SearchSpaceSpec
from archdiff.errors import ConfigError, NumericError, UsageError
from archdiff.numerics import Rng, Tensor
from archdiff.scorenet import time_features
from archdiff.sde import VeSde

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PredictorConfig:
    num_digcn_layers: int = 4
    digcn_hidden: int = 144
    mlp_hidden: int = 32
    dataset_hidden: int = 56
    instances_per_class: int = 20
    feature_dim: int = 16
    time_dim: int = 16
    sigma_data: float = 0.5
    dropout: float = 0.1
    lr: float = 1e-3
    batch_size: int = 256
    grad_clip: float = 1.0
    steps: int = 2000
    dataset_aware: bool = False

    def __post_init__(self):
        dims = (self.num_digcn_layers, self.digcn_hidden, self.mlp_hidden, self.dataset_hidden,
                self.instances_per_class, self.feature_dim, self.time_dim)
        if min(dims) <= 0:
            raise ConfigError("predictor dimensions must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    @classmethod
    def desk(cls, **kw) -> "PredictorConfig":
        base = dict(num_digcn_layers=2, digcn_hidden=32, mlp_hidden=32, dataset_hidden=32, dropout=0.0,
                    lr=3e-3, batch_size=128, steps=1500)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown predictor keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TaskDataset:
    """Per-class instance feature vectors; every class has the same instance count."""

    classes: list[np.ndarray]
    name: str = ""

    def __post_init__(self):
        self.classes = [np.asarray(c, dtype=np.float64) for c in self.classes]
        if not self.classes:
            raise UsageError("a task dataset needs at least one class")
        n = self.classes[0].shape[0]
        for c in self.classes:
            if c.ndim != 2 or c.shape[0] == 0:
                raise UsageError("every class needs a non-empty (instances, features) array")
            if c.shape[0] != n:
                raise UsageError("every class must hold the same number of instances")

    @property
    def instances_per_class(self) -> int:
        return self.classes[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.classes[0].shape[1]


def normalize_adjacency(e: np.ndarray) -> np.ndarray:
    """D^-1 (E + I) with D the out-degree plus one (rows sum to 1)."""
    e = np.asarray(e, dtype=np.float64)
    a = e + np.eye(e.shape[-1])
    return a / a.sum(axis=-1, keepdims=True)


def _order_free_mean(x: np.ndarray) -> np.ndarray:
    # sorting each column first makes the sum independent of row order
    return np.sort(x, axis=0).sum(axis=0) / x.shape[0]


def dataset_summary(d: TaskDataset) -> np.ndarray:
    """Mean over classes of the per-class mean instance vector."""
    protos = np.stack([_order_free_mean(c) for c in d.classes])
    return _order_free_mean(protos)


def _glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.randn((fan_in, fan_out)) * math.sqrt(2.0 / (fan_in + fan_out))


def init_params(config: PredictorConfig, space: SearchSpaceSpec, rng: Rng) -> dict[str, np.ndarray]:
    f, h = space.num_ops, config.digcn_hidden
    p = {
        "time.w": _glorot(rng, config.time_dim, f),
        "time.b": np.zeros(f),
    }
    fan_in = f
    for l in range(config.num_digcn_layers):
        p[f"digcn{l}.w_plus"] = _glorot(rng, fan_in, h)
        p[f"digcn{l}.w_minus"] = _glorot(rng, fan_in, h)
        fan_in = h
    p["arch.w"] = _glorot(rng, h, config.mlp_hidden)
    p["arch.b"] = np.zeros(config.mlp_hidden)
    head_in = config.mlp_hidden
    if config.dataset_aware:
        dh = config.dataset_hidden
        p["data.w1"] = _glorot(rng, config.feature_dim, dh)
        p["data.b1"] = np.zeros(dh)
        p["data.w2"] = _glorot(rng, dh, dh)
        p["data.b2"] = np.zeros(dh)
        head_in += dh
    p["head.w1"] = _glorot(rng, head_in, config.mlp_hidden)
    p["head.b1"] = np.zeros(config.mlp_hidden)
    p["head.w2"] = _glorot(rng, config.mlp_hidden, 1)
    p["head.b2"] = np.zeros(1)
    return p


class Predictor:
    """A trained (or freshly initialised) property predictor."""

    def __init__(self, config: PredictorConfig, space: SearchSpaceSpec, params: dict[str, np.ndarray],
                 sde: VeSde | None = None, log_var: float | None = None):
        self.config = config
        self.space = space
        self.params = params
        self.sde = sde or VeSde()
        self.log_var = log_var  # set by gaussian_fit
        self._e_hat = None if space.adjacency_template is None else normalize_adjacency(space.adjacency_template)

    @classmethod
    def create(cls, config: PredictorConfig, space: SearchSpaceSpec, sde: VeSde | None = None,
               rng: Rng | None = None) -> "Predictor":
        return cls(config, space, init_params(config, space, rng or Rng(0)), sde)

    @property
    def dataset_aware(self) -> bool:
        return self.config.dataset_aware

    @property
    def sigma(self) -> float | None:
        return None if self.log_var is None else math.exp(0.5 * self.log_var)

    def adjacency(self, e_t: np.ndarray) -> np.ndarray:
        if self._e_hat is not None:
            return self._e_hat
        return normalize_adjacency((np.asarray(e_t) > 0.5) * self.space.upper_mask())

    def encode_arch(self, v_t, e_t, t: np.ndarray, p=None, training: bool = False, rng: Rng | None = None,
                    swap_branches: bool = False) -> Tensor:
        """z_A for a batch; v_t (B,N,F), e_t (B,N,N), t (B,)."""
        p = self.params if p is None else p
        cfg = self.config
        v_t = nx.as_tensor(v_t)
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        sigma = self.sde.marginal_std(t)[:, None, None]
        c_in = 1.0 / np.sqrt(sigma ** 2 + cfg.sigma_data ** 2)
        b = v_t.shape[0]
        temb = nx.matmul(time_features(t, cfg.time_dim), p["time.w"]) + p["time.b"]
        h = v_t * c_in + nx.reshape(temb, (b, 1, self.space.num_ops))
        e_hat = self.adjacency(nx.as_tensor(e_t).data)
        e_hat_t = np.swapaxes(e_hat, -1, -2)
        fwd, rev = (e_hat_t, e_hat) if swap_branches else (e_hat, e_hat_t)
        for l in range(cfg.num_digcn_layers):
            wp, wm = p[f"digcn{l}.w_plus"], p[f"digcn{l}.w_minus"]
            if swap_branches:
                wp, wm = wm, wp
            h = nx.scale(nx.relu(fwd @ h @ wp) + nx.relu(rev @ h @ wm), 0.5)
        pooled = nx.mean(h, axis=1)
        z = nx.swish(pooled @ p["arch.w"] + p["arch.b"])
        return nx.dropout(z, cfg.dropout, rng, training)

    def encode_dataset(self, d: TaskDataset, p=None) -> Tensor:
        p = self.params if p is None else p
        if d.feature_dim != self.config.feature_dim:
            raise UsageError(f"dataset features have dim {d.feature_dim}, predictor expects {self.config.feature_dim}")
        s = dataset_summary(d)[None, :]
        hid = nx.swish(nx.matmul(s, p["data.w1"]) + p["data.b1"])
        return nx.reshape(hid @ p["data.w2"] + p["data.b2"], (-1,))

    def logits(self, v_t, e_t, t, dataset: TaskDataset | list[TaskDataset] | None = None, p=None,
               training: bool = False, rng: Rng | None = None) -> Tensor:
        p = self.params if p is None else p
        if self.dataset_aware != (dataset is not None):
            raise UsageError("dataset conditioning does not match how the predictor was built")
        z = self.encode_arch(v_t, e_t, t, p, training, rng)
        if dataset is not None:
            b = z.shape[0]
            if isinstance(dataset, TaskDataset):
                zd = nx.reshape(self.encode_dataset(dataset, p), (1, -1))
                zd = nx.matmul(np.ones((b, 1)), zd)
            else:
                zd = _stack_rows([self.encode_dataset(d, p) for d in dataset])
            z = nx.concat([z, zd], axis=1)
        hid = nx.swish(z @ p["head.w1"] + p["head.b1"])
        return nx.reshape(hid @ p["head.w2"] + p["head.b2"], (-1,))

    def predict(self, v_t, e_t, t, dataset=None, p=None, training: bool = False, rng: Rng | None = None) -> Tensor:
        """ŷ in (0, 1) for a batch, differentiable wrt v_t when it is a tensor."""
        return nx.sigmoid(self.logits(v_t, e_t, t, dataset, p, training, rng))

    def predict_archs(self, archs: list[Architecture], dataset: TaskDataset | None = None) -> np.ndarray:
        """Clean-input predictions at t = eps."""
        v = np.stack([a.v for a in archs]).astype(np.float64)
        e = np.stack([a.e for a in archs]).astype(np.float64)
        t = np.full(len(archs), self.sde.config.eps)
        with nx.no_grad():
            return self.predict(v, e, t, dataset).data.copy()

    def guidance_grad(self, v_t: np.ndarray, e_t: np.ndarray, t: np.ndarray, mode: str = "log_prob",
                      target: float = 1.0, sigma: float | None = None,
                      dataset: TaskDataset | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gradient of the per-sample guidance objective wrt (v_t, e_t).

        Modes: ``log_prob`` -> log ŷ, ``value`` -> ŷ, ``gaussian`` ->
        log N(target; ŷ, sigma^2). Returns (grad_v, grad_e, ŷ).
        """
        vt = Tensor(v_t, requires_grad=True)
        y = self.predict(vt, e_t, t, dataset)
        if mode == "log_prob":
            obj = nx.log(y).sum()
        elif mode == "value":
            obj = y.sum()
        elif mode == "gaussian":
            s = sigma if sigma is not None else self.sigma
            if s is None or s <= 0:
                raise UsageError("gaussian guidance needs a positive sigma (run gaussian_fit or pass one)")
            obj = nx.scale(nx.square(nx.sub(y, target)).sum(), -0.5 / s ** 2)
        else:
            raise UsageError(f"unknown guidance mode {mode!r}")
        gm = nx.backward(obj)
        # the adjacency enters only through a fixed template or a hard threshold
        return gm[vt], np.zeros_like(e_t), y.data.copy()

    def with_params(self, params, log_var=None) -> "Predictor":
        return Predictor(self.config, self.space, params, self.sde, log_var)


def _stack_rows(rows: list[Tensor]) -> Tensor:
    return nx.concat([nx.reshape(r, (1, -1)) for r in rows], axis=0)


def _population_arrays(population):
    archs = [item[0] for item in population]
    y = np.array([float(item[1]) for item in population])
    datasets = [item[2] for item in population] if len(population[0]) > 2 else None
    v = np.stack([a.v for a in archs]).astype(np.float64)
    e = np.stack([a.e for a in archs]).astype(np.float64)
    return v, e, y, datasets


def train_predictor(population, config: PredictorConfig, space: SearchSpaceSpec, noise_aware: bool,
                    sde: VeSde, rng: Rng, steps: int | None = None, gaussian: bool = False) -> Predictor:
    """Fit ŷ(A_t, t) to y by MSE (or Gaussian NLL when ``gaussian``).

    ``population`` holds (Architecture, y) or (Architecture, y, TaskDataset)
    entries with y in [0, 1]. Noise-aware training perturbs every example at
    a fresh t ~ U(eps, 1] per step; otherwise inputs are clean at t = eps.
    """
    if not population:
        raise UsageError("cannot train a predictor on an empty population")
    v0_all, e0_all, y_all, datasets = _population_arrays(population)
    if (y_all < 0).any() or (y_all > 1).any():
        raise UsageError("predictor targets must lie in [0, 1]")
    if config.dataset_aware != (datasets is not None):
        raise UsageError("dataset-aware predictors need (arch, y, dataset) triples")
    steps = config.steps if steps is None else steps
    model = Predictor.create(config, space, sde, rng.child(0))
    params = model.params
    log_var = np.array([math.log(max(float(np.var(y_all)), 1e-4))]) if gaussian else None
    if gaussian:
        params["gauss.log_var"] = log_var
    state = nx.AdamState(lr=config.lr)
    data_rng = rng.child(1)
    n = len(population)
    eps = sde.config.eps
    full_batch = n <= config.batch_size
    for step in range(1, steps + 1):
        idx = np.arange(n) if full_batch else data_rng.integers(0, n, size=config.batch_size)
        v0, e0, y = v0_all[idx], e0_all[idx], y_all[idx]
        ds = None if datasets is None else [datasets[i] for i in idx]
        if noise_aware:
            t = sde.sample_time(data_rng, len(idx))
            v_t, e_t, _, _ = sde.perturb_batch(v0, e0, t, data_rng)
        else:
            t = np.full(len(idx), eps)
            v_t, e_t = v0, e0
        pt = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        y_hat = model.predict(v_t, e_t, t, ds, p=pt, training=True, rng=data_rng)
        if gaussian:
            lv = pt["gauss.log_var"]
            sq = nx.square(nx.sub(y_hat, y))
            nll = nx.mean(sq * nx.exp(-lv)) * 0.5 + nx.scale(lv, 0.5).sum()
            loss = nll
        else:
            loss = nx.mse(y_hat, y)
        gm = nx.backward(loss)
        grads = nx.clip_global_norm({k: gm[t_] for k, t_ in pt.items()}, config.grad_clip)
        try:
            nx.adam_step(params, grads, state)
        except NumericError as exc:
            log.warning("skipping predictor step: %s", exc)
    lv_out = None
    if gaussian:
        lv_out = float(params.pop("gauss.log_var")[0])
    return model.with_params(params, lv_out)


def gaussian_nll(model: Predictor, population, dataset=None) -> float:
    """Mean negative log-likelihood of clean observations under N(ŷ, sigma^2)."""
    if model.log_var is None:
        raise UsageError("model has no fitted variance")
    archs = [p[0] for p in population]
    y = np.array([float(p[1]) for p in population])
    y_hat = model.predict_archs(archs, dataset)
    var = math.exp(model.log_var)
    return float(np.mean(0.5 * math.log(2 * math.pi * var) + (y - y_hat) ** 2 / (2 * var)))


def gaussian_fit(population, config: PredictorConfig, space: SearchSpaceSpec, sde: VeSde, rng: Rng,
                 noise_aware: bool = True, steps: int | None = None) -> Predictor:
    """Fit p(y | A) = N(y; ŷ(A), sigma^2) with a single learned log-variance by minimising NLL."""
    if len(population) < 2:
        raise UsageError("gaussian_fit needs at least two observations")
    return train_predictor(population, config, space, noise_aware, sde, rng, steps=steps, gaussian=True)


class PredictorEnsemble:
    def __init__(self, members: list[Predictor]):
        if len(members) < 2:
            raise UsageError("an ensemble needs at least two members")
        self.members = members

    def __len__(self) -> int:
        return len(self.members)

    def member_predictions(self, archs: list[Architecture], dataset=None) -> np.ndarray:
        """(M, len(archs)) array of clean predictions."""
        return np.stack([m.predict_archs(archs, dataset) for m in self.members])


def train_ensemble(population, config: PredictorConfig, space: SearchSpaceSpec, sde: VeSde, rng: Rng,
                   size: int = 5, noise_aware: bool = False, steps: int | None = None,
                   threads: int = 1) -> PredictorEnsemble:
    """Train ``size`` members from independent seed streams; results do not depend on ``threads``."""
    def job(m):
        return train_predictor(population, config, space, noise_aware, sde, rng.child(100 + m), steps=steps)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            members = list(pool.map(job, range(size)))
    else:
        members = [job(m) for m in range(size)]
    return PredictorEnsemble(members)


def ensemble_stats(member_preds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and Bessel-corrected std over the member axis (axis 0)."""
    member_preds = np.asarray(member_preds, dtype=np.float64)
    if member_preds.shape[0] < 2:
        raise UsageError("ensemble statistics need at least two members")
    mu = member_preds.mean(axis=0)
    sigma = member_preds.std(axis=0, ddof=1)
    return mu, sigma


def save(path, model: Predictor) -> None:
    from archdiff.numerics import checkpoint

    config = {"space": model.space.name, "predictor": model.config.to_dict(),
              "sde": model.sde.config.to_dict(), "log_var": model.log_var}
    checkpoint.save(path, model.params, config, kind="predictor")


def load(path) -> Predictor:
    from archdiff.archspace import get_space
    from archdiff.numerics import checkpoint
    from archdiff.sde import VeSdeConfig

    params, config, kind = checkpoint.load(path)
    if kind != "predictor":
        raise UsageError(f"{path} holds a {kind} checkpoint, not a predictor")
    return Predictor(PredictorConfig.from_dict(config["predictor"]), get_space(config["space"]), params,
                     VeSde(VeSdeConfig(**config["sde"])), config.get("log_var"))
