"""Diffusion-policy baseline: epsilon-prediction DDPM training with a
deterministic strided (DDIM, eta = 0) sampler."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneSpec, backbone_backward, backbone_forward, init_backbone, sinusoidal_features
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ChunkArrays, NormStats, normalize, unnormalize
from .errors import ConfigurationError, ContractError, NumericalError, TrainingDiverged
from .nn import OptimState, ParamStore, TrainSchedule, adamw_step, cosine_lr, make_rng


@dataclass
class DdpmConfig:
    train_steps: int = 100
    eval_steps: int = 10
    beta_schedule: str = "squaredcos"
    ema_decay: float = 0.75
    obs_horizon: int = 2
    action_horizon: int = 8
    chunk_len: int = 16
    noise_emb_dim: int = 128
    keypose_emb_dim: int = 128
    clip_sample: bool = True

    def __post_init__(self):
        if not 1 <= self.eval_steps <= self.train_steps:
            raise ConfigurationError(f"need 1 <= eval_steps <= train_steps, got {self.eval_steps}/{self.train_steps}")
        if self.beta_schedule not in ("squaredcos", "linear"):
            raise ConfigurationError(f"unknown beta schedule {self.beta_schedule!r}")


def alpha_bars(cfg: DdpmConfig) -> np.ndarray:
    """``abar[t]`` for t = 0..train_steps with ``abar[0] = 1``."""
    T = cfg.train_steps
    if cfg.beta_schedule == "squaredcos":
        s = 0.008
        f = lambda u: math.cos((u + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
        betas = np.array([min(1 - f(t / T) / f((t - 1) / T), 0.999) for t in range(1, T + 1)])
    else:
        betas = np.linspace(1e-4, 0.02, T)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def sampling_steps(cfg: DdpmConfig) -> list[int]:
    """Evenly strided descending timesteps, e.g. 100, 90, ..., 10."""
    stride = cfg.train_steps / cfg.eval_steps
    return [int(round(cfg.train_steps - i * stride)) for i in range(cfg.eval_steps)]


def predict_x0(x_t, eps, abar_t):
    return (x_t - np.sqrt(1.0 - abar_t) * eps) / np.sqrt(abar_t)


def posterior_mean(x0, x_t, t: int, abar: np.ndarray):
    """Mean of q(x_{t-1} | x_t, x_0)."""
    beta_t = 1.0 - abar[t] / abar[t - 1]
    coef0 = np.sqrt(abar[t - 1]) * beta_t / (1.0 - abar[t])
    coeft = np.sqrt(1.0 - beta_t) * (1.0 - abar[t - 1]) / (1.0 - abar[t])
    return coef0 * x0 + coeft * x_t


@dataclass
class DdpmPolicy:
    params: ParamStore
    ema_params: ParamStore
    net: BackboneSpec
    cfg: DdpmConfig
    stats: NormStats | None = None
    nfe: int = 0
    train_steps: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def algo(self) -> str:
        return "ddpm"


def init_ddpm_policy(net: BackboneSpec, cfg: DdpmConfig, stats: NormStats | None = None, seed: int = 0) -> DdpmPolicy:
    params = init_backbone(net, seed)
    return DdpmPolicy(params, params.copy(), net, cfg, stats, seed=seed)


def _eps_net(params, net, x, t, obs, keypose, keep=False):
    b = x.shape[0]
    feats = sinusoidal_features(np.asarray(t, dtype=np.float64), net.noise_emb_dim)
    out, cache = backbone_forward(params, net, x.reshape(b, -1), feats, obs, keypose, keep=keep)
    return out.reshape(x.shape), cache


def ddpm_loss(params: ParamStore, net: BackboneSpec, cfg: DdpmConfig, batch: ChunkArrays, rng: np.random.Generator):
    """Mean squared error between predicted and injected noise, with gradient."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    abar = alpha_bars(cfg)
    a = batch.actions
    b = a.shape[0]
    t = rng.integers(1, cfg.train_steps + 1, size=b)
    eps = rng.standard_normal(a.shape)
    ab = abar[t][:, None, None]
    x_t = np.sqrt(ab) * a + np.sqrt(1.0 - ab) * eps
    kp = batch.keypose if net.uses_keypose else None
    pred, cache = _eps_net(params, net, x_t, t, batch.obs, kp, keep=True)
    resid = pred - eps
    loss = float(np.mean(resid**2))
    if not math.isfinite(loss):
        raise NumericalError("non-finite diffusion loss", layer="loss")
    g = (2.0 / resid.size) * resid.reshape(b, -1)
    return loss, backbone_backward(params, net, cache, g)


def train_ddpm(data: ChunkArrays, cfg: DdpmConfig, schedule: TrainSchedule, net: BackboneSpec,
               stats: NormStats | None = None, init_seed: int | None = None, callback=None):
    """Returns ``(policy, curve)``; sampling uses the EMA weights."""
    if len(data) == 0:
        raise ContractError("empty dataset")
    if schedule.iters is None:
        raise ConfigurationError("schedule.iters is required for DDPM training")
    seed = schedule.seed if init_seed is None else init_seed
    policy = init_ddpm_policy(net, cfg, stats, seed)
    opt = OptimState.for_params(policy.params, lr0=schedule.lr0, weight_decay=schedule.weight_decay)
    rng = make_rng(seed + 1)
    K = schedule.iters
    decay = cfg.ema_decay
    curve = []
    for k in range(K):
        idx = rng.integers(0, len(data), size=min(schedule.batch_size, len(data)))
        lr = cosine_lr(k, K, schedule.lr0)
        try:
            loss, grads = ddpm_loss(policy.params, net, cfg, data.take(idx), rng)
            adamw_step(policy.params, grads, opt, lr)
        except NumericalError as exc:
            raise TrainingDiverged(f"diverged at iteration {k}: {exc}", last_good=policy, iteration=k) from None
        for name, p in policy.params.items():
            e = policy.ema_params[name]
            e *= decay
            e += (1.0 - decay) * p
        policy.train_steps = k + 1
        curve.append({"iter": k, "loss": loss, "lr": lr})
        if callback is not None:
            callback(k, loss)
    return policy, curve


def ddim_sample(policy: DdpmPolicy, obs_history, keypose=None, rng: np.random.Generator | None = None,
                n: int | None = None, x_init=None) -> np.ndarray:
    """Deterministic strided sampling with exactly ``eval_steps`` network calls.

    Inputs are raw; the chunk (H_a, A) is returned in raw units.
    """
    cfg, net = policy.cfg, policy.net
    if not 1 <= cfg.eval_steps <= cfg.train_steps:
        raise ConfigurationError(f"eval_steps={cfg.eval_steps} exceeds train_steps={cfg.train_steps}")
    if policy.stats is None:
        raise ConfigurationError("policy has no normalisation stats")
    rng = rng if rng is not None else make_rng(0)
    m = 1 if n is None else n
    obs = np.repeat(normalize(obs_history, policy.stats, "obs").reshape(1, -1), m, axis=0)
    kp = None
    if net.uses_keypose:
        if keypose is None:
            raise ConfigurationError("policy is keypose-conditioned but no keypose was given")
        kp = np.repeat(normalize(keypose, policy.stats, "kp").reshape(1, -1), m, axis=0)
    x = rng.standard_normal((m, net.action_horizon, net.action_dim)) if x_init is None else np.array(x_init, dtype=np.float64).reshape(m, net.action_horizon, net.action_dim)
    x = denoise_loop(policy, x, obs, kp)
    chunks = unnormalize(x, policy.stats, "act")
    return chunks[0] if n is None else chunks


def denoise_loop(policy: DdpmPolicy, x, obs, kp, eps_fn=None):
    """Run the strided deterministic sampler from ``x`` in normalised space.

    ``eps_fn(x, t)`` replaces the network when given (used with oracles).
    """
    cfg = policy.cfg
    abar = alpha_bars(cfg)
    steps = sampling_steps(cfg)
    stride = cfg.train_steps / cfg.eval_steps
    for t in steps:
        if eps_fn is None:
            policy.nfe += 1
            eps, _ = _eps_net(policy.ema_params, policy.net, x, np.full(x.shape[0], t), obs, kp)
        else:
            eps = eps_fn(x, t)
        x0 = predict_x0(x, eps, abar[t])
        if cfg.clip_sample:
            x0 = np.clip(x0, -1.0, 1.0)
            eps = (x - np.sqrt(abar[t]) * x0) / np.sqrt(1.0 - abar[t])
        prev = max(int(round(t - stride)), 0)
        x = np.sqrt(abar[prev]) * x0 + np.sqrt(1.0 - abar[prev]) * eps
    return x


def save_ddpm(path, policy: DdpmPolicy, extra: dict | None = None) -> Path:
    header = {
        "kind": "ddpm",
        "net": policy.net.to_dict(),
        "cfg": asdict(policy.cfg),
        "ddpm": {"train_steps": policy.cfg.train_steps, "eval_steps": policy.cfg.eval_steps,
                 "beta_schedule": policy.cfg.beta_schedule, "ema_decay": policy.cfg.ema_decay},
        "norm_stats": policy.stats.to_dict() if policy.stats is not None else None,
        "seed": policy.seed,
        "train_steps": policy.train_steps,
        "meta": policy.meta,
    }
    header.update(extra or {})
    return save_checkpoint(path, {"params": policy.params, "ema": policy.ema_params}, header)


def load_ddpm(path, eval_steps: int | None = None) -> DdpmPolicy:
    stores, header = load_checkpoint(path)
    if header.get("kind") != "ddpm":
        raise ConfigurationError(f"{path} is not a DDPM checkpoint")
    cfg_d = dict(header["cfg"])
    if eval_steps is not None:
        cfg_d["eval_steps"] = eval_steps
    cfg = DdpmConfig(**cfg_d)
    net = BackboneSpec.from_dict(header["net"])
    stats = NormStats.from_dict(header["norm_stats"]) if header.get("norm_stats") else None
    return DdpmPolicy(stores["params"], stores["ema"], net, cfg, stats, train_steps=header.get("train_steps", 0),
                      seed=header.get("seed", 0), meta=header.get("meta", {}))
