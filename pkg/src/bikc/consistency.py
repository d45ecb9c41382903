"""Consistency-model action-chunk generator trained from scratch.

The network ``F`` is wrapped as ``f(x, s) = c_skip(s) x + c_out(s) F(c_in(s) x, s)``
so that ``f(x, eps) = x`` holds for any parameters. Training enforces
agreement between adjacent noise levels of a Karras discretisation whose
size follows a step-doubling curriculum; sampling is a single network
evaluation at ``sigma_max``.
"""

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


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: np.ndarray
    eps: float
    sigma_max: float
    rho: float

    @property
    def N(self) -> int:
        return len(self.sigmas)


@dataclass
class CtConfig:
    s0: int = 10
    s1: int = 160
    total_iters: int = 5000
    sigma_data: float = 0.5
    huber_c: float = 0.0064
    ema_mu: float = 0.0
    obs_horizon: int = 2
    action_horizon: int = 8
    chunk_len: int = 16
    noise_emb_dim: int = 128
    keypose_emb_dim: int = 128
    eps: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    clip_output: bool = True

    def __post_init__(self):
        if self.s1 < self.s0 or self.s0 < 1:
            raise ConfigurationError(f"need 1 <= s0 <= s1, got s0={self.s0} s1={self.s1}")
        if self.obs_horizon < 1 or self.action_horizon < 1 or self.chunk_len < self.action_horizon:
            raise ConfigurationError("need H_o >= 1, H_a >= 1 and chunk_len >= H_a")
        if self.huber_c <= 0:
            raise ConfigurationError("huber_c must be positive")
        if not 0 < self.eps < self.sigma_max:
            raise ConfigurationError("need 0 < eps < sigma_max")

    def schedule_block(self) -> dict:
        return dict(eps=self.eps, sigma_max=self.sigma_max, rho=self.rho, sigma_data=self.sigma_data,
                    huber_c=self.huber_c, s0=self.s0, s1=self.s1, K=self.total_iters)


def karras_sigmas(n_points: int, eps: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0) -> NoiseSchedule:
    if n_points < 2 or not 0 < eps < sigma_max or rho <= 0:
        raise ContractError(f"bad schedule request N={n_points} eps={eps} sigma_max={sigma_max} rho={rho}")
    lo = eps ** (1.0 / rho)
    hi = sigma_max ** (1.0 / rho)
    ramp = np.arange(n_points) / (n_points - 1)
    sig = (lo + ramp * (hi - lo)) ** rho
    sig[0] = eps
    sig[-1] = sigma_max
    return NoiseSchedule(sig, eps, sigma_max, rho)


def curriculum_n(k: int, cfg: CtConfig) -> int:
    """Number of discretisation points at iteration ``k`` (doubling steps)."""
    if cfg.s1 < cfg.s0:
        raise ConfigurationError("s1 < s0")
    K = cfg.total_iters
    if not 0 <= k < max(K, 1):
        raise ContractError(f"iteration {k} outside [0, {K})")
    k_prime = math.floor(K / (math.log2(math.floor(cfg.s1 / cfg.s0)) + 1))
    k_prime = max(k_prime, 1)
    return min(cfg.s0 * 2 ** (k // k_prime), cfg.s1) + 1


def boundary_scalings(sigma, eps: float, sigma_data: float):
    sigma = np.asarray(sigma, dtype=np.float64)
    c_skip = sigma_data**2 / ((sigma - eps) ** 2 + sigma_data**2)
    c_out = sigma_data * (sigma - eps) / np.sqrt(sigma_data**2 + sigma**2)
    return c_skip, c_out


def pseudo_huber(x, y, c: float) -> np.ndarray:
    """Per-row ``sqrt(|x - y|^2 + c^2) - c``; everything but axis 0 is summed."""
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    sq = (diff.reshape(diff.shape[0], -1) ** 2).sum(axis=1) if diff.ndim > 1 else diff**2
    return np.sqrt(sq + c * c) - c


def noise_features(sigma, dim: int) -> np.ndarray:
    return sinusoidal_features(np.log(np.asarray(sigma, dtype=np.float64)) / 4.0, dim)


@dataclass
class CmPolicy:
    params: ParamStore
    target_params: ParamStore
    net: BackboneSpec
    cfg: CtConfig
    stats: NormStats | None = None
    nfe: int = 0
    train_steps: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def algo(self) -> str:
        return "cm"


def make_backbone(cfg: CtConfig, action_dim: int, obs_dim: int, keypose_dim: int = 0,
                  hidden_widths=(256, 256, 256), activation: str = "silu") -> BackboneSpec:
    return BackboneSpec(cfg.action_horizon, action_dim, obs_dim, cfg.obs_horizon, keypose_dim,
                        cfg.noise_emb_dim, cfg.keypose_emb_dim, tuple(hidden_widths), activation)


def init_cm_policy(net: BackboneSpec, cfg: CtConfig, stats: NormStats | None = None, seed: int = 0) -> CmPolicy:
    params = init_backbone(net, seed)
    return CmPolicy(params, params.copy(), net, cfg, stats, seed=seed)


def _denoise(params, net, cfg, x, sigma, obs, keypose, keep=False):
    """Batched ``f_theta``; ``x`` is (B, H_a, A), ``sigma`` is (B,)."""
    b = x.shape[0]
    c_skip, c_out = boundary_scalings(sigma, cfg.eps, cfg.sigma_data)
    c_in = 1.0 / np.sqrt(sigma**2 + cfg.sigma_data**2)
    flat = x.reshape(b, -1)
    out, cache = backbone_forward(params, net, flat * c_in[:, None], noise_features(sigma, net.noise_emb_dim),
                                  obs, keypose, keep=keep)
    f = c_skip[:, None] * flat + c_out[:, None] * out
    return f.reshape(x.shape), cache, c_out


def _as_batch(x, obs, keypose, net):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    b = x.shape[0]
    obs = np.asarray(obs, dtype=np.float64).reshape(-1, net.obs_horizon * net.obs_dim)
    if len(obs) == 1 and b > 1:
        obs = np.repeat(obs, b, axis=0)
    if net.uses_keypose:
        if keypose is None:
            raise ConfigurationError("keypose-conditioned network needs a keypose")
        keypose = np.asarray(keypose, dtype=np.float64).reshape(-1, net.keypose_dim)
        if len(keypose) == 1 and b > 1:
            keypose = np.repeat(keypose, b, axis=0)
    else:
        keypose = None
    return x, obs, keypose, single


def consistency_fn(policy: CmPolicy, noisy_chunk, sigma: float, obs, keypose=None) -> np.ndarray:
    """One network evaluation of ``f_theta`` at noise level ``sigma``.

    ``obs`` and ``keypose`` are already normalised. ``noisy_chunk`` is
    (H_a, A) or a batch (B, H_a, A).
    """
    cfg = policy.cfg
    if not cfg.eps - 1e-12 <= sigma <= cfg.sigma_max + 1e-9:
        raise ContractError(f"sigma={sigma} outside [{cfg.eps}, {cfg.sigma_max}]")
    x, obs, keypose, single = _as_batch(noisy_chunk, obs, keypose, policy.net)
    policy.nfe += 1
    f, _, _ = _denoise(policy.params, policy.net, cfg, x, np.full(x.shape[0], float(sigma)), obs, keypose)
    return f[0] if single else f


def ct_loss(policy: CmPolicy, batch: ChunkArrays, k: int, rng: np.random.Generator):
    """Consistency-training loss and its gradient with respect to ``params``.

    The target branch uses ``target_params`` and is treated as a constant.
    """
    if len(batch) == 0:
        raise ContractError("empty batch")
    cfg, net = policy.cfg, policy.net
    sched = karras_sigmas(curriculum_n(k, cfg), cfg.eps, cfg.sigma_max, cfg.rho)
    a = batch.actions
    b = a.shape[0]
    n = rng.integers(0, sched.N - 1, size=b)
    z = rng.standard_normal(a.shape)
    s_lo = sched.sigmas[n]
    s_hi = sched.sigmas[n + 1]
    weight = 1.0 / (s_hi - s_lo)
    kp = batch.keypose if net.uses_keypose else None
    f_hi, cache, c_out = _denoise(policy.params, net, cfg, a + s_hi[:, None, None] * z, s_hi, batch.obs, kp, keep=True)
    f_lo, _, _ = _denoise(policy.target_params, net, cfg, a + s_lo[:, None, None] * z, s_lo, batch.obs, kp)
    diff = (f_hi - f_lo).reshape(b, -1)
    r = np.sqrt((diff**2).sum(axis=1) + cfg.huber_c**2)
    loss = float(np.mean(weight * (r - cfg.huber_c)))
    if not math.isfinite(loss):
        raise NumericalError("non-finite consistency loss", layer="loss")
    g_f = (weight / b)[:, None] * diff / r[:, None]
    grads = backbone_backward(policy.params, net, cache, g_f * c_out[:, None])
    return loss, grads


def update_target(policy: CmPolicy) -> None:
    mu = policy.cfg.ema_mu
    if mu == 0.0:
        policy.target_params = policy.params.copy()
        return
    for name, p in policy.params.items():
        t = policy.target_params[name]
        t *= mu
        t += (1.0 - mu) * p


def train_cm(data: ChunkArrays, cfg: CtConfig, schedule: TrainSchedule, net: BackboneSpec,
             stats: NormStats | None = None, init_seed: int | None = None, callback=None):
    """Run ``cfg.total_iters`` consistency-training iterations.

    Returns ``(policy, curve)`` where ``curve`` holds one dict per iteration
    with keys ``iter, loss, lr, N_k``.
    """
    if len(data) == 0:
        raise ContractError("empty dataset")
    if schedule.iters is not None and schedule.iters != cfg.total_iters:
        raise ConfigurationError(f"schedule.iters={schedule.iters} disagrees with K={cfg.total_iters}")
    seed = schedule.seed if init_seed is None else init_seed
    policy = init_cm_policy(net, cfg, stats, seed)
    opt = OptimState.for_params(policy.params, lr0=schedule.lr0, weight_decay=schedule.weight_decay)
    rng = make_rng(seed + 1)
    K = cfg.total_iters
    curve = []
    for k in range(K):
        idx = rng.integers(0, len(data), size=min(schedule.batch_size, len(data)))
        lr = cosine_lr(k, K, schedule.lr0)
        try:
            loss, grads = ct_loss(policy, data.take(idx), k, rng)
            adamw_step(policy.params, grads, opt, lr)
        except NumericalError as exc:
            raise TrainingDiverged(f"diverged at iteration {k}: {exc}", last_good=policy, iteration=k) from None
        update_target(policy)
        policy.train_steps = k + 1
        curve.append({"iter": k, "loss": loss, "lr": lr, "N_k": curriculum_n(k, cfg)})
        if callback is not None:
            callback(k, loss)
    return policy, curve


def sample_onestep(policy: CmPolicy, obs_history, keypose=None, rng: np.random.Generator | None = None,
                   n: int | None = None) -> np.ndarray:
    """Draw one action chunk (H_a, A) in raw units with a single network call.

    ``obs_history`` (H_o, O) and ``keypose`` are raw. With ``n`` set, ``n``
    chunks are drawn in one batched call, still counted as one evaluation.
    """
    if policy.stats is None:
        raise ConfigurationError("policy has no normalisation stats")
    rng = rng if rng is not None else make_rng(0)
    cfg, net = policy.cfg, policy.net
    obs = normalize(obs_history, policy.stats, "obs").reshape(1, -1)
    kp = normalize(keypose, policy.stats, "kp").reshape(1, -1) if net.uses_keypose and keypose is not None else None
    if net.uses_keypose and kp is None:
        raise ConfigurationError("policy is keypose-conditioned but no keypose was given")
    m = 1 if n is None else n
    x = cfg.sigma_max * rng.standard_normal((m, net.action_horizon, net.action_dim))
    out = consistency_fn(policy, x, cfg.sigma_max, obs, kp)
    if cfg.clip_output:
        out = np.clip(out, -1.0, 1.0)
    chunks = unnormalize(out, policy.stats, "act")
    return chunks[0] if n is None else chunks


# ---------------------------------------------------------------------------
# persistence


def save_cm(path, policy: CmPolicy, extra: dict | None = None) -> Path:
    header = {
        "kind": "cm",
        "net": policy.net.to_dict(),
        "cfg": asdict(policy.cfg),
        "schedule": policy.cfg.schedule_block(),
        "norm_stats": policy.stats.to_dict() if policy.stats is not None else None,
        "seed": policy.seed,
        "train_steps": policy.train_steps,
        "meta": policy.meta,
    }
    header.update(extra or {})
    return save_checkpoint(path, {"params": policy.params}, header)


def load_cm(path) -> CmPolicy:
    stores, header = load_checkpoint(path)
    if header.get("kind") != "cm":
        raise ConfigurationError(f"{path} is not a consistency-policy checkpoint")
    net = BackboneSpec.from_dict(header["net"])
    cfg = CtConfig(**header["cfg"])
    stats = NormStats.from_dict(header["norm_stats"]) if header.get("norm_stats") else None
    params = stores["params"]
    return CmPolicy(params, params.copy(), net, cfg, stats, train_steps=header.get("train_steps", 0),
                    seed=header.get("seed", 0), meta=header.get("meta", {}))
