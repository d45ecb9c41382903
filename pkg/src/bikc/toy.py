"""Multi-modal toy action distributions for checking generative quality.

The 1-D set has modes at -0.5 and +0.5; the 2-D set has four modes at
``(+-0.5, +-0.5)``. Observations are a constant zero so the models learn
the unconditional action distribution.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from .backbone import BackboneSpec
from .consistency import CtConfig, make_backbone, sample_onestep, train_cm
from .data import ChunkArrays, NormStats
from .ddpm import DdpmConfig, ddim_sample, train_ddpm
from .errors import ConfigurationError
from .nn import TrainSchedule, make_rng


@dataclass
class ToyConfig:
    dim: int = 1
    n_data: int = 4096
    iters: int = 20000
    batch_size: int = 128
    lr0: float = 5e-3
    hidden_widths: tuple[int, ...] = (128, 128, 128)
    eval_steps: int = 10
    n_samples: int = 1000
    mode_radius: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigurationError(f"toy dim must be 1 or 2, got {self.dim}")
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d


def toy_modes(dim: int) -> np.ndarray:
    if dim not in (1, 2):
        raise ConfigurationError(f"toy dim must be 1 or 2, got {dim}")
    return np.array(list(itertools.product((-0.5, 0.5), repeat=dim)), dtype=np.float64)


def toy_dataset(dim: int, n: int, seed: int) -> ChunkArrays:
    """``n`` draws from the uniform mixture of point masses at the modes."""
    modes = toy_modes(dim)
    pick = make_rng(seed).integers(0, len(modes), size=n)
    actions = modes[pick].reshape(n, 1, dim)
    return ChunkArrays(np.zeros((n, 1)), np.zeros((n, 0)), actions)


def mode_report(samples, dim: int, radius: float) -> dict:
    """Per-mode frequency (among samples near any mode) and overall near-mode fraction."""
    modes = toy_modes(dim)
    s = np.asarray(samples, dtype=np.float64).reshape(-1, dim)
    d = np.linalg.norm(s[:, None, :] - modes[None], axis=-1)
    nearest = d.argmin(1)
    near = d.min(1) < radius
    freq = [float(np.mean(nearest == i)) for i in range(len(modes))]
    return {"near_frac": float(near.mean()), "mode_freq": freq, "modes": modes.tolist(), "n": len(s)}


def _net(cfg: ToyConfig, noise_emb_dim: int) -> BackboneSpec:
    return BackboneSpec(action_dim=cfg.dim, action_horizon=1, obs_dim=1, obs_horizon=1, keypose_dim=0,
                        noise_emb_dim=noise_emb_dim, keypose_emb_dim=128, hidden_widths=cfg.hidden_widths)


def train_toy(algo: str, cfg: ToyConfig):
    """Train a CM or DDPM on the toy set and sample from it.

    Returns ``(policy, curve, samples)`` with ``samples`` shaped (n, dim).
    """
    data = toy_dataset(cfg.dim, cfg.n_data, cfg.seed)
    stats = NormStats.identity(1, cfg.dim, 6)
    sched = TrainSchedule(batch_size=cfg.batch_size, lr0=cfg.lr0, seed=cfg.seed)
    if algo == "cm":
        ct = CtConfig(total_iters=cfg.iters, obs_horizon=1, action_horizon=1, chunk_len=1)
        net = make_backbone(ct, cfg.dim, 1, 0, hidden_widths=cfg.hidden_widths)
        policy, curve = train_cm(data, ct, sched, net, stats)
        samples = sample_onestep(policy, np.zeros((1, 1)), None, make_rng(cfg.seed + 99), n=cfg.n_samples)
    elif algo == "ddpm":
        dc = DdpmConfig(eval_steps=cfg.eval_steps, obs_horizon=1, action_horizon=1, chunk_len=1)
        sched.iters = cfg.iters
        policy, curve = train_ddpm(data, dc, sched, _net(cfg, dc.noise_emb_dim), stats)
        samples = ddim_sample(policy, np.zeros((1, 1)), None, make_rng(cfg.seed + 99), n=cfg.n_samples)
    else:
        raise ConfigurationError(f"algo must be 'cm' or 'ddpm', got {algo!r}")
    return policy, curve, np.asarray(samples).reshape(cfg.n_samples, cfg.dim)
