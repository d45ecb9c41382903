"""The flat conditional denoiser shared by the consistency and DDPM policies.

Input row layout: ``[noisy chunk (H_a*A) | noise features | obs history
(H_o*O) | keypose embedding]``. The keypose embedding is a learned affine
map of the normalised keypose and is absent when ``keypose_dim == 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .nn import (
    MlpSpec,
    ParamStore,
    glorot_uniform,
    init_mlp,
    make_rng,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
)

KP_W = "kp_embed.W"
KP_B = "kp_embed.b"


@dataclass(frozen=True)
class BackboneSpec:
    action_horizon: int
    action_dim: int
    obs_dim: int
    obs_horizon: int = 2
    keypose_dim: int = 0
    noise_emb_dim: int = 128
    keypose_emb_dim: int = 128
    hidden_widths: tuple[int, ...] = (256, 256, 256)
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.noise_emb_dim % 2:
            raise ConfigurationError("noise_emb_dim must be even")

    @property
    def chunk_size(self) -> int:
        return self.action_horizon * self.action_dim

    @property
    def uses_keypose(self) -> bool:
        return self.keypose_dim > 0

    @property
    def mlp(self) -> MlpSpec:
        width = self.chunk_size + self.noise_emb_dim + self.obs_horizon * self.obs_dim
        if self.uses_keypose:
            width += self.keypose_emb_dim
        return MlpSpec(width, self.hidden_widths, self.chunk_size, self.activation)

    def to_dict(self) -> dict:
        return {
            "action_horizon": self.action_horizon,
            "action_dim": self.action_dim,
            "obs_dim": self.obs_dim,
            "obs_horizon": self.obs_horizon,
            "keypose_dim": self.keypose_dim,
            "noise_emb_dim": self.noise_emb_dim,
            "keypose_emb_dim": self.keypose_emb_dim,
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        d = dict(d)
        d["hidden_widths"] = tuple(d["hidden_widths"])
        return cls(**d)


def init_backbone(spec: BackboneSpec, seed: int = 0) -> ParamStore:
    rng = make_rng(seed)
    params = init_mlp(spec.mlp, rng)
    if spec.uses_keypose:
        params[KP_W] = glorot_uniform(rng, spec.keypose_dim, spec.keypose_emb_dim)
        params[KP_B] = np.zeros(spec.keypose_emb_dim)
    return params


def sinusoidal_features(values, dim: int, max_period: float = 1e4) -> np.ndarray:
    """``[sin(v*f), cos(v*f)]`` with ``dim/2`` frequencies spaced
    geometrically from 1 down to ``1/max_period``."""
    v = np.atleast_1d(np.asarray(values, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half - 1, 1))
    arg = v[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass
class BackboneCache:
    mlp_cache: object
    keypose: np.ndarray | None


def _assemble(params, spec, chunk, noise_feat, obs, keypose):
    b = chunk.shape[0]
    if obs.shape != (b, spec.obs_horizon * spec.obs_dim):
        raise ConfigurationError(f"obs history has shape {obs.shape}, expected ({b}, {spec.obs_horizon * spec.obs_dim})")
    parts = [chunk, noise_feat, obs]
    if spec.uses_keypose:
        if keypose is None or keypose.shape != (b, spec.keypose_dim):
            raise ConfigurationError(f"keypose conditioning needs shape ({b}, {spec.keypose_dim})")
        parts.append(keypose @ params[KP_W] + params[KP_B])
    return np.concatenate(parts, axis=1)


def backbone_forward(params: ParamStore, spec: BackboneSpec, chunk, noise_feat, obs, keypose=None, keep=False):
    """Evaluate the denoiser on a batch. All inputs are 2-D row batches.

    Returns ``(output, cache)``; ``cache`` is None unless ``keep``.
    """
    h = _assemble(params, spec, chunk, noise_feat, obs, keypose)
    if keep:
        out, cache = mlp_forward_cached(params, spec.mlp, h)
        return out, BackboneCache(cache, keypose)
    return mlp_forward(params, spec.mlp, h), None


def backbone_backward(params: ParamStore, spec: BackboneSpec, cache: BackboneCache, grad_out) -> ParamStore:
    grads, g_in = mlp_backward(params, spec.mlp, cache.mlp_cache, grad_out)
    if spec.uses_keypose:
        g_emb = g_in[:, -spec.keypose_emb_dim :]
        grads[KP_W] = cache.keypose.T @ g_emb
        grads[KP_B] = g_emb.sum(axis=0)
    return ParamStore({k: grads[k] for k in params.names()})
