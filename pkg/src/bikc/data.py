"""Trajectories, min-max normalisation and the keypose-conditioned
action-chunk dataset."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, ParseError

# (x, y, aperture) for the left arm, then the right arm
PROPRIO_DIM = 6
ARM_SLICES = {"left": slice(0, 3), "right": slice(3, 6)}


@dataclass
class Trajectory:
    task: str
    seed: int
    obs: np.ndarray  # (T, O)
    actions: np.ndarray  # (T, A)
    events: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.obs.ndim != 2 or self.actions.ndim != 2:
            raise ContractError("obs and actions must be 2-D")
        if len(self.obs) != len(self.actions):
            raise ContractError(f"|obs|={len(self.obs)} != |actions|={len(self.actions)}")
        if not (np.isfinite(self.obs).all() and np.isfinite(self.actions).all()):
            raise ContractError(f"non-finite values in trajectory {self.task}/{self.seed}")
        self.events = {str(k): int(v) for k, v in self.events.items()}

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def T(self) -> int:
        return len(self.obs)

    @property
    def proprio(self) -> np.ndarray:
        return self.obs[:, :PROPRIO_DIM]

    def to_json(self) -> str:
        record = {
            "task": self.task,
            "seed": self.seed,
            "obs": self.obs.tolist(),
            "actions": self.actions.tolist(),
            "events": dict(sorted(self.events.items())),
        }
        return json.dumps(record, separators=(",", ":"))

    def same_as(self, other: "Trajectory") -> bool:
        return (
            self.task == other.task
            and self.seed == other.seed
            and self.events == other.events
            and np.array_equal(self.obs, other.obs)
            and np.array_equal(self.actions, other.actions)
        )


def save_trajs(path, trajs) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for tr in trajs:
            fh.write(tr.to_json())
            fh.write("\n")
    return path


def load_trajs(path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    Trajectory(
                        task=rec["task"],
                        seed=int(rec["seed"]),
                        obs=rec["obs"],
                        actions=rec["actions"],
                        events=rec.get("events", {}),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, ContractError) as exc:
                raise ParseError(f"{path}: {type(exc).__name__}: {exc}", line=lineno) from None
    return out


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class NormStats:
    """Per-element ranges for observations, actions and keyposes."""

    obs_min: np.ndarray
    obs_max: np.ndarray
    act_min: np.ndarray
    act_max: np.ndarray
    kp_min: np.ndarray
    kp_max: np.ndarray

    def __post_init__(self):
        for name in ("obs", "act", "kp"):
            lo = np.asarray(getattr(self, f"{name}_min"), dtype=np.float64)
            hi = np.asarray(getattr(self, f"{name}_max"), dtype=np.float64)
            if lo.shape != hi.shape or np.any(hi < lo):
                raise ConfigurationError(f"bad {name} range")
            setattr(self, f"{name}_min", lo)
            setattr(self, f"{name}_max", hi)

    def bounds(self, which: str):
        if which not in ("obs", "act", "kp"):
            raise ConfigurationError(f"unknown stats group {which!r}")
        return getattr(self, f"{which}_min"), getattr(self, f"{which}_max")

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("obs_min", "obs_max", "act_min", "act_max", "kp_min", "kp_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})

    @classmethod
    def identity(cls, obs_dim: int, act_dim: int, kp_dim: int) -> "NormStats":
        """Stats whose normalisation is the identity on [-1, 1]."""
        return cls(-np.ones(obs_dim), np.ones(obs_dim), -np.ones(act_dim), np.ones(act_dim),
                   -np.ones(kp_dim), np.ones(kp_dim))


def fit_norm(trajs, keyposes=None) -> NormStats:
    """Fit ranges on demonstrations. Keypose ranges come from the keypose
    poses when given, otherwise from the proprioceptive part of the obs."""
    if not trajs:
        raise ContractError("cannot fit normalisation on zero trajectories")
    obs = np.concatenate([t.obs for t in trajs])
    act = np.concatenate([t.actions for t in trajs])
    if keyposes is not None:
        kp = np.concatenate([np.asarray(k.poses) for k in keyposes])
    else:
        kp = obs[:, :PROPRIO_DIM]
    return NormStats(obs.min(0), obs.max(0), act.min(0), act.max(0), kp.min(0), kp.max(0))


def normalize(x, stats: NormStats | None, which: str) -> np.ndarray:
    """Affine map of [min, max] onto [-1, 1]; degenerate elements map to 0."""
    if stats is None:
        raise ConfigurationError("normalisation stats are not fitted")
    lo, hi = stats.bounds(which)
    x = np.asarray(x, dtype=np.float64)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, 2.0 * (x - lo) / safe - 1.0, 0.0)


def unnormalize(x, stats: NormStats | None, which: str) -> np.ndarray:
    if stats is None:
        raise ConfigurationError("normalisation stats are not fitted")
    lo, hi = stats.bounds(which)
    x = np.asarray(x, dtype=np.float64)
    return np.where(hi > lo, (x + 1.0) * 0.5 * (hi - lo) + lo, lo)


# ---------------------------------------------------------------------------
# chunk dataset


@dataclass
class ChunkSample:
    obs_history: np.ndarray  # (H_o, O), oldest first
    target_keypose: np.ndarray  # (K,)
    action_chunk: np.ndarray  # (chunk_len, A); the first H_a rows are trained on
    traj_index: int = 0
    t: int = 0
    pad_from: int | None = None  # first padded row, None when unpadded


def obs_history(obs: np.ndarray, t: int, horizon: int) -> np.ndarray:
    """``o_{t-H+1} .. o_t``, front-padded with ``o_0`` before the episode start."""
    idx = np.clip(np.arange(t - horizon + 1, t + 1), 0, None)
    return obs[idx]


def _check_keyposes(trajs, keyposes):
    if len(trajs) != len(keyposes):
        raise ContractError(f"{len(trajs)} trajectories but {len(keyposes)} keypose sets")
    for i, (tr, kp) in enumerate(zip(trajs, keyposes)):
        idx = list(kp.indices)
        if len(idx) < 2 or idx[0] != 0 or idx[-1] != tr.T:
            raise ContractError(f"keyposes of trajectory {i} must start at 0 and end at T={tr.T}")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ContractError(f"keypose indices of trajectory {i} are not strictly increasing")
        if len(kp.poses) != len(idx):
            raise ContractError(f"trajectory {i}: {len(kp.poses)} poses for {len(idx)} indices")


def build_traj_dataset(trajs, keyposes, H_o: int = 2, H_a: int = 8, chunk_len: int = 16) -> list[ChunkSample]:
    """One sample per timestep. The chunk starting at ``t`` inside segment
    ``[t_j, t_{j+1})`` targets keypose ``k_{j+1}``; rows at or past
    ``t_{j+1}`` repeat ``a_{t_{j+1}-1}``."""
    if H_o < 1 or H_a < 1 or chunk_len < H_a:
        raise ConfigurationError(f"bad horizons H_o={H_o} H_a={H_a} chunk_len={chunk_len}")
    _check_keyposes(trajs, keyposes)
    out = []
    offsets = np.arange(chunk_len)
    for i, (tr, kp) in enumerate(zip(trajs, keyposes)):
        idx = list(kp.indices)
        poses = np.asarray(kp.poses, dtype=np.float64)
        for j in range(len(idx) - 1):
            t0, t1 = idx[j], idx[j + 1]
            for t in range(t0, t1):
                rows = np.minimum(t + offsets, t1 - 1)
                pad = t1 - t if t + chunk_len > t1 else None
                out.append(ChunkSample(obs_history(tr.obs, t, H_o), poses[j + 1].copy(),
                                       tr.actions[rows], traj_index=i, t=t, pad_from=pad))
    return out


@dataclass
class ChunkArrays:
    """Normalised, stacked training arrays."""

    obs: np.ndarray  # (N, H_o*O)
    keypose: np.ndarray  # (N, K)
    actions: np.ndarray  # (N, H_a, A)

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx) -> "ChunkArrays":
        return ChunkArrays(self.obs[idx], self.keypose[idx], self.actions[idx])


def stack_samples(samples, stats: NormStats, H_a: int) -> ChunkArrays:
    if not samples:
        raise ContractError("empty dataset")
    obs = np.stack([normalize(s.obs_history, stats, "obs").ravel() for s in samples])
    kp = np.stack([normalize(s.target_keypose, stats, "kp") for s in samples])
    act = np.stack([normalize(s.action_chunk[:H_a], stats, "act") for s in samples])
    return ChunkArrays(obs, kp, act)
