"""Keypose identification, bimanual merging, keypose dataset and predictor.

A keypose is the proprioceptive vector ``q`` (both arms' ``x, y, g``) at a
sub-stage boundary. Per-arm boundaries are found with simple rules; the
bimanual set is the sorted union of both arms' indices plus 0 and T.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import ARM_SLICES, PROPRIO_DIM, NormStats, Trajectory, normalize, unnormalize
from .errors import ConfigurationError, ContractError, NumericalError, TrainingDiverged
from .nn import (
    MlpSpec,
    OptimState,
    ParamStore,
    TrainSchedule,
    adamw_step,
    cosine_lr,
    init_mlp,
    loss_gradient,
    make_rng,
    mlp_forward,
)

CASE_RULE_KINDS = ("gripper_distance_below", "height_below")


@dataclass(frozen=True)
class CaseRule:
    name: str
    kind: str
    threshold: float

    def __post_init__(self):
        if self.kind not in CASE_RULE_KINDS:
            raise ConfigurationError(f"unknown case rule kind {self.kind!r}")
        if not self.threshold > 0:
            raise ConfigurationError(f"case rule {self.name}: threshold must be > 0")

    def evaluate(self, q: np.ndarray, arm: str) -> np.ndarray:
        """Boolean per tick for a ``(T, 6)`` proprio series."""
        if self.kind == "gripper_distance_below":
            d = np.hypot(q[:, 0] - q[:, 3], q[:, 1] - q[:, 4])
            return d < self.threshold
        y = q[:, ARM_SLICES[arm]][:, 1]
        return y < self.threshold


DEFAULT_CASE_RULES = (
    CaseRule("handover_proximity", "gripper_distance_below", 0.08),
    CaseRule("near_table", "height_below", 0.05),
)


@dataclass(frozen=True)
class KeyposeRules:
    gripper_open_close_delta: float = 0.05
    stall_speed_thresh: float = 0.005
    case_rules: tuple[CaseRule, ...] = DEFAULT_CASE_RULES
    debounce: int = 5

    def __post_init__(self):
        object.__setattr__(self, "case_rules", tuple(
            r if isinstance(r, CaseRule) else CaseRule(**r) for r in self.case_rules))
        if not (self.gripper_open_close_delta > 0 and self.stall_speed_thresh > 0):
            raise ConfigurationError("keypose thresholds must be > 0")
        if self.debounce < 1:
            raise ConfigurationError("debounce window must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["case_rules"] = [asdict(r) for r in self.case_rules]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KeyposeRules":
        return cls(**d)


@dataclass
class KeyposeSet:
    indices: list[int]
    poses: np.ndarray  # (M+1, 6)

    def __post_init__(self):
        self.indices = [int(i) for i in self.indices]
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if len(self.indices) < 2 or self.indices[0] != 0:
            raise ContractError("keypose indices must start at 0 and have at least two entries")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ContractError("keypose indices must be strictly increasing")
        if len(self.poses) != len(self.indices):
            raise ContractError(f"{len(self.poses)} poses for {len(self.indices)} indices")

    @property
    def T(self) -> int:
        return self.indices[-1]

    def to_json(self, traj_id: str) -> str:
        return json.dumps({"traj_id": traj_id, "indices": self.indices, "poses": self.poses.tolist()},
                          separators=(",", ":"))


@dataclass
class KeyposeTuple:
    obs: np.ndarray
    prev_keypose: np.ndarray
    next_keypose: np.ndarray
    traj_index: int = 0
    t: int = 0
    segment: int = 0


def _rising(mask: np.ndarray) -> np.ndarray:
    """Indices where a boolean series turns on (not counting index 0)."""
    return np.flatnonzero(mask[1:] & ~mask[:-1]) + 1


def _debounce(ticks, window: int) -> list[int]:
    kept: list[int] = []
    for t in sorted(set(int(x) for x in ticks)):
        if not kept or t - kept[-1] >= window:
            kept.append(t)
    return kept


def detect_arm_keyposes(traj: Trajectory, arm: str, rules: KeyposeRules | None = None) -> list[int]:
    """Interior keypose ticks for one arm.

    A tick ``t`` is flagged when the aperture starts moving in a new
    direction (``|g_t - g_{t-1}|`` above the delta threshold), when the
    end-effector speed drops below the stall threshold after having been
    above it, or when a case rule turns on.
    """
    rules = rules or KeyposeRules()
    if arm not in ARM_SLICES:
        raise ContractError(f"arm must be 'left' or 'right', got {arm!r}")
    if traj.T < 2:
        raise ContractError("keypose detection needs at least two ticks")
    q = traj.proprio
    own = q[:, ARM_SLICES[arm]]
    hits = []

    dg = np.diff(own[:, 2])
    sign = np.where(np.abs(dg) > rules.gripper_open_close_delta, np.sign(dg), 0.0)
    for i in range(len(sign)):
        if sign[i] != 0 and (i == 0 or sign[i - 1] != sign[i]):
            hits.append(i + 1)

    speed = np.hypot(*np.diff(own[:, :2], axis=0).T)
    moving = speed >= rules.stall_speed_thresh
    for i in range(1, len(speed)):
        if moving[i - 1] and not moving[i]:
            hits.append(i + 1)

    for rule in rules.case_rules:
        hits.extend(_rising(rule.evaluate(q, arm)).tolist())

    return [t for t in _debounce(hits, rules.debounce) if 0 < t < traj.T]


def merge_keyposes(left, right, T: int) -> list[int]:
    """Sorted, deduplicated union of both arms' indices plus 0 and T."""
    merged = set(int(i) for i in left) | set(int(i) for i in right)
    bad = [i for i in merged if i < 0 or i > T]
    if bad:
        raise ContractError(f"keypose indices outside [0, {T}]: {sorted(bad)[:5]}")
    return sorted(merged | {0, T})


def make_keypose_set(traj: Trajectory, indices) -> KeyposeSet:
    """Poses ``q_{t_j}``; the terminal index T reads the last recorded tick."""
    idx = [int(i) for i in indices]
    rows = np.minimum(idx, traj.T - 1)
    return KeyposeSet(idx, traj.proprio[rows].copy())


def extract_keyposes(traj: Trajectory, rules: KeyposeRules | None = None) -> KeyposeSet:
    left = detect_arm_keyposes(traj, "left", rules)
    right = detect_arm_keyposes(traj, "right", rules)
    return make_keypose_set(traj, merge_keyposes(left, right, traj.T))


def save_keyposes(path, trajs, keyposes) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for tr, kp in zip(trajs, keyposes):
            fh.write(kp.to_json(f"{tr.task}/{tr.seed}") + "\n")
    return path


def load_keyposes(path) -> list[KeyposeSet]:
    from .errors import ParseError

    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(KeyposeSet(rec["indices"], rec["poses"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"bad keypose record: {exc}", line=n) from None
    return out


def build_keypose_dataset(trajs, keyposes) -> list[KeyposeTuple]:
    """``(o_t, k_j, k_{j+1})`` for every ``t`` in ``[t_j, t_{j+1})``."""
    if len(trajs) != len(keyposes):
        raise ContractError(f"{len(trajs)} trajectories but {len(keyposes)} keypose sets")
    out = []
    for i, (tr, kp) in enumerate(zip(trajs, keyposes)):
        if kp.T != tr.T:
            raise ContractError(f"trajectory {i}: keyposes end at {kp.T}, trajectory has T={tr.T}")
        for j in range(len(kp.indices) - 1):
            for t in range(kp.indices[j], kp.indices[j + 1]):
                out.append(KeyposeTuple(tr.obs[t], kp.poses[j], kp.poses[j + 1], i, t, j))
    return out


def early_switch_tuples(trajs, keyposes, margin: int) -> list[KeyposeTuple]:
    """Extra training tuples ``(o_t, k_j, k_{j+1})`` for ``t`` up to ``margin``
    ticks *before* ``t_j``.

    The executor switches once the arms are within a tolerance of ``k_j``,
    i.e. slightly before the demonstration reached it; these tuples teach
    the predictor that situation. They are kept separate from
    :func:`build_keypose_dataset`, which tiles each trajectory exactly once.
    """
    if margin < 0:
        raise ContractError("margin must be non-negative")
    out = []
    for i, (tr, kp) in enumerate(zip(trajs, keyposes)):
        for j in range(1, len(kp.indices) - 1):
            lo = max(kp.indices[j] - margin, kp.indices[j - 1] + 1)
            for t in range(lo, kp.indices[j]):
                out.append(KeyposeTuple(tr.obs[t], kp.poses[j], kp.poses[j + 1], i, t, j))
    return out


# ---------------------------------------------------------------------------
# predictor


@dataclass
class KeyposePredictor:
    params: ParamStore
    spec: MlpSpec
    stats: NormStats
    train_steps: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def obs_dim(self) -> int:
        return self.spec.input_dim - self.spec.output_dim


def predictor_spec(obs_dim: int, kp_dim: int = PROPRIO_DIM, hidden_widths=(256, 256), activation="silu") -> MlpSpec:
    return MlpSpec(obs_dim + kp_dim, tuple(hidden_widths), kp_dim, activation)


def keypose_arrays(dataset, stats: NormStats):
    """Normalised ``(inputs, targets)`` for a keypose dataset."""
    if not dataset:
        raise ContractError("empty keypose dataset")
    o = normalize(np.stack([d.obs for d in dataset]), stats, "obs")
    k = normalize(np.stack([d.prev_keypose for d in dataset]), stats, "kp")
    k1 = normalize(np.stack([d.next_keypose for d in dataset]), stats, "kp")
    return np.concatenate([o, k], axis=1), k1


def mse_loss(params: ParamStore, spec: MlpSpec, x, y):
    """Mean squared error over all elements, with gradient."""

    def fn(out):
        r = out - y
        return float(np.mean(r**2)), 2.0 * r / r.size

    return loss_gradient(params, spec, x, fn)


def train_keypose_predictor(dataset, spec: MlpSpec, schedule: TrainSchedule, stats: NormStats,
                            heldout=None, callback=None, input_noise: float = 0.0):
    """AdamW on the MSE objective. Returns ``(predictor, report)``.

    ``report`` has the loss curve and, when ``heldout`` tuples are given,
    the held-out MSE in normalised units. ``input_noise`` adds Gaussian
    jitter (normalised units) to the inputs of each batch, which makes the
    predictor tolerant of the small state errors seen in closed loop.
    """
    if schedule.iters is None:
        raise ConfigurationError("schedule.iters is required for predictor training")
    x, y = keypose_arrays(dataset, stats)
    if x.shape[1] != spec.input_dim or y.shape[1] != spec.output_dim:
        raise ConfigurationError(f"dataset widths ({x.shape[1]}, {y.shape[1]}) do not match the predictor spec")
    params = init_mlp(spec, schedule.seed)
    opt = OptimState.for_params(params, lr0=schedule.lr0, weight_decay=schedule.weight_decay)
    rng = make_rng(schedule.seed + 1)
    pred = KeyposePredictor(params, spec, stats, seed=schedule.seed)
    curve = []
    K = schedule.iters
    for k in range(K):
        idx = rng.integers(0, len(x), size=min(schedule.batch_size, len(x)))
        lr = cosine_lr(k, K, schedule.lr0)
        try:
            xb = x[idx]
            if input_noise > 0:
                xb = xb + input_noise * rng.standard_normal(xb.shape)
            loss, grads = mse_loss(params, spec, xb, y[idx])
            adamw_step(params, grads, opt, lr)
        except NumericalError as exc:
            raise TrainingDiverged(f"diverged at iteration {k}: {exc}", last_good=pred, iteration=k) from None
        pred.train_steps = k + 1
        curve.append({"iter": k, "loss": loss, "lr": lr})
        if callback is not None:
            callback(k, loss)
    report = {"curve": curve, "train_mse": heldout_mse(pred, dataset)}
    if heldout:
        report["heldout_mse"] = heldout_mse(pred, heldout)
    return pred, report


def heldout_mse(pred: KeyposePredictor, dataset) -> float:
    x, y = keypose_arrays(dataset, pred.stats)
    out = mlp_forward(pred.params, pred.spec, x)
    return float(np.mean((out - y) ** 2))


def predict_next_keypose(pred: KeyposePredictor, obs, keypose) -> np.ndarray:
    """Next keypose in raw proprio units from raw ``(o, k)``."""
    obs = np.asarray(obs, dtype=np.float64)
    keypose = np.asarray(keypose, dtype=np.float64)
    if obs.shape[-1] != pred.obs_dim or keypose.shape[-1] != pred.spec.output_dim:
        raise ConfigurationError(
            f"predictor expects obs dim {pred.obs_dim} and keypose dim {pred.spec.output_dim}, "
            f"got {obs.shape[-1]} and {keypose.shape[-1]}")
    x = np.concatenate([normalize(obs, pred.stats, "obs"), normalize(keypose, pred.stats, "kp")], axis=-1)
    out = mlp_forward(pred.params, pred.spec, x)
    if not np.isfinite(out).all():
        raise NumericalError("non-finite keypose prediction", layer="output")
    # keyposes never leave the range seen in the demonstrations
    return unnormalize(np.clip(out, -1.0, 1.0), pred.stats, "kp")


def save_predictor(path, pred: KeyposePredictor, extra: dict | None = None) -> Path:
    header = {"kind": "keypose", "spec": pred.spec.to_dict(), "norm_stats": pred.stats.to_dict(),
              "train_steps": pred.train_steps, "seed": pred.seed, "meta": pred.meta}
    header.update(extra or {})
    return save_checkpoint(path, {"params": pred.params}, header)


def load_predictor(path) -> KeyposePredictor:
    stores, header = load_checkpoint(path)
    if header.get("kind") != "keypose":
        raise ConfigurationError(f"{path} is not a keypose predictor checkpoint")
    return KeyposePredictor(stores["params"], MlpSpec.from_dict(header["spec"]),
                            NormStats.from_dict(header["norm_stats"]), header.get("train_steps", 0),
                            header.get("seed", 0), header.get("meta", {}))


def segment_of(kp: KeyposeSet, t: int) -> int:
    """Index ``j`` with ``t_j <= t < t_{j+1}``."""
    if not 0 <= t < kp.T:
        raise ContractError(f"t={t} outside [0, {kp.T})")
    return int(np.searchsorted(kp.indices, t, side="right") - 1)


def linf(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else math.inf
