"""Closed-loop execution of a policy stack in the simulator.

Each tick the executor (1) advances the target keypose when the arms have
reached the current one, (2) asks the trajectory generator for a new chunk
whenever the previous one has been fully executed, paying the inference
latency in held ticks, and (3) applies one action.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .consistency import CmPolicy, sample_onestep
from .data import PROPRIO_DIM, normalize, obs_history
from .ddpm import DdpmPolicy, ddim_sample
from .errors import ConfigurationError, ContractError
from .keypose import KeyposePredictor, predict_next_keypose
from .nn import make_rng
from .sim import LatencyModel, TaskSpec, all_stages_done, charge_latency, reset, state_as_action, step

METRIC_COLUMNS = ["task", "algo", "stage", "attempts", "successes", "rate", "nfe_mean",
                  "latency_ms_p50", "duration_ticks_mean"]


@dataclass
class PolicyStack:
    generator: CmPolicy | DdpmPolicy
    predictor: KeyposePredictor | None = None
    switch_threshold: float = 0.05
    action_horizon: int | None = None
    switch_mask: tuple[bool, ...] | None = None  # which proprio elements enter the switch test
    label: str | None = None

    def __post_init__(self):
        net = self.generator.net
        if self.action_horizon is None:
            self.action_horizon = net.action_horizon
        if not 1 <= self.action_horizon <= net.action_horizon:
            raise ConfigurationError(f"action_horizon must be in [1, {net.action_horizon}]")
        if self.predictor is None and net.uses_keypose:
            raise ConfigurationError("generator is keypose-conditioned but the stack has no keypose predictor")
        if self.predictor is not None and not net.uses_keypose:
            raise ConfigurationError("stack has a keypose predictor but the generator was trained without keyposes")
        if self.switch_mask is not None and len(self.switch_mask) != PROPRIO_DIM:
            raise ConfigurationError(f"switch_mask needs {PROPRIO_DIM} entries")
        if self.switch_threshold <= 0:
            raise ConfigurationError("switch_threshold must be > 0")

    @property
    def algo(self) -> str:
        if self.label:
            return self.label
        if self.generator.algo == "cm":
            return "bikc" if self.predictor is not None else "cp"
        return "dp-kp" if self.predictor is not None else "dp"


@dataclass
class EpisodeReport:
    task: str
    algo: str
    seed: int
    stages: dict[str, int | None]
    success: dict[str, bool]
    overall: bool
    nfe_total: int
    inference_calls: int
    ticks: int
    latency_ms: list[float] = field(default_factory=list)
    nfe_per_call: list[int] = field(default_factory=list)
    keypose_switches: int = 0
    keypose_log: list[int] = field(default_factory=list)  # tick of each switch; index = position in sequence
    terminal_hold_tick: int | None = None
    first_close: dict[str, int] = field(default_factory=dict)  # arm -> first tick its aperture closed
    latency_ticks: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @property
    def first_closing_arm(self) -> str | None:
        if not self.first_close:
            return None
        return min(self.first_close.items(), key=lambda kv: (kv[1], kv[0]))[0]


def _sample(gen, hist, kp, rng):
    if gen.algo == "cm":
        return sample_onestep(gen, hist, kp, rng=rng)
    return ddim_sample(gen, hist, kp, rng=rng)


def _check_dims(stack: PolicyStack, task: TaskSpec):
    net = stack.generator.net
    if net.obs_dim != task.obs_dim or net.action_dim != 6:
        raise ConfigurationError(
            f"generator expects obs {net.obs_dim} / action {net.action_dim}, task {task.name} has obs {task.obs_dim} / action 6")
    if stack.generator.stats is None:
        raise ConfigurationError("generator has no normalisation stats")
    if stack.predictor is not None and stack.predictor.obs_dim != task.obs_dim:
        raise ConfigurationError(f"predictor expects obs dim {stack.predictor.obs_dim}, task has {task.obs_dim}")


def run_episode(stack: PolicyStack, task: TaskSpec, seed: int, latency: LatencyModel,
                T: int | None = None, stop_on_success: bool = True, action_stream=None) -> EpisodeReport:
    """Run one closed-loop episode. Deterministic given the seed.

    ``action_stream`` (optional callable ``(tick, obs) -> chunk``) replaces
    the generator; used to compare latency models on identical actions.
    """
    _check_dims(stack, task)
    T = task.T if T is None else T
    gen = replace(stack.generator, nfe=0) if action_stream is None else stack.generator
    rng = make_rng(seed)
    state, obs = reset(task, seed)
    history = [obs]
    H_o = gen.net.obs_horizon
    use_kp = stack.predictor is not None
    stats_kp = stack.predictor.stats if use_kp else None
    mask = np.ones(PROPRIO_DIM, bool) if stack.switch_mask is None else np.asarray(stack.switch_mask, bool)

    k_target = obs[:PROPRIO_DIM].copy()
    switches, kp_log, stable, hold_tick = 0, [], 0, None
    queue: list[np.ndarray] = []
    wait = 0
    prev_action = state_as_action(state)
    lat_ms, nfes = [], []
    lat_ticks = 0
    first_close: dict[str, int] = {}
    ticks = 0

    for tick in range(T):
        q = obs[:PROPRIO_DIM]
        if use_kp and hold_tick is None:
            dev = np.abs(normalize(q, stats_kp, "kp") - normalize(k_target, stats_kp, "kp"))[mask]
            if dev.size == 0 or float(dev.max()) < stack.switch_threshold:
                new_k = predict_next_keypose(stack.predictor, obs, k_target)
                # the hold test uses every element, apertures included
                gap = np.abs(normalize(new_k, stats_kp, "kp") - normalize(q, stats_kp, "kp"))
                stable = stable + 1 if float(gap.max()) < stack.switch_threshold else 0
                k_target = new_k
                switches += 1
                kp_log.append(tick)
                if stable >= 2:
                    hold_tick = tick
                    prev_action = state_as_action(state)

        if hold_tick is not None:
            action = prev_action
        else:
            if not queue and wait == 0:
                hist = obs_history(np.asarray(history), len(history) - 1, H_o)
                before = gen.nfe
                t0 = time.perf_counter()
                if action_stream is not None:
                    chunk = np.asarray(action_stream(tick, obs))
                    used = 0
                else:
                    chunk = _sample(gen, hist, k_target if use_kp else None, rng)
                    used = gen.nfe - before
                ms = (time.perf_counter() - t0) * 1e3
                lat_ms.append(ms)
                nfes.append(used)
                wait = charge_latency(latency, measured_ms=ms, nfe=used)
                lat_ticks += wait
                queue = [row for row in chunk[: stack.action_horizon]]
            if wait > 0:
                wait -= 1
                action = prev_action
            else:
                action = queue.pop(0)

        state, obs, _ = step(task, state, action)
        prev_action = np.asarray(action, dtype=np.float64)
        history.append(obs)
        ticks = tick + 1
        for arm, g in (("left", obs[2]), ("right", obs[5])):
            if arm not in first_close and g < task.physics.close_thresh:
                first_close[arm] = ticks
        if stop_on_success and all_stages_done(task, state):
            break

    success = {k: v is not None for k, v in state.stages.items()}
    return EpisodeReport(
        task=task.name, algo=stack.algo, seed=seed, stages=dict(state.stages), success=success,
        overall=all(success.values()), nfe_total=int(sum(nfes)), inference_calls=len(nfes), ticks=ticks,
        latency_ms=lat_ms, nfe_per_call=nfes, keypose_switches=switches, keypose_log=kp_log,
        terminal_hold_tick=hold_tick, first_close=first_close, latency_ticks=lat_ticks,
    )


def stage_rates(reports: list[EpisodeReport], stages: list[str]) -> list[dict]:
    """Per-stage ``successes / attempts``; attempts are the previous stage's successes."""
    rows = []
    attempts = len(reports)
    overall = 1.0
    for name in stages:
        successes = sum(1 for r in reports if all(r.success[s] for s in stages[: stages.index(name) + 1]))
        rate = successes / attempts if attempts > 0 else None
        rows.append({"stage": name, "attempts": attempts, "successes": successes, "rate": rate})
        if rate is not None:
            overall *= rate
        attempts = successes
    rows.append({"stage": "overall", "attempts": len(reports),
                 "successes": sum(1 for r in reports if r.overall), "rate": overall})
    return rows


def _threads() -> int:
    raw = os.environ.get("BIKC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"BIKC_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def evaluate(stack: PolicyStack, task: TaskSpec, seeds, latency: LatencyModel, **kw):
    """Run one episode per seed. Returns ``(metric rows, reports)``."""
    seeds = list(seeds)
    if not seeds:
        raise ContractError("evaluate needs at least one episode")
    workers = min(_threads(), len(seeds))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            reports = list(pool.map(lambda s: run_episode(stack, task, s, latency, **kw), seeds))
    else:
        reports = [run_episode(stack, task, s, latency, **kw) for s in seeds]
    all_ms = [m for r in reports for m in r.latency_ms]
    common = {
        "task": task.name,
        "algo": stack.algo,
        "nfe_mean": float(np.mean([r.nfe_total / max(r.inference_calls, 1) for r in reports])),
        "latency_ms_p50": float(np.percentile(all_ms, 50)) if all_ms else None,
        "duration_ticks_mean": float(np.mean([r.ticks for r in reports])),
    }
    rows = [{**common, **row} for row in stage_rates(reports, task.stages)]
    rows = [{k: row[k] for k in METRIC_COLUMNS} for row in rows]
    return rows, reports


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row[k] is None else row[k]) for k in METRIC_COLUMNS})
    return buf.getvalue()


def overall_rate(rows) -> float | None:
    for row in rows:
        if row["stage"] == "overall":
            return row["rate"]
    raise ContractError("no overall row")
