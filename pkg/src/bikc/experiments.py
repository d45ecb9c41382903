"""End-to-end experiment pipelines on the simulated tasks.

Each experiment is a dataclass config plus a ``run_*`` function that
generates demonstrations, trains the models it needs and evaluates them.
The acceptance tests and the scripts in ``scripts/`` call these.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .consistency import CmPolicy, CtConfig, make_backbone, sample_onestep, train_cm
from .data import NormStats, build_traj_dataset, fit_norm, stack_samples
from .ddpm import DdpmConfig, DdpmPolicy, ddim_sample, train_ddpm
from .errors import ConfigurationError
from .keypose import (
    KeyposePredictor,
    KeyposeRules,
    build_keypose_dataset,
    early_switch_tuples,
    extract_keyposes,
    make_keypose_set,
    predictor_spec,
    train_keypose_predictor,
)
from .backbone import BackboneSpec
from .nn import TrainSchedule, make_rng
from .runtime import PolicyStack, evaluate, overall_rate
from .sim import LatencyModel, generate_demos, make_task

APERTURE_FREE_MASK = (True, True, False, True, True, False)


@dataclass
class GeneratorConfig:
    algo: str = "cm"
    keypose: bool = True
    iters: int = 30000
    batch_size: int = 64
    lr0: float = 2e-3
    hidden_widths: tuple[int, ...] = (256, 256, 256)
    eval_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.algo not in ("cm", "ddpm"):
            raise ConfigurationError(f"algo must be 'cm' or 'ddpm', got {self.algo!r}")
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)


@dataclass
class PredictorConfig:
    iters: int = 10000
    batch_size: int = 64
    lr0: float = 1e-3
    hidden_widths: tuple[int, ...] = (256, 256)
    input_noise: float = 0.05
    early_margin: int = 3
    holdout_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if not 0.0 <= self.holdout_frac < 1.0:
            raise ConfigurationError("holdout_frac must be in [0, 1)")


@dataclass
class TaskExperiment:
    """Shared shape of the simulated-task experiments."""

    task: str = "transfer"
    n_demos: int = 100
    demo_seed: int = 1000
    styles: tuple[str, ...] | None = None
    n_episodes: int = 50
    eval_seed: int = 0
    switch_threshold: float = 0.15
    switch_mask: tuple[bool, ...] | None = APERTURE_FREE_MASK
    action_horizon: int | None = None  # executed actions per chunk; None uses the trained H_a
    latency: LatencyModel = field(default_factory=lambda: LatencyModel(mode="nfe-cost", tick_ms=20.0, cost_per_nfe_ms=20.0))
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    stacks: dict[str, GeneratorConfig] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def transfer_experiment(**kw) -> TaskExperiment:
    base = dict(task="transfer", n_demos=100, n_episodes=50,
                stacks={"bikc": GeneratorConfig(keypose=True), "cp": GeneratorConfig(keypose=False)})
    base.update(kw)
    return TaskExperiment(**base)


def conveyor_experiment(**kw) -> TaskExperiment:
    base = dict(task="conveyor", n_demos=200, n_episodes=20, action_horizon=6,
                stacks={"cp": GeneratorConfig(algo="cm", keypose=False),
                        "dp": GeneratorConfig(algo="ddpm", keypose=False, iters=20000, lr0=1e-3)})
    base.update(kw)
    return TaskExperiment(**base)


def pick_order_experiment(**kw) -> TaskExperiment:
    base = dict(task="pick-order", n_demos=50, n_episodes=50, styles=("left-first", "right-first"),
                stacks={"cp": GeneratorConfig(algo="cm", keypose=False)})
    base.update(kw)
    return TaskExperiment(**base)


def demos_and_keyposes(exp: TaskExperiment, rules: KeyposeRules | None = None):
    task = make_task(exp.task)
    demos = generate_demos(task, exp.n_demos, seed=exp.demo_seed, styles=exp.styles)
    kps = [extract_keyposes(d, rules) for d in demos]
    return task, demos, kps


def fit_predictor(demos, kps, stats: NormStats, cfg: PredictorConfig, obs_dim: int):
    """Train on the leading demos, report held-out MSE on the trailing ones."""
    n_hold = int(round(len(demos) * cfg.holdout_frac))
    cut = len(demos) - n_hold
    train = build_keypose_dataset(demos[:cut], kps[:cut])
    if cfg.early_margin > 0:
        train = train + early_switch_tuples(demos[:cut], kps[:cut], cfg.early_margin)
    held = build_keypose_dataset(demos[cut:], kps[cut:]) if n_hold else None
    spec = predictor_spec(obs_dim, hidden_widths=cfg.hidden_widths)
    sched = TrainSchedule(iters=cfg.iters, batch_size=cfg.batch_size, lr0=cfg.lr0, seed=cfg.seed)
    return train_keypose_predictor(train, spec, sched, stats, heldout=held, input_noise=cfg.input_noise)


def fit_generator(demos, kps, stats: NormStats, cfg: GeneratorConfig, obs_dim: int, action_dim: int = 6):
    """Train a CM or DDPM chunk generator. Without keyposes every sample is
    conditioned on the single segment ``[0, T]``, i.e. no keypose input."""
    if not cfg.keypose:
        kps = [make_keypose_set(d, [0, d.T]) for d in demos]
    kp_dim = 6 if cfg.keypose else 0
    sched = TrainSchedule(batch_size=cfg.batch_size, lr0=cfg.lr0, seed=cfg.seed)
    if cfg.algo == "cm":
        ct = CtConfig(total_iters=cfg.iters)
        arrays = stack_samples(build_traj_dataset(demos, kps, ct.obs_horizon, ct.action_horizon, ct.chunk_len),
                               stats, ct.action_horizon)
        net = make_backbone(ct, action_dim, obs_dim, kp_dim, hidden_widths=cfg.hidden_widths)
        return train_cm(arrays, ct, sched, net, stats)
    dc = DdpmConfig(eval_steps=cfg.eval_steps)
    arrays = stack_samples(build_traj_dataset(demos, kps, dc.obs_horizon, dc.action_horizon, dc.chunk_len),
                           stats, dc.action_horizon)
    net = BackboneSpec(dc.action_horizon, action_dim, obs_dim, dc.obs_horizon, kp_dim,
                       dc.noise_emb_dim, dc.keypose_emb_dim, cfg.hidden_widths)
    sched.iters = cfg.iters
    return train_ddpm(arrays, dc, sched, net, stats)


def run_task_experiment(exp: TaskExperiment, log=print) -> dict:
    """Train every configured stack and evaluate it.

    Returns a dict with per-stack metric rows and episode reports, the
    predictor report (when one was trained) and timings.
    """
    t0 = time.perf_counter()
    task, demos, kps = demos_and_keyposes(exp)
    stats = fit_norm(demos, kps)
    out: dict = {"task": exp.task, "stacks": {}, "timings": {}}
    predictor: KeyposePredictor | None = None
    if any(g.keypose for g in exp.stacks.values()):
        predictor, rep = fit_predictor(demos, kps, stats, exp.predictor, task.obs_dim)
        out["predictor"] = {"train_mse": rep["train_mse"], "heldout_mse": rep.get("heldout_mse")}
        out["predictor_model"] = predictor
        out["timings"]["predictor"] = time.perf_counter() - t0
        log(f"[{exp.task}] predictor held-out mse {rep.get('heldout_mse')}")
    seeds = range(exp.eval_seed, exp.eval_seed + exp.n_episodes)
    for name, gcfg in exp.stacks.items():
        t1 = time.perf_counter()
        gen, _ = fit_generator(demos, kps, stats, gcfg, task.obs_dim)
        stack = PolicyStack(gen, predictor if gcfg.keypose else None, switch_threshold=exp.switch_threshold,
                            switch_mask=exp.switch_mask if gcfg.keypose else None, label=name,
                            action_horizon=exp.action_horizon)
        rows, reports = evaluate(stack, task, seeds, exp.latency)
        out["stacks"][name] = {"rows": rows, "reports": reports, "overall": overall_rate(rows), "generator": gen}
        out["timings"][name] = time.perf_counter() - t1
        log(f"[{exp.task}] {name}: overall {overall_rate(rows)} ({out['timings'][name]:.0f} s)")
    out["timings"]["total"] = time.perf_counter() - t0
    return out


def first_close_counts(reports) -> dict[str, int]:
    counts = {"left": 0, "right": 0, "none": 0}
    for r in reports:
        counts[r.first_closing_arm or "none"] += 1
    return counts


def bench_latency(gen_cm: CmPolicy, gen_ddpm: DdpmPolicy, calls: int = 20, seed: int = 0) -> list[dict]:
    """Time ``calls`` single-chunk inferences of each generator on random
    observations. One row per call with wall-clock ms and NFE; ``nfe_ratio``
    is the DDPM-to-CM mean NFE ratio, repeated on every row."""
    rng = make_rng(seed)
    rows = []
    for algo, gen in (("cm", gen_cm), ("ddpm", gen_ddpm)):
        net = gen.net
        kp = np.zeros(6) if net.uses_keypose else None
        for i in range(calls):
            obs = rng.uniform(-1, 1, size=(net.obs_horizon, net.obs_dim))
            before = gen.nfe
            t = time.perf_counter()
            if algo == "cm":
                sample_onestep(gen, obs, kp, rng=rng)
            else:
                ddim_sample(gen, obs, kp, rng=rng)
            rows.append({"algo": algo, "call": i, "wall_ms": (time.perf_counter() - t) * 1e3,
                         "nfe": gen.nfe - before})
    per = {a: np.mean([r["nfe"] for r in rows if r["algo"] == a]) for a in ("cm", "ddpm")}
    ratio = per["ddpm"] / per["cm"]
    for r in rows:
        r["nfe_ratio"] = ratio
    return rows
