"""Deterministic planar two-arm kinematic simulator.

The workspace is the unit square seen from the side: ``x`` runs along the
table and ``y`` is height above it. Each arm is a point end-effector with a
gripper aperture in [0, 1]. Objects rest on the table, on a conveyor belt
or are rigidly attached to a gripper. Actions are absolute targets
``(x, y, g)`` per arm (left first); arms move toward them at a capped speed
and grippers slew at a capped rate.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .data import Trajectory
from .errors import ConfigurationError, ContractError, GenerationError
from .nn import make_rng

ATTACHMENTS = ("table", "left", "right", "belt")
ARMS = ("left", "right")
ACTION_DIM = 6


@dataclass
class Physics:
    arm_speed: float = 0.02
    aperture_rate: float = 0.1
    grasp_radius: float = 0.06
    close_thresh: float = 0.5
    release_thresh: float = 0.7
    rest_height: float = 0.02
    floor_height: float = -0.2


@dataclass
class TaskSpec:
    name: str
    T: int = 400
    objects: tuple[str, ...] = ("cube",)
    # object name -> ((x_lo, x_hi)); objects start resting on the table
    ranges: dict = field(default_factory=dict)
    belt_speed: float = 0.0
    belt_start: float = 0.3
    belt_end: float = 0.76
    fixed_layout: bool = False
    styles: tuple[str, ...] = ("default",)
    physics: Physics = field(default_factory=Physics)

    @property
    def stages(self) -> list[str]:
        return [name for name, _ in STAGES[self.name]]

    @property
    def obs_dim(self) -> int:
        return 6 + len(self.objects) * (2 + len(ATTACHMENTS))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects"] = list(self.objects)
        d["styles"] = list(self.styles)
        d["ranges"] = {k: list(v) for k, v in self.ranges.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        name = d.get("name")
        if name not in TASK_DEFAULTS:
            raise ConfigurationError(f"unknown task {name!r}")
        base = make_task(name)
        unknown = set(d) - set(base.to_dict())
        if unknown:
            raise ConfigurationError(f"unknown task keys: {sorted(unknown)}")
        if "physics" in d:
            d["physics"] = Physics(**{**asdict(base.physics), **d["physics"]})
        if "ranges" in d:
            d["ranges"] = {**base.ranges, **{k: tuple(v) for k, v in d["ranges"].items()}}
        for key in ("objects", "styles"):
            if key in d:
                d[key] = tuple(d[key])
        return replace(base, **d)


@dataclass
class LatencyModel:
    mode: str = "nfe-cost"  # "wallclock" | "nfe-cost"
    tick_ms: float = 20.0
    cost_per_nfe_ms: float = 20.0

    def __post_init__(self):
        if self.mode not in ("wallclock", "nfe-cost"):
            raise ConfigurationError(f"unknown latency mode {self.mode!r}")
        if self.tick_ms <= 0:
            raise ConfigurationError("tick_ms must be positive")


def charge_latency(model: LatencyModel, measured_ms: float = 0.0, nfe: int = 0) -> int:
    """Simulated ticks consumed by one inference call."""
    if measured_ms < 0 or nfe < 0:
        raise ContractError("latency inputs must be non-negative")
    cost = measured_ms if model.mode == "wallclock" else nfe * model.cost_per_nfe_ms
    # guard against 20.000000000000004-style rounding before the ceiling
    return int(math.ceil(round(cost / model.tick_ms, 9)))


# ---------------------------------------------------------------------------
# world state


@dataclass
class ObjectState:
    name: str
    pos: np.ndarray
    attached: str = "table"
    offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    belt_origin: tuple[float, int] | None = None  # (x when placed, tick when placed)


@dataclass
class WorldState:
    ee: dict[str, np.ndarray]
    aperture: dict[str, float]
    objects: list[ObjectState]
    belt_speed: float = 0.0
    tick: int = 0
    stages: dict[str, int | None] = field(default_factory=dict)  # stage -> latch tick

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)

    def holding(self, arm: str) -> ObjectState | None:
        for ob in self.objects:
            if ob.attached == arm:
                return ob
        return None

    def obj(self, name: str) -> ObjectState:
        for ob in self.objects:
            if ob.name == name:
                return ob
        raise KeyError(name)

    def same_as(self, other: "WorldState") -> bool:
        if self.tick != other.tick or self.stages != other.stages or self.aperture != other.aperture:
            return False
        if any(not np.array_equal(self.ee[a], other.ee[a]) for a in ARMS):
            return False
        for a, b in zip(self.objects, other.objects):
            if a.attached != b.attached or not np.array_equal(a.pos, b.pos):
                return False
        return True


def observation(state: WorldState) -> np.ndarray:
    parts = []
    for arm in ARMS:
        parts.extend([state.ee[arm][0], state.ee[arm][1], state.aperture[arm]])
    for ob in state.objects:
        parts.extend(ob.pos)
    for ob in state.objects:
        parts.extend(1.0 if ob.attached == a else 0.0 for a in ATTACHMENTS)
    return np.array(parts, dtype=np.float64)


def state_as_action(state: WorldState) -> np.ndarray:
    """The action that holds both arms where they are."""
    return observation(state)[:ACTION_DIM].copy()


# ---------------------------------------------------------------------------
# tasks


HOME = {"left": (0.15, 0.4), "right": (0.85, 0.4)}

TASK_DEFAULTS = {
    "transfer": dict(objects=("cube",), ranges={"cube": (0.6, 0.8)}),
    "conveyor": dict(objects=("bag",), ranges={"bag": (0.1, 0.2)}, belt_speed=0.008,
                     belt_start=0.3, belt_end=0.76),
    "pick-order": dict(objects=("sleeve", "cup"), ranges={"sleeve": (0.15, 0.3), "cup": (0.7, 0.85)},
                       styles=("left-first", "right-first")),
}


def _lifted(ob, arm, height=0.1):
    return ob.attached == arm and ob.pos[1] >= height


STAGES: dict[str, list[tuple[str, Callable[[WorldState], bool]]]] = {
    "transfer": [
        ("grasp", lambda s: s.obj("cube").attached == "right"),
        ("lift", lambda s: _lifted(s.obj("cube"), "right")),
        ("transfer", lambda s: s.obj("cube").attached == "left"),
    ],
    "conveyor": [
        ("place", lambda s: s.obj("bag").attached == "belt"),
        ("pick", lambda s: s.obj("bag").attached == "right"),
        ("lift", lambda s: _lifted(s.obj("bag"), "right")),
    ],
    "pick-order": [
        ("first-grasp", lambda s: any(ob.attached in ARMS for ob in s.objects)),
        ("both-grasped", lambda s: all(ob.attached in ARMS for ob in s.objects)),
        ("both-lifted", lambda s: all(ob.attached in ARMS and ob.pos[1] >= 0.1 for ob in s.objects)),
    ],
}


def make_task(name: str, **overrides) -> TaskSpec:
    if name not in TASK_DEFAULTS:
        raise ConfigurationError(f"unknown task {name!r}")
    return TaskSpec(name=name, **{**TASK_DEFAULTS[name], **overrides})


def load_task(path) -> TaskSpec:
    with open(path, encoding="utf-8") as fh:
        return TaskSpec.from_dict(json.load(fh))


def reset(task: TaskSpec, seed: int) -> tuple[WorldState, np.ndarray]:
    if task.name not in STAGES:
        raise ConfigurationError(f"unknown task {task.name!r}")
    rng = make_rng(seed)
    objects = []
    for name in task.objects:
        lo, hi = task.ranges[name]
        x = 0.5 * (lo + hi) if task.fixed_layout else float(rng.uniform(lo, hi))
        objects.append(ObjectState(name, np.array([x, task.physics.rest_height])))
    state = WorldState(
        ee={a: np.array(HOME[a], dtype=np.float64) for a in ARMS},
        aperture={a: 1.0 for a in ARMS},
        objects=objects,
        belt_speed=task.belt_speed,
        tick=0,
        stages={name: None for name in task.stages},
    )
    return state, observation(state)


def _on_belt(task: TaskSpec, x: float) -> bool:
    return task.belt_speed > 0 and task.belt_start <= x < task.belt_end


def step(task: TaskSpec, state: WorldState, action) -> tuple[WorldState, np.ndarray, dict[str, int | None]]:
    """Advance one tick. Returns ``(next_state, observation, stage latches)``."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (ACTION_DIM,):
        raise ContractError(f"action must have shape ({ACTION_DIM},), got {action.shape}")
    if not np.isfinite(action).all():
        raise ContractError("non-finite action")
    ph = task.physics
    s = state.copy()
    prev_ap = dict(s.aperture)
    for i, arm in enumerate(ARMS):
        target = np.clip(action[3 * i : 3 * i + 2], 0.0, 1.0)
        delta = target - s.ee[arm]
        dist = float(np.hypot(*delta))
        if dist > ph.arm_speed:
            delta = delta * (ph.arm_speed / dist)
        s.ee[arm] = s.ee[arm] + delta
        g_target = float(np.clip(action[3 * i + 2], 0.0, 1.0))
        dg = float(np.clip(g_target - s.aperture[arm], -ph.aperture_rate, ph.aperture_rate))
        s.aperture[arm] = s.aperture[arm] + dg
    s.tick += 1
    # held objects follow their arm before any grasp test sees them
    for ob in s.objects:
        if ob.attached in ARMS:
            ob.pos = s.ee[ob.attached] + ob.offset
    for ob in s.objects:
        if ob.attached == "belt":
            x0, t0 = ob.belt_origin
            ob.pos = np.array([x0 + s.belt_speed * (s.tick - t0), ph.rest_height])
            if ob.pos[0] >= task.belt_end:
                ob.attached = "table"
                ob.belt_origin = None
                ob.pos = np.array([ob.pos[0], ph.floor_height])
    for arm in ARMS:
        held = s.holding(arm)
        g0, g1 = prev_ap[arm], s.aperture[arm]
        if held is not None and g1 > ph.release_thresh:
            x = float(s.ee[arm][0] + held.offset[0])
            if _on_belt(task, x):
                held.attached = "belt"
                held.belt_origin = (x, s.tick)
            else:
                held.attached = "table"
            held.pos = np.array([x, ph.rest_height])
        elif held is None and g0 >= ph.close_thresh > g1:
            other = "right" if arm == "left" else "left"
            best, best_d = None, ph.grasp_radius
            for ob in s.objects:
                if ob.attached in ("table", "belt", other):
                    d = float(np.hypot(*(ob.pos - s.ee[arm])))
                    if d <= best_d:
                        best, best_d = ob, d
            if best is not None:
                best.attached = arm
                best.belt_origin = None
                best.offset = best.pos - s.ee[arm]
    for ob in s.objects:
        if ob.attached in ARMS:
            ob.pos = s.ee[ob.attached] + ob.offset
    for name, pred in STAGES[task.name]:
        if s.stages.get(name) is None and pred(s):
            s.stages[name] = s.tick
    return s, observation(s), dict(s.stages)


def stage_success(task: TaskSpec, state: WorldState) -> dict[str, bool]:
    return {name: state.stages.get(name) is not None for name in task.stages}


def all_stages_done(task: TaskSpec, state: WorldState) -> bool:
    return all(stage_success(task, state).values())


class Sim:
    """Stateful convenience wrapper around :func:`reset` and :func:`step`."""

    def __init__(self, task: TaskSpec):
        self.task = task
        self.state: WorldState | None = None

    def reset(self, seed: int) -> np.ndarray:
        self.state, obs = reset(self.task, seed)
        return obs

    def step(self, action) -> np.ndarray:
        self.state, obs, _ = step(self.task, self.state, action)
        return obs

    @property
    def done(self) -> bool:
        return all_stages_done(self.task, self.state)


# ---------------------------------------------------------------------------
# scripted demonstrations


class _Script:
    """Waypoint scripting helpers. Each helper yields actions until done."""

    def __init__(self, sim: Sim):
        self.sim = sim
        s = sim.state
        self.cmd = {a: [float(s.ee[a][0]), float(s.ee[a][1]), float(s.aperture[a])] for a in ARMS}
        self.events: dict[str, int] = {}

    @property
    def state(self) -> WorldState:
        return self.sim.state

    def action(self) -> np.ndarray:
        return np.array(self.cmd["left"] + self.cmd["right"], dtype=np.float64)

    def mark(self, name: str) -> None:
        self.events.setdefault(name, self.state.tick)

    def _settled(self, arm: str) -> bool:
        s = self.state
        x, y, g = self.cmd[arm]
        return float(np.hypot(s.ee[arm][0] - x, s.ee[arm][1] - y)) < 1e-9 and abs(s.aperture[arm] - g) < 1e-9

    def move(self, pause: int = 0, **targets) -> Iterator[np.ndarray]:
        """``left=(x, y)`` / ``right=(x, y, g)`` targets; waits until every arm settles."""
        for arm, tgt in targets.items():
            tgt = list(tgt)
            self.cmd[arm] = [float(tgt[0]), float(tgt[1]), float(tgt[2]) if len(tgt) > 2 else self.cmd[arm][2]]
        while not all(self._settled(a) for a in ARMS):
            yield self.action()
        yield from self.hold(pause)

    def grip(self, arm: str, g: float, event: str | None = None, pause: int = 0) -> Iterator[np.ndarray]:
        if event:
            self.mark(event)
        self.cmd[arm][2] = float(g)
        while not self._settled(arm):
            yield self.action()
        yield from self.hold(pause)

    def hold(self, n: int) -> Iterator[np.ndarray]:
        for _ in range(n):
            yield self.action()


def _transfer_script(sc: _Script, task: TaskSpec, style: str, rng: np.random.Generator):
    rest = task.physics.rest_height
    # grasp slightly off-centre and at varying depth so the handover has to
    # aim at the cube itself rather than at the right gripper
    gx = float(sc.state.obj("cube").pos[0] + rng.uniform(-0.02, 0.02))
    gy = rest + float(rng.uniform(0.0, 0.025))
    yield from sc.move(right=(gx, 0.12), pause=3)
    yield from sc.move(right=(gx, gy))
    yield from sc.grip("right", 0.0, event="grasp_close")
    yield from sc.move(right=(gx, 0.25), pause=3)
    cx, cy = (float(v) for v in sc.state.obj("cube").pos)
    yield from sc.move(left=(cx - 0.03, cy + 0.05), pause=6)
    yield from sc.move(left=(cx - 0.03, cy), pause=6)
    yield from sc.grip("left", 0.0, event="handover_close", pause=2)
    yield from sc.grip("right", 1.0, event="handover_open")
    yield from sc.move(right=(0.85, 0.4), left=(0.3, 0.35), pause=3)


def _conveyor_script(sc: _Script, task: TaskSpec, style: str, rng: np.random.Generator):
    rest = task.physics.rest_height
    bag = lambda: sc.state.obj("bag")  # noqa: E731
    bx = float(bag().pos[0])
    catch_x = 0.6
    sc.cmd["right"] = [catch_x, 0.12, 1.0]
    yield from sc.move(left=(bx, 0.12), pause=3)
    yield from sc.move(left=(bx, rest), pause=4)
    yield from sc.grip("left", 0.0, event="place_grasp")
    yield from sc.move(left=(bx, 0.15), pause=2)
    yield from sc.move(left=(0.4, 0.15))
    yield from sc.move(left=(0.4, rest))
    yield from sc.grip("left", 1.0, event="place_release")
    yield from sc.move(left=(0.4, 0.2))
    sc.cmd["left"] = [HOME["left"][0], HOME["left"][1], 1.0]
    # wait low at the catch point and close once the bag reaches the gripper
    sc.cmd["right"] = [catch_x, rest, 1.0]
    while bag().attached == "belt" and bag().pos[0] < catch_x:
        yield sc.action()
    if bag().attached != "belt" or abs(sc.state.ee["right"][1] - rest) > 1e-6:
        raise GenerationError("conveyor script missed the bag")
    yield from sc.grip("right", 0.0, event="pick_close")
    if bag().attached != "right":
        raise GenerationError("conveyor script missed the bag")
    x = float(sc.state.ee["right"][0])
    yield from sc.move(right=(x, 0.25), left=(HOME["left"][0], HOME["left"][1]), pause=3)


def _pick_order_script(sc: _Script, task: TaskSpec, style: str, rng: np.random.Generator):
    if style not in ("left-first", "right-first"):
        raise ContractError(f"pick-order style must be left-first or right-first, got {style!r}")
    rest = task.physics.rest_height
    order = ("left", "right") if style == "left-first" else ("right", "left")
    target = {"left": "sleeve", "right": "cup"}
    for arm in order:
        x = float(sc.state.obj(target[arm]).pos[0])
        yield from sc.move(pause=3, **{arm: (x, 0.12)})
        yield from sc.move(pause=4, **{arm: (x, rest)})
        yield from sc.grip(arm, 0.0, event=f"{arm}_close")
        yield from sc.move(pause=3, **{arm: (x, 0.25)})


SCRIPTS = {"transfer": _transfer_script, "conveyor": _conveyor_script, "pick-order": _pick_order_script}


def scripted_demo(task: TaskSpec, seed: int, style: str | None = None) -> Trajectory:
    """Run the task's scripted demonstrator for exactly ``task.T`` ticks."""
    style = style or task.styles[0]
    if style not in task.styles:
        raise ContractError(f"style {style!r} not valid for task {task.name}")
    sim = Sim(task)
    sim.reset(seed)
    sc = _Script(sim)
    gen = SCRIPTS[task.name](sc, task, style, make_rng(2**32 + seed))
    obs, actions = [], []
    finished = False
    for _ in range(task.T):
        if not finished:
            try:
                a = next(gen)
            except StopIteration:
                finished = True
        if finished:
            a = sc.action()
        obs.append(observation(sim.state))
        actions.append(a)
        sim.step(a)
    if not finished:
        raise GenerationError(f"{task.name} script did not finish within {task.T} ticks (seed {seed})")
    if not sim.done:
        raise GenerationError(f"{task.name} script failed its stages (seed {seed}): {sim.state.stages}")
    return Trajectory(task=task.name, seed=seed, obs=np.array(obs), actions=np.array(actions), events=sc.events)


def replay(task: TaskSpec, traj: Trajectory) -> WorldState:
    """Open-loop replay of a trajectory's actions from its seed."""
    state, _ = reset(task, traj.seed)
    for a in traj.actions:
        state, _, _ = step(task, state, a)
    return state


def generate_demos(task: TaskSpec, n: int, seed: int = 0, styles=None, log=None) -> list[Trajectory]:
    """``n`` successful demos on consecutive seeds, cycling through ``styles``.

    Seeds whose script fails are skipped and reported through ``log``.
    """
    styles = list(styles or task.styles)
    out = []
    s = seed
    while len(out) < n:
        style = styles[len(out) % len(styles)]
        try:
            out.append(scripted_demo(task, s, style))
        except GenerationError as exc:
            if log is not None:
                log(f"rejected seed {s}: {exc}")
        s += 1
        if s - seed > 10 * n + 100:
            raise GenerationError(f"too many rejected seeds for {task.name}")
    return out


def export_trace_csv(path, states: list[WorldState]) -> Path:
    """Per-tick CSV of arm and object positions for plotting."""
    path = Path(path)
    rows = ["tick,arm_or_object,x,y,aperture_or_attachment"]
    for s in states:
        for arm in ARMS:
            rows.append(f"{s.tick},{arm},{s.ee[arm][0]:.6f},{s.ee[arm][1]:.6f},{s.aperture[arm]:.6f}")
        for ob in s.objects:
            rows.append(f"{s.tick},{ob.name},{ob.pos[0]:.6f},{ob.pos[1]:.6f},{ob.attached}")
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path
