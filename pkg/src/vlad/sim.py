"""Kinematic tabletop simulator.

Point kinematics only: the end effector moves by the clipped commanded
increment, objects attach/detach by gripper-openness thresholds, and the
drawer slides along a fixed axis while its handle is grasped. All tasks share
one state space so that drawer_open and drawer_close are indistinguishable
from state alone.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, InputError

TASK_IDS = ("pick_place", "drawer_open", "drawer_close", "multi_stage")
MAX_OBJECTS = 3
OBS_DIM = 3 + 3 + 1 + MAX_OBJECTS * 4 + 3 + 1 + 3

INSTRUCTIONS = {
    "pick_place": "pick up the block and place it on the goal",
    "drawer_open": "open the drawer",
    "drawer_close": "close the drawer",
    "multi_stage": "open the drawer then put the block inside the drawer",
}


@dataclass(frozen=True)
class SimConfig:
    grasp_radius: float = 0.05
    attach_below: float = 0.3
    detach_above: float = 0.7
    gripper_rate: float = 0.2
    max_dpos: float = 0.05
    max_drot: float = 0.1
    drawer_gain: float = 1.0
    # grasped handle is lost when the end effector drifts this far from it
    handle_slip: float = 0.1
    handle_closed: tuple[float, float, float] = (0.8, 0.0, 0.1)
    drawer_axis: tuple[float, float, float] = (-1.0, 0.0, 0.0)
    interior_offset: float = 0.15
    drawer_region_radius: float = 0.08
    obs_noise: float = 0.0

    def handle_pos(self, drawer_q: float) -> np.ndarray:
        return np.asarray(self.handle_closed) + np.asarray(self.drawer_axis) * (drawer_q / self.drawer_gain)

    def interior_center(self, drawer_q: float) -> np.ndarray:
        c = self.handle_pos(drawer_q) - np.asarray(self.drawer_axis) * self.interior_offset
        c[2] = 0.0
        return c


DEFAULT_SIM = SimConfig()


def _rng_range(lo, hi):
    return (tuple(float(v) for v in lo), tuple(float(v) for v in hi))


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    instruction: str
    horizon: int = 200
    n_objects: int = 1
    ee_pos_range: tuple = _rng_range((0.0, -0.1, 0.25), (0.1, 0.1, 0.3))
    ee_rot_range: tuple = _rng_range((-0.2, -0.2, -0.2), (0.2, 0.2, 0.2))
    object_range: tuple = _rng_range((0.2, -0.25, 0.0), (0.35, -0.1, 0.0))
    goal_range: tuple = _rng_range((0.2, 0.1, 0.0), (0.35, 0.25, 0.0))
    goal_radius: float = 0.05
    drawer_q_range: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.task_id not in TASK_IDS:
            raise ConfigError(f"unknown task_id {self.task_id!r}; expected one of {TASK_IDS}")
        if not 1 <= self.horizon <= 520:
            raise ConfigError(f"horizon must be in [1, 520], got {self.horizon}")
        if not 0 <= self.n_objects <= MAX_OBJECTS:
            raise ConfigError(f"n_objects must be in [0, {MAX_OBJECTS}]")
        lo, hi = self.drawer_q_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"bad drawer_q_range {self.drawer_q_range}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if isinstance(v, list):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            kw[f.name] = v
        return cls(**kw)


def make_task(task_id: str, **overrides) -> TaskSpec:
    """Built-in task with its default randomization ranges."""
    if task_id not in TASK_IDS:
        raise ConfigError(f"unknown task_id {task_id!r}; expected one of {TASK_IDS}")
    base: dict[str, Any] = {"task_id": task_id, "instruction": INSTRUCTIONS[task_id]}
    if task_id in ("drawer_open", "drawer_close"):
        base.update(n_objects=0, drawer_q_range=(0.35, 0.65))
    elif task_id == "multi_stage":
        base.update(n_objects=1, drawer_q_range=(0.2, 0.4), horizon=300)
    base.update(overrides)
    return TaskSpec(**base)


def load_tasks(path: str | Path) -> dict[str, TaskSpec]:
    """Read task overrides from a JSON or TOML file with a ``[tasks.<id>]`` table per task."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        import tomli

        raw = tomli.loads(text)
    else:
        raw = json.loads(text)
    tasks = raw.get("tasks", raw)
    out = {}
    for tid, over in tasks.items():
        over = dict(over)
        for k, v in list(over.items()):
            if isinstance(v, list):
                over[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        out[tid] = make_task(tid, **over)
    return out


@dataclass
class ObjectState:
    id: int
    pos: np.ndarray
    held: bool = False


@dataclass
class ActionContinuous:
    dpos: np.ndarray
    drot: np.ndarray
    gripper_cmd: float

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "ActionContinuous":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (7,):
            raise InputError(f"action must have 7 components, got shape {a.shape}")
        return cls(a[:3].copy(), a[3:6].copy(), float(a[6]))

    @classmethod
    def zero(cls) -> "ActionContinuous":
        return cls(np.zeros(3), np.zeros(3), 0.0)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.dpos, self.drot, [self.gripper_cmd]]).astype(np.float64)


@dataclass
class WorldState:
    task_id: str
    ee_pos: np.ndarray
    ee_rot: np.ndarray
    gripper_open: float
    objects: list[ObjectState]
    drawer_q: float
    handle_held: bool
    goal_center: np.ndarray
    goal_radius: float
    step_index: int = 0
    rng_state: dict = field(default_factory=dict)

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)

    @property
    def held_object(self) -> ObjectState | None:
        for o in self.objects:
            if o.held:
                return o
        return None

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "ee_pos": self.ee_pos.tolist(),
            "ee_rot": self.ee_rot.tolist(),
            "gripper_open": self.gripper_open,
            "objects": [{"id": o.id, "pos": o.pos.tolist(), "held": o.held} for o in self.objects],
            "drawer_q": self.drawer_q,
            "handle_held": self.handle_held,
            "goal_center": self.goal_center.tolist(),
            "goal_radius": self.goal_radius,
            "step_index": self.step_index,
            "rng_state": self.rng_state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldState":
        return cls(
            task_id=d["task_id"],
            ee_pos=np.array(d["ee_pos"], dtype=np.float64),
            ee_rot=np.array(d["ee_rot"], dtype=np.float64),
            gripper_open=float(d["gripper_open"]),
            objects=[ObjectState(o["id"], np.array(o["pos"], dtype=np.float64), bool(o["held"])) for o in d["objects"]],
            drawer_q=float(d["drawer_q"]),
            handle_held=bool(d["handle_held"]),
            goal_center=np.array(d["goal_center"], dtype=np.float64),
            goal_radius=float(d["goal_radius"]),
            step_index=int(d["step_index"]),
            rng_state=d.get("rng_state", {}),
        )


@dataclass
class Observation:
    ee_pos: np.ndarray
    ee_rot: np.ndarray
    gripper_open: float
    object_rel: np.ndarray  # (MAX_OBJECTS, 3)
    object_present: np.ndarray  # (MAX_OBJECTS,)
    handle_rel: np.ndarray
    drawer_q: float
    goal_rel: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        parts = [self.ee_pos, self.ee_rot, [self.gripper_open]]
        for i in range(MAX_OBJECTS):
            parts += [self.object_rel[i], [self.object_present[i]]]
        parts += [self.handle_rel, [self.drawer_q], self.goal_rel]
        return np.concatenate(parts).astype(np.float64)

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "Observation":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (OBS_DIM,):
            raise InputError(f"observation vector must have {OBS_DIM} entries")
        slots = v[7 : 7 + 4 * MAX_OBJECTS].reshape(MAX_OBJECTS, 4)
        tail = v[7 + 4 * MAX_OBJECTS :]
        return cls(v[:3].copy(), v[3:6].copy(), float(v[6]), slots[:, :3].copy(), slots[:, 3].copy(),
                   tail[:3].copy(), float(tail[3]), tail[4:7].copy())


def reset(task: TaskSpec, seed: int, cfg: SimConfig = DEFAULT_SIM) -> WorldState:
    if task.task_id not in TASK_IDS:
        raise ConfigError(f"unknown task_id {task.task_id!r}")
    if seed < 0:
        raise ConfigError("seed must be >= 0")
    rng = np.random.default_rng(seed)
    # fixed draw order across tasks: identical seeds give identical geometry
    ee_pos = rng.uniform(*task.ee_pos_range)
    ee_rot = rng.uniform(*task.ee_rot_range)
    obj_pos = [rng.uniform(*task.object_range) for _ in range(MAX_OBJECTS)]
    goal = rng.uniform(*task.goal_range)
    u = rng.uniform()
    lo, hi = task.drawer_q_range
    drawer_q = lo + (hi - lo) * u
    objects = [ObjectState(i, obj_pos[i]) for i in range(task.n_objects)]
    return WorldState(
        task_id=task.task_id,
        ee_pos=ee_pos,
        ee_rot=ee_rot,
        gripper_open=1.0,
        objects=objects,
        drawer_q=float(drawer_q),
        handle_held=False,
        goal_center=goal,
        goal_radius=task.goal_radius,
        step_index=0,
        rng_state=rng.bit_generator.state,
    )


def _xy_dist(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def is_success(state: WorldState, cfg: SimConfig = DEFAULT_SIM) -> bool:
    tid = state.task_id
    if tid == "drawer_open":
        return state.drawer_q > 0.9
    if tid == "drawer_close":
        return state.drawer_q < 0.1
    obj = state.objects[0] if state.objects else None
    if obj is None or obj.held:
        return False
    if tid == "pick_place":
        return _xy_dist(obj.pos, state.goal_center) <= state.goal_radius
    # multi_stage
    return state.drawer_q > 0.9 and _xy_dist(obj.pos, cfg.interior_center(state.drawer_q)) <= cfg.drawer_region_radius


def step(state: WorldState, action, cfg: SimConfig = DEFAULT_SIM) -> tuple[WorldState, bool]:
    if not isinstance(action, ActionContinuous):
        action = ActionContinuous.from_array(action)
    a = action.as_array()
    if not np.all(np.isfinite(a)):
        raise InputError(f"non-finite action components: {a}")

    dpos = np.clip(action.dpos, -cfg.max_dpos, cfg.max_dpos)
    drot = np.clip(action.drot, -cfg.max_drot, cfg.max_drot)
    cmd = float(action.gripper_cmd)

    s = state.copy()
    if cmd > 0:
        s.gripper_open = max(0.0, s.gripper_open - cfg.gripper_rate)
    elif cmd < 0:
        s.gripper_open = min(1.0, s.gripper_open + cfg.gripper_rate)

    old_ee = s.ee_pos.copy()
    s.ee_pos = s.ee_pos + dpos
    s.ee_pos[2] = max(s.ee_pos[2], 0.0)
    s.ee_rot = s.ee_rot + drot
    moved = s.ee_pos - old_ee

    held = s.held_object
    if held is not None:
        held.pos = s.ee_pos.copy()

    if s.handle_held:
        axis = np.asarray(cfg.drawer_axis)
        s.drawer_q = float(np.clip(s.drawer_q + cfg.drawer_gain * float(moved @ axis), 0.0, 1.0))
        if np.linalg.norm(s.ee_pos - cfg.handle_pos(s.drawer_q)) > cfg.handle_slip:
            s.handle_held = False

    if held is not None or s.handle_held:
        if s.gripper_open > cfg.detach_above:
            if held is not None:
                held.held = False
                held.pos[2] = 0.0  # released objects settle on the table
            s.handle_held = False
    elif s.gripper_open < cfg.attach_below:
        best, best_d = None, cfg.grasp_radius
        for o in s.objects:
            d = float(np.linalg.norm(o.pos - s.ee_pos))
            if d <= best_d:
                best, best_d = o, d
        d_handle = float(np.linalg.norm(cfg.handle_pos(s.drawer_q) - s.ee_pos))
        if d_handle <= best_d:
            s.handle_held = True
        elif best is not None:
            best.held = True
            best.pos = s.ee_pos.copy()

    s.step_index += 1
    return s, is_success(s, cfg)


def observe(state: WorldState, seed: int | None = None, cfg: SimConfig = DEFAULT_SIM,
            noise: float | None = None) -> Observation:
    sigma = cfg.obs_noise if noise is None else noise
    rel = np.zeros((MAX_OBJECTS, 3))
    present = np.zeros(MAX_OBJECTS)
    for i, o in enumerate(state.objects[:MAX_OBJECTS]):
        rel[i] = o.pos - state.ee_pos
        present[i] = 1.0
    obs = Observation(
        ee_pos=state.ee_pos.copy(),
        ee_rot=state.ee_rot.copy(),
        gripper_open=float(state.gripper_open),
        object_rel=rel,
        object_present=present,
        handle_rel=cfg.handle_pos(state.drawer_q) - state.ee_pos,
        drawer_q=float(state.drawer_q),
        goal_rel=state.goal_center - state.ee_pos,
    )
    if sigma > 0:
        rng = np.random.default_rng(seed)
        obs = replace(
            obs,
            ee_pos=obs.ee_pos + rng.normal(0, sigma, 3),
            ee_rot=obs.ee_rot + rng.normal(0, sigma, 3),
            gripper_open=obs.gripper_open + float(rng.normal(0, sigma)),
            object_rel=obs.object_rel + rng.normal(0, sigma, (MAX_OBJECTS, 3)) * present[:, None],
            handle_rel=obs.handle_rel + rng.normal(0, sigma, 3),
            drawer_q=obs.drawer_q + float(rng.normal(0, sigma)),
            goal_rel=obs.goal_rel + rng.normal(0, sigma, 3),
        )
    return obs


def target_position(state: WorldState, cfg: SimConfig = DEFAULT_SIM) -> np.ndarray:
    """Where the task currently wants the end effector to go (handle, object, or placement site)."""
    tid = state.task_id
    if tid in ("drawer_open", "drawer_close"):
        return cfg.handle_pos(state.drawer_q)
    if tid == "multi_stage" and state.drawer_q <= 0.9 and state.held_object is None:
        return cfg.handle_pos(state.drawer_q)
    held = state.held_object
    if held is None and state.objects:
        return state.objects[0].pos.copy()
    if tid == "multi_stage":
        return cfg.interior_center(state.drawer_q)
    return state.goal_center.copy()
