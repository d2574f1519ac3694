"""Scripted expert policies, gripper-flip noise injection and rollout collection."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import sim
from .errors import CollectionError, ConfigError
from .sim import ActionContinuous, Observation, SimConfig, TaskSpec, WorldState

log = logging.getLogger(__name__)

HOVER_Z = 0.15
PLACE_Z = 0.02
GRASP_Z = 0.0
# widened tolerance (in waypoint_tol units) once a gripper transition is under way
HYSTERESIS = 3.0


@dataclass(frozen=True)
class TeacherConfig:
    flip_noise_p: float = 0.03
    flip_durations: tuple[int, ...] = (1, 2)
    jitter_sigma: float = 0.005
    waypoint_tol: float = 0.01
    gain: float = 0.8
    # teacher moves slower than the simulator's per-step clip
    max_speed: float = 0.03
    rot_gain: float = 0.5
    # per-axis speeds snap to these fractions of the speed limit, so motion labels fall
    # into a few well-populated bins; empty keeps the continuous proportional command
    speed_levels: tuple[float, ...] = (0.0, 1 / 12, 1 / 6, 1 / 3, 2 / 3, 1.0)
    # "hold": only while the scripted command is close; "steady": any settled segment
    noise_scope: Literal["hold", "steady"] = "steady"
    # frames after a scripted gripper transition during which no flip is injected
    guard_frames: int = 2
    settle_frames: int = 2
    # False records the pre-jitter motion as the label while still executing the jittered one
    label_jitter: bool = False
    teacher_id: str = "scripted-v1"

    def __post_init__(self):
        if not 0.0 <= self.flip_noise_p <= 0.2:
            raise ConfigError(f"flip_noise_p must be in [0, 0.2], got {self.flip_noise_p}")
        if not self.flip_durations or any(d not in (1, 2) for d in self.flip_durations):
            raise ConfigError("flip durations must be drawn from {1, 2}")
        if self.jitter_sigma < 0 or self.waypoint_tol <= 0:
            raise ConfigError("jitter_sigma must be >= 0 and waypoint_tol > 0")
        if any(not 0.0 <= v <= 1.0 for v in self.speed_levels):
            raise ConfigError("speed_levels are fractions of the speed limit in [0, 1]")
        if self.noise_scope not in ("hold", "steady"):
            raise ConfigError(f"unknown noise_scope {self.noise_scope!r}")


@dataclass
class Frame:
    obs: Observation
    action: ActionContinuous
    state: WorldState
    # scripted command before noise; kept for auditing the injector
    clean_gripper: float = 0.0
    injected: bool = False
    # action sent to the simulator when it differs from the recorded label
    executed: ActionContinuous | None = None

    @property
    def applied(self) -> ActionContinuous:
        return self.action if self.executed is None else self.executed


@dataclass
class Trajectory:
    task: TaskSpec
    frames: list[Frame]
    success: bool
    seed: int
    teacher_id: str
    final_state: WorldState | None = None
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def gripper_commands(self) -> np.ndarray:
        return np.array([f.action.gripper_cmd for f in self.frames])


def _toward(cur: np.ndarray, target: np.ndarray, gain: float) -> np.ndarray:
    return gain * (target - cur)


def snap_speed(v: np.ndarray, limit: float, levels: Sequence[float]) -> np.ndarray:
    """Round each |v_i| to the nearest ``levels`` fraction of ``limit``, keeping the sign."""
    if not levels:
        return v
    lv = np.asarray(sorted(levels)) * limit
    idx = np.abs(np.abs(v)[:, None] - lv[None, :]).argmin(axis=1)
    return np.sign(v) * lv[idx]


def clean_action(state: WorldState, cfg: TeacherConfig, sim_cfg: SimConfig = sim.DEFAULT_SIM,
                 prev_grip: float | None = None) -> ActionContinuous:
    """Noise-free scripted action; a pure function of the world state and the previous scripted gripper command.

    ``prev_grip`` supplies hysteresis so jitter near a waypoint cannot toggle the gripper decision.
    """
    tol = cfg.waypoint_tol
    ee = state.ee_pos
    drot = np.clip(-cfg.rot_gain * state.ee_rot, -sim_cfg.max_drot, sim_cfg.max_drot)
    drot = snap_speed(drot, sim_cfg.max_drot, cfg.speed_levels)
    target, grip = _plan(state, cfg, sim_cfg, prev_grip or 0.0)
    dpos = np.zeros(3) if target is None else _toward(ee, target, cfg.gain)
    dpos = snap_speed(np.clip(dpos, -cfg.max_speed, cfg.max_speed), cfg.max_speed, cfg.speed_levels)
    if target is not None and np.linalg.norm(target - ee) < tol * 0.25:
        dpos = np.zeros(3)
    return ActionContinuous(dpos, drot, grip)


def _plan(state: WorldState, cfg: TeacherConfig, sim_cfg: SimConfig, prev: float):
    """Return (waypoint or None, gripper command) for the current scripted stage."""
    tid = state.task_id
    if tid in ("drawer_open", "drawer_close"):
        return _plan_drawer(state, 1.0 if tid == "drawer_open" else 0.0, cfg, sim_cfg, prev)
    if tid == "multi_stage":
        # the release threshold widens once releasing has begun, so jitter cannot re-trigger the pull
        release_q = 0.92 - (0.02 if prev < 0 and state.handle_held else 0.0)
        if state.held_object is None and state.drawer_q <= release_q:
            return _plan_drawer(state, 1.0, cfg, sim_cfg, prev)
        if state.handle_held:
            return None, -1.0
        return _plan_pick(state, sim_cfg.interior_center(state.drawer_q), cfg, sim_cfg, prev)
    return _plan_pick(state, state.goal_center, cfg, sim_cfg, prev)


def _plan_drawer(state, q_target, cfg, sim_cfg, prev):
    ee = state.ee_pos
    handle = sim_cfg.handle_pos(state.drawer_q)
    if state.handle_held:
        return sim_cfg.handle_pos(q_target), 1.0
    d = np.linalg.norm(handle - ee)
    # hysteresis: once closing has begun near the handle, keep closing
    if d <= cfg.waypoint_tol or (prev > 0 and d <= HYSTERESIS * cfg.waypoint_tol):
        return handle, 1.0
    return handle, -1.0


def _plan_pick(state, place_at, cfg, sim_cfg, prev):
    ee = state.ee_pos
    tol = cfg.waypoint_tol
    held = state.held_object
    if held is None:
        obj = state.objects[0].pos
        grasp = np.array([obj[0], obj[1], GRASP_Z])
        above = np.array([obj[0], obj[1], HOVER_Z])
        d = np.linalg.norm(grasp - ee)
        if d <= tol or (prev > 0 and d <= HYSTERESIS * tol):
            return grasp, 1.0
        if sim._xy_dist(ee, obj) > tol:
            # stay high until roughly above the object
            if ee[2] < HOVER_Z - tol and sim._xy_dist(ee, obj) > 4 * tol and state.gripper_open > 0.5:
                return np.array([ee[0], ee[1], HOVER_Z]), -1.0
            return above, -1.0
        return grasp, -1.0
    above_goal = np.array([place_at[0], place_at[1], HOVER_Z])
    place = np.array([place_at[0], place_at[1], PLACE_Z])
    low = ee[2] < HOVER_Z - tol
    if sim._xy_dist(ee, place_at) > (HYSTERESIS * tol if low else tol):
        if low and sim._xy_dist(ee, place_at) > 4 * tol:
            return np.array([ee[0], ee[1], HOVER_Z]), 1.0
        return above_goal, 1.0
    if ee[2] > PLACE_Z + (HYSTERESIS * tol if prev < 0 else tol):
        return place, 1.0
    return place, -1.0


class ScriptedTeacher:
    """Stateful wrapper adding dpos jitter and spurious gripper flips to `clean_action`."""

    def __init__(self, cfg: TeacherConfig, rng: np.random.Generator, sim_cfg: SimConfig = sim.DEFAULT_SIM):
        self.cfg = cfg
        self.rng = rng
        self.sim_cfg = sim_cfg
        self.flip_left = 0
        self.last_clean = None
        self.stable_for = 0
        self.injected = 0
        self.prev_flipped = False
        self.absorbed = 0

    def act(self, state: WorldState) -> tuple[ActionContinuous, float, bool]:
        cfg = self.cfg
        a = clean_action(state, cfg, self.sim_cfg, self.last_clean)
        clean_g = a.gripper_cmd
        self.unjittered_dpos = a.dpos.copy()
        if cfg.jitter_sigma > 0:
            a.dpos = np.clip(a.dpos + self.rng.normal(0.0, cfg.jitter_sigma, 3), -self.sim_cfg.max_dpos, self.sim_cfg.max_dpos)

        if self.last_clean is None:
            # episode start is not a transition, but frame 0 has no predecessor to revert to
            self.stable_for = self.cfg.guard_frames - 1
        elif np.sign(clean_g) != np.sign(self.last_clean):
            self.stable_for = 0
            if self.prev_flipped:
                # the flip merges into the scripted transition and never reverts
                self.injected -= 1
                self.absorbed += 1
            self.flip_left = 0  # a scripted transition cancels any pending flip
        else:
            self.stable_for += 1
        self.last_clean = clean_g

        flipped = False
        if self.flip_left > 0:
            self.flip_left -= 1
            flipped = True
        elif cfg.flip_noise_p > 0 and not self.prev_flipped and self._eligible(clean_g):
            if self.rng.uniform() < cfg.flip_noise_p:
                self.flip_left = int(self.rng.choice(cfg.flip_durations)) - 1
                self.injected += 1
                flipped = True
        if flipped:
            a.gripper_cmd = -clean_g
        # a flipped run must revert for at least one frame before the next injection
        self.prev_flipped = flipped
        return a, clean_g, flipped

    def _eligible(self, clean_g: float) -> bool:
        if self.stable_for < self.cfg.guard_frames:
            return False
        return self.cfg.noise_scope == "steady" or clean_g > 0


def rollout(task: TaskSpec, seed: int, cfg: TeacherConfig, sim_cfg: SimConfig = sim.DEFAULT_SIM) -> Trajectory:
    state = sim.reset(task, seed, sim_cfg)
    # teacher noise stream is independent of the reset stream
    teacher = ScriptedTeacher(cfg, np.random.default_rng([seed, 1]), sim_cfg)
    frames: list[Frame] = []
    success = False
    settle = 0
    while len(frames) < task.horizon:
        obs = sim.observe(state, seed=seed * 100_003 + state.step_index, cfg=sim_cfg)
        if success:
            # post-success frames: hold still, keep the scripted gripper command
            clean_g, injected = frames[-1].clean_gripper, False
            action = ActionContinuous(np.zeros(3), np.zeros(3), clean_g)
        else:
            action, clean_g, injected = teacher.act(state)
        if success or cfg.label_jitter or cfg.jitter_sigma == 0:
            frames.append(Frame(obs, action, state, clean_g, injected))
        else:
            label = ActionContinuous(teacher.unjittered_dpos, action.drot.copy(), action.gripper_cmd)
            frames.append(Frame(obs, label, state, clean_g, injected, executed=action))
        state, ok = sim.step(state, action, sim_cfg)
        if success:
            settle += 1
            if settle >= cfg.settle_frames:
                break
        elif ok:
            success = True
            if cfg.settle_frames == 0:
                break
    success = success and sim.is_success(state, sim_cfg)
    stats = {"injected_flips": teacher.injected, "absorbed_flips": teacher.absorbed, "frames": len(frames)}
    return Trajectory(task, frames, success, seed, cfg.teacher_id, final_state=state, stats=stats)


@dataclass
class CollectionResult:
    trajectories: list[Trajectory]
    attempts: int
    failed_seeds: list[int]

    @property
    def success_rate(self) -> float:
        return len(self.trajectories) / self.attempts if self.attempts else 0.0

    def metadata(self) -> dict:
        return {
            "attempts": self.attempts,
            "successes": len(self.trajectories),
            "failures": len(self.failed_seeds),
            "failed_seeds": list(self.failed_seeds),
            "teacher_success_rate": self.success_rate,
        }


def _rollout_args(args):
    return rollout(*args)


def collect(task: TaskSpec, episodes: int, cfg: TeacherConfig, seed: int = 0,
            sim_cfg: SimConfig = sim.DEFAULT_SIM, attempt_factor: int = 3, workers: int = 1) -> CollectionResult:
    """Roll out until ``episodes`` successes; failures are counted and dropped.

    Attempt ``i`` uses seed ``seed + i``; results are ordered by attempt index
    regardless of ``workers``.
    """
    if episodes <= 0:
        raise ConfigError("episodes must be > 0")
    cap = attempt_factor * episodes
    kept: list[Trajectory] = []
    failed: list[int] = []
    attempts = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while len(kept) < episodes and attempts < cap:
            n = min(max(episodes - len(kept), 1) * (2 if failed else 1), cap - attempts)
            seeds = list(range(seed + attempts, seed + attempts + n))
            jobs = [(task, s, cfg, sim_cfg) for s in seeds]
            results = list(pool.map(_rollout_args, jobs)) if pool else [rollout(*j) for j in jobs]
            for tr in results:
                attempts += 1
                if tr.success:
                    if len(kept) < episodes:
                        kept.append(tr)
                else:
                    failed.append(tr.seed)
                if len(kept) >= episodes:
                    break
    finally:
        if pool:
            pool.shutdown()
    res = CollectionResult(kept, attempts, failed)
    if len(kept) < episodes:
        raise CollectionError(
            f"{task.task_id}: only {len(kept)}/{episodes} successes after {attempts} attempts "
            f"(success rate {res.success_rate:.3f}); failed seeds: {failed[:20]}"
        )
    if failed:
        log.info("%s: discarded %d failed episodes (seeds %s)", task.task_id, len(failed), failed[:10])
    return res
