"""Phase classification, operating-segment direction extraction and description rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import sim
from .errors import ConfigError
from .sim import ActionContinuous, Observation, SimConfig, WorldState

CANONICAL = ("idle", "approaching", "grasping", "transporting", "holding",
             "placing", "operating", "regrasping", "completed")
NON_OPERATING = tuple(p for p in CANONICAL if p != "operating")
OPERATING_KINDS = ("push", "pull", "rotate", "press", "slide")
# classifier output space: the 8 non-operating phases plus operating sub-kinds
FINE_LABELS = NON_OPERATING + OPERATING_KINDS
GRANULARITIES = (3, 5, 7, 9, 11, 13)

ELEMENTS = ("drawer-handle",)
DIRECTIONS = ("outward", "inward", "stationary")

V_EPS = 0.01
PLACING_RADIUS_FACTOR = 2.0
DQ_EPS = 1e-4
TIE_EPS = 1e-6


@dataclass(frozen=True)
class Taxonomy:
    granularity: int
    labels: tuple[str, ...]
    merge_map: dict

    def map(self, fine_label: str) -> str:
        return self.merge_map[fine_label]

    def is_operating(self, label: str) -> bool:
        return label == "operating" or label in OPERATING_KINDS


def _identity_8() -> dict:
    return {p: p for p in NON_OPERATING}


def make_taxonomy(n: int) -> Taxonomy:
    if n == 9:
        mm = _identity_8() | {k: "operating" for k in OPERATING_KINDS}
        labels = CANONICAL
    elif n == 7:
        mm = _identity_8() | {k: "operating" for k in OPERATING_KINDS}
        mm.update(holding="transporting", regrasping="grasping")
        labels = ("idle", "approaching", "grasping", "transporting", "placing", "operating", "completed")
    elif n == 5:
        mm = {"idle": "idle", "approaching": "approaching", "grasping": "grasp/hold", "holding": "grasp/hold",
              "regrasping": "grasp/hold", "transporting": "move/place", "placing": "move/place",
              "completed": "completed"} | {k: "move/place" for k in OPERATING_KINDS}
        labels = ("idle", "approaching", "grasp/hold", "move/place", "completed")
    elif n == 3:
        mm = {p: "manipulation" for p in FINE_LABELS}
        mm.update(idle="pre-contact", approaching="pre-contact", completed="completed")
        labels = ("pre-contact", "manipulation", "completed")
    elif n == 11:
        mm = _identity_8() | {"push": "push", "pull": "pull", "rotate": "rotate", "press": "push", "slide": "pull"}
        labels = NON_OPERATING + ("push", "pull", "rotate")
    elif n == 13:
        mm = _identity_8() | {k: k for k in OPERATING_KINDS}
        labels = FINE_LABELS
    else:
        raise ConfigError(f"taxonomy granularity must be one of {GRANULARITIES}, got {n}")
    assert set(mm) == set(FINE_LABELS) and set(mm.values()) == set(labels)
    return Taxonomy(n, tuple(labels), mm)


def canonical_label(fine_label: str) -> str:
    return "operating" if fine_label in OPERATING_KINDS else fine_label


@dataclass
class PhaseContext:
    """Episode-level signals the per-frame rules need beyond the frame itself."""

    next_state: WorldState
    was_held: bool = False
    was_dropped: bool = False


@dataclass
class AnnotationRecord:
    frame_index: int
    phase: str
    description: str
    element: str | None = None
    direction: str | None = None
    # set when an enabled VLM failed and the template text was used instead
    fallback: bool = False

    def to_dict(self) -> dict:
        d = {"t": self.frame_index, "phase": self.phase, "description": self.description}
        if self.element is not None:
            d["element"] = self.element
            d["direction"] = self.direction
        if self.fallback:
            d["fallback"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        return cls(int(d["t"]), d["phase"], d["description"], d.get("element"), d.get("direction"),
                   bool(d.get("fallback", False)))


@dataclass
class OperatingSegment:
    start: int
    end: int
    keyframes: list[int]
    tuple: tuple[str, str] | None = None


def _nearest_graspable(state: WorldState, cfg: SimConfig) -> float:
    d = float(np.linalg.norm(cfg.handle_pos(state.drawer_q) - state.ee_pos))
    for o in state.objects:
        if not o.held:
            d = min(d, float(np.linalg.norm(o.pos - state.ee_pos)))
    return d


def _place_site(state: WorldState, cfg: SimConfig) -> np.ndarray:
    if state.task_id == "multi_stage":
        return cfg.interior_center(state.drawer_q)
    return state.goal_center


def classify_fine(state: WorldState, action: ActionContinuous, ctx: PhaseContext,
                  cfg: SimConfig = sim.DEFAULT_SIM) -> str:
    """Rule-based label in the 13-way fine space (operating split by sub-kind)."""
    nxt = ctx.next_state
    if sim.is_success(state, cfg):
        return "completed"
    dq = nxt.drawer_q - state.drawer_q
    if state.handle_held and abs(dq) > DQ_EPS:
        return "pull" if dq > 0 else "push"
    held_obj = state.held_object
    held = held_obj is not None or state.handle_held
    if action.gripper_cmd > 0 and not held and _nearest_graspable(state, cfg) <= cfg.grasp_radius:
        return "regrasping" if ctx.was_dropped else "grasping"
    if held_obj is not None:
        near_goal = sim._xy_dist(state.ee_pos, _place_site(state, cfg)) <= PLACING_RADIUS_FACTOR * state.goal_radius
        if near_goal and (nxt.ee_pos[2] < state.ee_pos[2] or action.gripper_cmd < 0):
            return "placing"
    speed = float(np.linalg.norm(nxt.ee_pos - state.ee_pos))
    if held:
        return "transporting" if speed >= V_EPS else "holding"
    target = sim.target_position(state, cfg)
    d_now = float(np.linalg.norm(target - state.ee_pos))
    d_next = float(np.linalg.norm(target - nxt.ee_pos))
    if state.gripper_open >= 0.5 and d_next < d_now:
        return "approaching"
    return "idle"


def classify_phase(frame, context: PhaseContext, taxonomy: Taxonomy, cfg: SimConfig = sim.DEFAULT_SIM) -> str:
    """``frame`` is an (Observation, ActionContinuous, WorldState) triple or a teacher Frame."""
    if isinstance(frame, tuple):
        _, action, state = frame
    else:
        action, state = frame.action, frame.state
    return taxonomy.map(classify_fine(state, action, context, cfg))


def _state_after(traj, t: int, cfg: SimConfig) -> WorldState:
    if t + 1 < len(traj.frames):
        return traj.frames[t + 1].state
    if traj.final_state is not None:
        return traj.final_state
    return sim.step(traj.frames[t].state, traj.frames[t].applied, cfg)[0]


def segment_states(traj, seg: OperatingSegment, cfg: SimConfig = sim.DEFAULT_SIM) -> list[WorldState]:
    """Keyframe states of a segment; a one-frame segment adds its successor, where its motion lands."""
    states = [traj.frames[k].state for k in seg.keyframes]
    if len(states) == 1:
        states.append(_state_after(traj, seg.end, cfg))
    return states


def label_trajectory(traj, cfg: SimConfig = sim.DEFAULT_SIM) -> list[str]:
    """Fine labels for every frame, threading the was-held / was-dropped progress flags."""
    labels = []
    was_held = was_dropped = False
    for t, fr in enumerate(traj.frames):
        nxt = _state_after(traj, t, cfg)
        holding_now = fr.state.held_object is not None
        if was_held and not holding_now and not sim.is_success(fr.state, cfg):
            # released away from a placement: counts as a drop for regrasp purposes
            if fr.state.objects and not _placed(fr.state, cfg):
                was_dropped = True
        was_held = was_held or holding_now
        labels.append(classify_fine(fr.state, fr.action, PhaseContext(nxt, was_held, was_dropped), cfg))
    return labels


def _placed(state: WorldState, cfg: SimConfig) -> bool:
    o = state.objects[0]
    return sim._xy_dist(o.pos, _place_site(state, cfg)) <= max(state.goal_radius, cfg.drawer_region_radius)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def keyframe_indices(start: int, end: int, n: int = 5) -> list[int]:
    length = end - start + 1
    if length < n:
        return list(range(start, end + 1))
    return [_round_half_up(start + (end - start) * i / (n - 1)) for i in range(n)]


def extract_segments(labels: Sequence[str]) -> list[OperatingSegment]:
    """Maximal runs of operating frames (canonical or fine labels accepted)."""
    if len(labels) == 0:
        raise ConfigError("labels must be non-empty")
    segs = []
    start = None
    for t, lab in enumerate(list(labels) + [None]):
        op = lab is not None and canonical_label(lab) == "operating"
        if op and start is None:
            start = t
        elif not op and start is not None:
            segs.append(OperatingSegment(start, t - 1, keyframe_indices(start, t - 1)))
            start = None
    return segs


def infer_direction(keyframe_states: Sequence[WorldState]) -> tuple[str, str]:
    """Ground-truth stand-in for the multi-frame VLM query."""
    if len(keyframe_states) < 2:
        raise ConfigError("need at least two keyframes")
    # only one articulated part exists at desk scale
    changes = {"drawer-handle": keyframe_states[-1].drawer_q - keyframe_states[0].drawer_q}
    element = max(changes, key=lambda k: abs(changes[k]))
    delta = changes[element]
    if abs(delta) < TIE_EPS:
        return element, "stationary"
    return element, "outward" if delta > 0 else "inward"


_AXIS_WORDS = (("forward", "backward"), ("left", "right"), ("above", "below"))


def relative_direction_word(rel: np.ndarray, near: float = 0.05) -> str:
    rel = np.asarray(rel, dtype=np.float64)
    if float(np.linalg.norm(rel)) <= near:
        return "at"
    ax = int(np.argmax(np.abs(rel)))
    return _AXIS_WORDS[ax][0 if rel[ax] > 0 else 1]


def _frame_signals(state: WorldState, cfg: SimConfig) -> tuple[str, str, str]:
    gripper = "open" if state.gripper_open >= 0.5 else "closed"
    cands = [("drawer handle", cfg.handle_pos(state.drawer_q) - state.ee_pos)]
    for o in state.objects:
        if not o.held:
            cands.append(("block", o.pos - state.ee_pos))
    name, rel = min(cands, key=lambda c: float(np.linalg.norm(c[1])))
    return gripper, name, relative_direction_word(rel)


def render_description(phase: str, frame, tuple_: tuple[str, str] | None = None,
                       taxonomy: Taxonomy | None = None, cfg: SimConfig = sim.DEFAULT_SIM) -> str:
    """Deterministic 3-4 sentence phase-anchored template."""
    valid = taxonomy.labels if taxonomy is not None else FINE_LABELS + ("operating",) + tuple(
        lab for n in GRANULARITIES for lab in make_taxonomy(n).labels)
    if phase not in valid:
        raise ConfigError(f"unknown phase {phase!r}")
    state = frame if isinstance(frame, WorldState) else (frame[2] if isinstance(frame, tuple) else frame.state)
    gripper, name, where = _frame_signals(state, cfg)
    if where == "at":
        loc = f"The {name} is at the gripper."
    elif where in ("above", "below"):
        loc = f"The {name} is {where} the gripper."
    else:
        loc = f"The {name} is {where} of the gripper."
    text = f"The robot is in the {phase} phase. The gripper is {gripper}. {loc}"
    if tuple_ is not None:
        text += f" Operating element={tuple_[0]}, direction={tuple_[1]}"
    return text


def annotate_trajectory(traj, taxonomy: Taxonomy, cfg: SimConfig = sim.DEFAULT_SIM,
                        describe=None) -> list[AnnotationRecord]:
    """Label, segment and describe every frame.

    ``describe(phase, frame, tuple_)`` may replace the template renderer (the
    VLM bridge hooks in here); it must return text containing the phase word.
    """
    fine = label_trajectory(traj, cfg)
    segments = extract_segments(fine)
    seg_tuple = {}
    for seg in segments:
        seg.tuple = infer_direction(segment_states(traj, seg, cfg))
        for t in range(seg.start, seg.end + 1):
            seg_tuple[t] = seg.tuple
    records = []
    for t, (fr, lab) in enumerate(zip(traj.frames, fine)):
        phase = taxonomy.map(lab)
        tup = seg_tuple.get(t)
        if describe is not None:
            text = describe(phase, fr, tup)
        else:
            text = render_description(phase, fr, tup, taxonomy, cfg)
        records.append(AnnotationRecord(t, phase, text, *(tup if tup else (None, None))))
    return records
