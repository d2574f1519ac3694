"""Closed-loop evaluation, gripper-flip audit, phase-share CV analysis, sweeps and reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import sim
from .annotator import GRANULARITIES, make_taxonomy
from .errors import ConfigError, InputError
from .sim import SimConfig, TaskSpec

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1_000_000_000  # far above any collection seed


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 50
    horizon: int | None = None  # None: each task's own horizon
    seed: int = 0
    execute_chunk: bool = False

    def __post_init__(self):
        if self.episodes <= 0:
            raise ConfigError("episodes must be > 0")


@dataclass
class EpisodeRecord:
    task_id: str
    seed: int
    success: bool
    steps: int
    gripper: list[float]
    actions: list[list[float]] = field(default_factory=list)


@dataclass
class EvalResult:
    success: dict[str, float]
    counts: dict[str, tuple[int, int]]
    episodes: list[EpisodeRecord]

    @property
    def mean_success(self) -> float:
        return float(np.mean(list(self.success.values()))) if self.success else 0.0


def eval_seeds(cfg: EvalConfig) -> list[int]:
    return [EVAL_SEED_OFFSET + cfg.seed * 10_000 + i for i in range(cfg.episodes)]


def rollout_batch(act: Callable, tasks: Sequence[TaskSpec], seeds: Sequence[int], horizon: int | None = None,
                  sim_cfg: SimConfig = sim.DEFAULT_SIM, chunk_len: int = 1,
                  keep_actions: bool = False) -> list[EpisodeRecord]:
    """Run episodes in lock step.

    ``act(obs (N, D), task_ids list)`` returns actions of shape (N, C, 7); the
    first ``chunk_len`` of the C actions are executed open loop before
    re-planning. Episodes stop at success or horizon.
    """
    states = [sim.reset(t, s, sim_cfg) for t, s in zip(tasks, seeds)]
    limits = [horizon or t.horizon for t in tasks]
    done = [False] * len(tasks)
    success = [False] * len(tasks)
    grip: list[list[float]] = [[] for _ in tasks]
    acts: list[list[list[float]]] = [[] for _ in tasks]
    steps = [0] * len(tasks)
    while not all(done):
        live = [i for i, d in enumerate(done) if not d]
        obs = np.stack([sim.observe(states[i], seed=seeds[i] * 100_003 + states[i].step_index, cfg=sim_cfg).vector
                        for i in live])
        plan = np.asarray(act(obs, [tasks[i].task_id for i in live]))
        if plan.ndim == 2:
            plan = plan[:, None, :]
        for row, i in enumerate(live):
            for c in range(min(chunk_len, plan.shape[1])):
                a = plan[row, c]
                grip[i].append(float(a[6]))
                if keep_actions:
                    acts[i].append(a.tolist())
                states[i], ok = sim.step(states[i], a, sim_cfg)
                steps[i] += 1
                if ok:
                    success[i] = True
                if ok or steps[i] >= limits[i]:
                    done[i] = True
                    break
    return [EpisodeRecord(t.task_id, s, success[i], steps[i], grip[i], acts[i])
            for i, (t, s) in enumerate(zip(tasks, seeds))]


def policy_actor(policy, expected_spec_hash: str | None = None):
    """Adapter from a StudentPolicy to the ``act`` callable of `rollout_batch`."""
    from .student import predict_chunk

    token_cache: dict[str, list[int]] = {}

    def act(obs, task_ids):
        toks = []
        for tid in task_ids:
            if tid not in token_cache:
                token_cache[tid] = policy.vocab.encode(sim.INSTRUCTIONS[tid])
            toks.append(token_cache[tid])
        return predict_chunk(policy, obs, toks, expected_spec_hash)

    return act


def rollout_eval(policy, tasks: Sequence[TaskSpec], cfg: EvalConfig = EvalConfig(),
                 sim_cfg: SimConfig = sim.DEFAULT_SIM, expected_spec_hash: str | None = None,
                 actor: Callable | None = None) -> EvalResult:
    """Per-task success over seeded episodes. ``actor`` overrides the policy (e.g. a scripted teacher)."""
    act = actor or policy_actor(policy, expected_spec_hash)
    chunk_len = policy.cfg.K if (cfg.execute_chunk and policy is not None) else 1
    seeds = eval_seeds(cfg)
    all_tasks, all_seeds = [], []
    for t in tasks:
        all_tasks += [t] * len(seeds)
        all_seeds += seeds
    eps = rollout_batch(act, all_tasks, all_seeds, cfg.horizon, sim_cfg, chunk_len)
    success, counts = {}, {}
    for t in tasks:
        mine = [e for e in eps if e.task_id == t.task_id]
        k = sum(e.success for e in mine)
        counts[t.task_id] = (k, len(mine))
        success[t.task_id] = k / len(mine)
    return EvalResult(success, counts, eps)


def teacher_eval(tasks: Sequence[TaskSpec], teacher_cfg, cfg: EvalConfig = EvalConfig(),
                 sim_cfg: SimConfig = sim.DEFAULT_SIM) -> EvalResult:
    """Scripted teacher through the same seeds, horizons and success predicates as `rollout_eval`."""
    from .teacher import rollout

    seeds = eval_seeds(cfg)
    success, counts, eps = {}, {}, []
    for t in tasks:
        task = t if cfg.horizon is None else sim.make_task(t.task_id, horizon=cfg.horizon)
        k = 0
        for s in seeds:
            tr = rollout(task, s, teacher_cfg, sim_cfg)
            # post-success settle frames are not part of a closed-loop episode
            n = len(tr.frames) - (teacher_cfg.settle_frames if tr.success else 0)
            eps.append(EpisodeRecord(t.task_id, s, tr.success, n, tr.gripper_commands()[:n].tolist()))
            k += tr.success
        counts[t.task_id] = (k, len(seeds))
        success[t.task_id] = k / len(seeds)
    return EvalResult(success, counts, eps)


# --------------------------------------------------------------------------- flip audit

@dataclass
class AuditReport:
    frames: int
    reversals: int
    spurious: int
    per_episode: list[dict] = field(default_factory=list)

    @property
    def spurious_fraction(self) -> float:
        return self.spurious / self.frames if self.frames else 0.0

    def to_dict(self) -> dict:
        return {"frames": self.frames, "reversals": self.reversals, "spurious": self.spurious,
                "spurious_fraction": self.spurious_fraction, "per_episode": self.per_episode}


def _signs(cmds: Sequence[float]) -> list[int]:
    out, prev = [], None
    first = next((c for c in cmds if c != 0), 1.0)
    for c in cmds:
        if c > 0:
            s = 1
        elif c < 0:
            s = -1
        else:
            s = prev if prev is not None else (1 if first > 0 else -1)
        out.append(s)
        prev = s
    return out


def audit_flips(cmds: Sequence[float]) -> AuditReport:
    """Count sign reversals and those that revert within two frames.

    A reversal at t is spurious iff sign(g[t+1]) or sign(g[t+2]) equals
    sign(g[t-1]); the reverting reversal still counts toward the total but
    cannot itself start a spurious flip.
    """
    if len(cmds) < 2:
        raise InputError("need at least two gripper commands")
    s = _signs(cmds)
    n = len(s)
    reversals = spurious = 0
    consumed_until = -1
    for t in range(1, n):
        if s[t] == s[t - 1]:
            continue
        reversals += 1
        if t <= consumed_until:
            continue
        for tp in (t + 1, t + 2):
            if tp < n and s[tp] == s[t - 1]:
                spurious += 1
                consumed_until = tp
                break
    return AuditReport(n, reversals, spurious)


def audit_episodes(commands: Sequence[Sequence[float]], labels: Sequence[str] | None = None) -> AuditReport:
    frames = reversals = spurious = 0
    per = []
    for i, c in enumerate(commands):
        if len(c) < 2:
            continue
        r = audit_flips(c)
        frames += r.frames
        reversals += r.reversals
        spurious += r.spurious
        per.append({"episode": labels[i] if labels else i, "frames": r.frames, "reversals": r.reversals,
                    "spurious": r.spurious})
    return AuditReport(frames, reversals, spurious, per)


# --------------------------------------------------------------------------- phase CV

def cv_from_counts(counts: Sequence[float]) -> float:
    """Population std of frame shares over their mean."""
    c = np.asarray(counts, dtype=np.float64)
    if c.size == 0 or c.sum() <= 0:
        raise InputError("empty label set")
    p = c / c.sum()
    return float(p.std() / p.mean())


@dataclass
class GranularityRow:
    granularity: int
    labels: list[str]
    share_mean: list[float]
    share_std: list[float]
    cv: float
    abs_cv_minus_1: float
    cv_std: float


@dataclass
class GranularityReport:
    rows: list[GranularityRow]

    def by_granularity(self) -> dict[int, GranularityRow]:
        return {r.granularity: r for r in self.rows}


def phase_cv(rollout_sets: Sequence[Sequence[Sequence[str]]], granularities=GRANULARITIES) -> GranularityReport:
    """``rollout_sets[s][e]`` is the fine label sequence of episode e in rollout set s.

    For each taxonomy the fine labels are merged, per-set shares computed, and
    CV taken over the across-set mean shares.
    """
    if not rollout_sets:
        raise InputError("need at least one rollout set")
    rows = []
    for n in granularities:
        tax = make_taxonomy(n)
        shares, cvs = [], []
        for rset in rollout_sets:
            counts = dict.fromkeys(tax.labels, 0)
            for ep in rset:
                for lab in ep:
                    counts[tax.map(lab)] += 1
            c = np.array([counts[l] for l in tax.labels], dtype=np.float64)
            if c.sum() == 0:
                raise InputError("empty rollout set")
            shares.append(c / c.sum())
            cvs.append(cv_from_counts(c))
        shares = np.array(shares)
        mean = shares.mean(axis=0)
        cv = cv_from_counts(mean)
        rows.append(GranularityRow(n, list(tax.labels), mean.tolist(), shares.std(axis=0).tolist(), cv,
                                   abs(cv - 1.0), float(np.std(cvs))))
    return GranularityReport(rows)


# --------------------------------------------------------------------------- latency

def latency_bench(policy, n_steps: int, warmup: int = 10, seed: int = 0) -> tuple[float, float]:
    """Mean wall-clock seconds per single-observation action and the matching rate in Hz."""
    from .student import predict_action

    if n_steps <= 0:
        raise InputError("n_steps must be > 0 after warmup")
    if warmup < 10:
        raise InputError("warmup must be >= 10 steps")
    task = sim.make_task("pick_place")
    state = sim.reset(task, seed)
    obs = sim.observe(state).vector
    toks = policy.vocab.encode(task.instruction)
    for _ in range(warmup):
        predict_action(policy, obs, toks)
    t0 = time.perf_counter()
    for _ in range(n_steps):
        predict_action(policy, obs, toks)
    per = (time.perf_counter() - t0) / n_steps
    return per, 1.0 / per


# --------------------------------------------------------------------------- reports

SUCCESS_COLUMNS = ["source", "task", "episodes", "successes", "success_rate"]
FLIPS_COLUMNS = ["source", "episode", "frames", "reversals", "spurious", "spurious_fraction"]
CV_COLUMNS = ["granularity", "label", "share_mean", "share_std", "cv", "abs_cv_minus_1", "cv_std"]
SWEEP_COLUMNS = ["cell", "alpha", "descriptions", "taxonomy", "seed", "mean_success", "success_by_task",
                 "student_spurious_per_frame", "teacher_spurious_per_frame", "val_token_acc", "final_val_loss"]
CURVE_COLUMNS = ["epoch", "train_loss", "val_loss", "val_token_acc", "lr"]


def write_csv(path: str | Path, columns: list[str], rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})
    return path


def success_rows(source: str, res: EvalResult) -> list[dict]:
    return [{"source": source, "task": t, "episodes": n, "successes": k, "success_rate": k / n}
            for t, (k, n) in res.counts.items()]


def flip_rows(source: str, rep: AuditReport) -> list[dict]:
    rows = [{"source": source, "episode": e["episode"], "frames": e["frames"], "reversals": e["reversals"],
             "spurious": e["spurious"], "spurious_fraction": e["spurious"] / e["frames"]} for e in rep.per_episode]
    rows.append({"source": source, "episode": "ALL", "frames": rep.frames, "reversals": rep.reversals,
                 "spurious": rep.spurious, "spurious_fraction": rep.spurious_fraction})
    return rows


def cv_rows(rep: GranularityReport) -> list[dict]:
    rows = []
    for r in rep.rows:
        for lab, m, s in zip(r.labels, r.share_mean, r.share_std):
            rows.append({"granularity": r.granularity, "label": lab, "share_mean": m, "share_std": s, "cv": r.cv,
                         "abs_cv_minus_1": r.abs_cv_minus_1, "cv_std": r.cv_std})
    return rows


def gripper_trace_svg(path: str | Path, series: dict[str, Sequence[float]], title: str = "gripper command",
                      width: int = 720, height: int = 220) -> Path:
    """Per-frame gripper command traces, spurious reversals marked in red."""
    colors = ["#1f3b73", "#6a9a6a", "#b85c00", "#7a3e9d"]
    n = max((len(v) for v in series.values()), default=1)
    pad = 30
    sx = (width - 2 * pad) / max(n - 1, 1)

    def y(v):
        return height / 2 - v * (height / 2 - pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="18" font-size="13">{title}</text>',
             f'<line x1="{pad}" y1="{y(0)}" x2="{width - pad}" y2="{y(0)}" stroke="#ccc"/>']
    for k, (name, vals) in enumerate(series.items()):
        vals = list(vals)
        off = 0.04 * k  # keep overlapping traces distinguishable
        pts = " ".join(f"{pad + i * sx:.1f},{y(np.clip(v, -1, 1) * (1 - off)):.1f}" for i, v in enumerate(vals))
        col = colors[k % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 120}" y="{18 + 14 * k}" font-size="11" fill="{col}">{name}</text>')
        s = _signs(vals) if len(vals) >= 2 else []
        for t in range(1, len(s)):
            if s[t] != s[t - 1] and any(tp < len(s) and s[tp] == s[t - 1] for tp in (t + 1, t + 2)):
                parts.append(f'<circle cx="{pad + t * sx:.1f}" cy="{y(vals[t]):.1f}" r="3" fill="red"/>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts))
    return path


def phase_bars_svg(path: str | Path, rep: GranularityReport, width: int = 900, row_h: int = 90) -> Path:
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{row_h * len(rep.rows) + 10}">']
    for r_i, r in enumerate(rep.rows):
        top = r_i * row_h + 10
        parts.append(f'<text x="5" y="{top + 12}" font-size="12">{r.granularity} phases  |CV-1|={r.abs_cv_minus_1:.3f}</text>')
        bw = (width - 160) / len(r.labels)
        for i, (lab, m) in enumerate(zip(r.labels, r.share_mean)):
            h = m * (row_h - 30)
            x = 150 + i * bw
            parts.append(f'<rect x="{x:.1f}" y="{top + row_h - 20 - h:.1f}" width="{bw * 0.8:.1f}" height="{h:.1f}" fill="#4a78b5"/>')
            parts.append(f'<text x="{x:.1f}" y="{top + row_h - 8}" font-size="8">{lab}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts))
    return path


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, default=lambda o: asdict(o) if hasattr(o, "__dataclass_fields__") else str(o)))
    return path
