"""Run directories and the collect -> annotate -> train -> eval -> report stages.

Layout under a run directory ``out``::

    data/        episodes/<task>/<nnnn>/{trajectory.jsonl, meta.json, annotations.t<N>.jsonl}
                 index.json, collection.json, manifest.json
    <train>/     checkpoint.vlad, curve.csv, dataset.json, train.json, manifest.json
    <eval>/      episodes.jsonl, success.json, manifest.json
    sweep/       cells/<cell>.json, manifest.json
    report/      success.csv, flips.csv, cv.csv, sweep.csv, *.svg, manifest.json

Each directory holds one ``manifest.json`` with an entry per stage that wrote
into it. A stage whose fingerprint (command, config, seeds, input hashes) is
unchanged and whose outputs exist is skipped.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from filelock import FileLock, Timeout

from . import annotator as an
from . import dataset as ds
from . import evaluation as ev
from . import sim
from . import student as st
from . import teacher as te
from .errors import ConfigError, DataError
from .vlm_bridge import VlmClient, VlmConfig
from .vlm_bridge import annotate_trajectory as vlm_annotate_trajectory

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
LOCK_NAME = ".vlad.lock"
ALPHA_GRID = (0.3, 0.5, 0.8, 1.0)
SEED_STRIDE = 100_000
TASK_STRIDE = 10_000
ATTEMPT_FACTOR = 3


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:16]


def collection_seed(seed: int, task_index: int) -> int:
    return seed * SEED_STRIDE + task_index * TASK_STRIDE


# --------------------------------------------------------------------------- manifests

@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    started: float = 0.0
    finished: float = 0.0

    @property
    def fingerprint(self) -> str:
        return digest([self.command, self.config, self.seeds, self.inputs])

    def to_dict(self) -> dict:
        return {**asdict(self), "fingerprint": self.fingerprint}

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        d = {k: v for k, v in d.items() if k != "fingerprint"}
        return cls(**d)


def read_manifest(directory: str | Path) -> dict[str, RunManifest]:
    p = Path(directory) / MANIFEST
    if not p.exists():
        return {}
    raw = json.loads(p.read_text())
    return {k: RunManifest.from_dict(v) for k, v in raw.get("stages", {}).items()}


def write_stage(directory: str | Path, name: str, m: RunManifest) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with FileLock(str(d / (MANIFEST + ".lock"))):  # parallel workers may share a directory
        stages = read_manifest(d)
        stages[name] = m
        tmp = d / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps({"stages": {k: v.to_dict() for k, v in sorted(stages.items())}}, indent=1))
        tmp.replace(d / MANIFEST)


def stage_fingerprint(directory: str | Path, name: str) -> str:
    m = read_manifest(directory).get(name)
    if m is None:
        raise DataError(f"{Path(directory)} has no completed '{name}' stage; run it first")
    return m.fingerprint


def is_current(directory: str | Path, name: str, m: RunManifest) -> bool:
    old = read_manifest(directory).get(name)
    if old is None or old.fingerprint != m.fingerprint or not old.finished:
        return False
    return all((Path(directory) / o).exists() for o in old.outputs)


@contextmanager
def run_lock(out: str | Path):
    """Advisory lock: one vlad command per run directory at a time."""
    Path(out).mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(Path(out) / LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"run directory {out} is locked by another vlad process") from None
    try:
        yield
    finally:
        lock.release()


@dataclass
class StageResult:
    name: str
    skipped: bool
    manifest: RunManifest
    value: object = None


def _run_stage(directory: Path, name: str, m: RunManifest, fn, force: bool = False) -> StageResult:
    if not force and is_current(directory, name, m):
        log.info("%s: up to date in %s, skipping", name, directory)
        return StageResult(name, True, read_manifest(directory)[name])
    m.started = time.time()
    outputs, value = fn()
    m.outputs = sorted(outputs)
    m.finished = time.time()
    write_stage(directory, name, m)
    return StageResult(name, False, m, value)


# --------------------------------------------------------------------------- collect

def data_dir(out: str | Path) -> Path:
    return Path(out) / "data"


def collect_stage(out: str | Path, tasks: Sequence[str], episodes: int, tcfg: te.TeacherConfig, seed: int = 0,
                  workers: int = 1, force: bool = False) -> StageResult:
    """Roll out ``episodes`` successful teacher episodes per task and persist them."""
    if episodes * ATTEMPT_FACTOR > TASK_STRIDE:
        raise ConfigError(f"at most {TASK_STRIDE // ATTEMPT_FACTOR} episodes per task")
    for t in tasks:
        if t not in sim.TASK_IDS:
            raise ConfigError(f"unknown task {t!r}; choose from {', '.join(sim.TASK_IDS)}")
    d = data_dir(out)
    m = RunManifest("collect", {"tasks": list(tasks), "episodes_per_task": episodes, "teacher": asdict(tcfg)},
                    [seed])

    def work():
        index, meta = [], {}
        for i, tid in enumerate(tasks):
            res = te.collect(sim.make_task(tid), episodes, tcfg, seed=collection_seed(seed, sim.TASK_IDS.index(tid)),
                             attempt_factor=ATTEMPT_FACTOR, workers=workers)
            meta[tid] = res.metadata()
            for k, tr in enumerate(res.trajectories):
                rel = f"episodes/{tid}/{k:04d}"
                ds.write_trajectory(d / rel, tr)
                index.append({"dir": rel, "task": tid, "seed": tr.seed})
        audit = ev.audit_episodes([_commands(d / e["dir"]) for e in index], [e["dir"] for e in index])
        meta["_audit"] = {k: v for k, v in audit.to_dict().items() if k != "per_episode"}
        ev.write_json(d / "index.json", index)
        ev.write_json(d / "collection.json", meta)
        return ["index.json", "collection.json"], meta

    return _run_stage(d, "collect", m, work, force)


def _commands(ep_dir: Path) -> list[float]:
    with open(ep_dir / "trajectory.jsonl") as fh:
        return [json.loads(line)["action"][6] for line in fh]


def read_index(out: str | Path) -> list[dict]:
    p = data_dir(out) / "index.json"
    if not p.exists():
        raise DataError(f"no collected data under {data_dir(out)}; run 'vlad collect' first")
    return json.loads(p.read_text())


def load_trajectories(out: str | Path, tasks: Sequence[str] | None = None) -> list[te.Trajectory]:
    return [ds.read_trajectory(data_dir(out) / e["dir"]) for e in read_index(out)
            if tasks is None or e["task"] in tasks]


# --------------------------------------------------------------------------- annotate

def annotate_stage(out: str | Path, taxonomy: int = 9, vlm: VlmConfig = VlmConfig(),
                   force: bool = False) -> StageResult:
    tax = an.make_taxonomy(taxonomy)
    d = data_dir(out)
    vcfg = asdict(vlm)
    vcfg.pop("cache_path")
    m = RunManifest("annotate", {"taxonomy": taxonomy, "vlm": vcfg}, [],
                    {"collect": stage_fingerprint(d, "collect")})

    def work():
        client = None
        if vlm.enabled:
            client = VlmClient(replace(vlm, cache_path=vlm.cache_path or str(d / "vlm_cache.jsonl")))
        outputs, fallbacks, n = [], 0, 0
        try:
            for e in read_index(out):
                tr = ds.read_trajectory(d / e["dir"])
                recs = vlm_annotate_trajectory(tr, tax, client) if client else an.annotate_trajectory(tr, tax)
                path = ds.annotation_path(d / e["dir"], taxonomy)
                ds.write_annotations(path, recs)
                outputs.append(str(path.relative_to(d)))
                fallbacks += sum(r.fallback for r in recs)
                n += len(recs)
        finally:
            if client:
                client.close()
        summary = {"frames": n, "fallback_frames": fallbacks}
        if client:
            summary["cost"] = asdict(client.cost_report())
        ev.write_json(d / f"annotate.t{taxonomy}.json", summary)
        return outputs + [f"annotate.t{taxonomy}.json"], summary

    return _run_stage(d, f"annotate.t{taxonomy}", m, work, force)


def load_annotations(out: str | Path, taxonomy: int, tasks: Sequence[str] | None = None):
    return [ds.read_annotations(ds.annotation_path(data_dir(out) / e["dir"], taxonomy)) for e in read_index(out)
            if tasks is None or e["task"] in tasks]


# --------------------------------------------------------------------------- train

def build_run_dataset(out: str | Path, taxonomy: int, K: int) -> tuple[ds.Dataset, ds.DatasetManifest]:
    index = read_index(out)
    trajs = load_trajectories(out)
    dset = ds.build_dataset(trajs, load_annotations(out, taxonomy), K=K)
    d = data_dir(out)
    hashes = {e["dir"]: ds.file_digest(d / e["dir"] / "trajectory.jsonl") for e in index}
    man = ds.DatasetManifest([e["dir"] for e in index], dset.spec, dset.vocab.hash, K, taxonomy, hashes)
    return dset, man


def train_stage(out: str | Path, scfg: st.StudentConfig, taxonomy: int = 9, name: str = "train",
                force: bool = False) -> StageResult:
    d = Path(out) / name
    ddir = data_dir(out)
    m = RunManifest("train", {"student": scfg.to_dict(), "taxonomy": taxonomy}, [scfg.seed],
                    {"collect": stage_fingerprint(ddir, "collect"),
                     "annotate": stage_fingerprint(ddir, f"annotate.t{taxonomy}")})

    def work():
        d.mkdir(parents=True, exist_ok=True)
        dset, man = build_run_dataset(out, taxonomy, scfg.K)
        man.save(d / "dataset.json")
        t0 = time.time()
        curve_path = d / "curve.csv"

        def progress(e: st.EpochStats):
            log.info("%s epoch %d/%d train %.3f val %.3f acc %.3f", name, e.epoch, scfg.epochs, e.train_loss,
                     e.val_loss, e.val_token_acc)

        res = st.train(dset, scfg, progress=progress)
        ev.write_csv(curve_path, ev.CURVE_COLUMNS, res.curve_rows())
        header = st.save_checkpoint(res.policy, d / "checkpoint.vlad",
                                    extra={"dataset_spec_hash": man.spec.hash, "taxonomy": taxonomy})
        last = res.curve[-1]
        summary = {"frames": len(dset.samples), "episodes": dset.n_episodes, "param_count": header["param_count"],
                   "seconds": time.time() - t0, "final_train_loss": last.train_loss,
                   "final_val_loss": last.val_loss, "val_token_acc": last.val_token_acc}
        ev.write_json(d / "train.json", summary)
        return ["checkpoint.vlad", "curve.csv", "dataset.json", "train.json"], (res, summary)

    return _run_stage(d, "train", m, work, force)


def read_curve(out: str | Path, name: str = "train") -> list[dict]:
    with open(Path(out) / name / "curve.csv") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


# --------------------------------------------------------------------------- eval

def eval_stage(out: str | Path, ecfg: ev.EvalConfig, tasks: Sequence[str] | None = None, train_name: str = "train",
               name: str = "eval", force: bool = False) -> StageResult:
    tdir = Path(out) / train_name
    d = Path(out) / name
    ckpt = tdir / "checkpoint.vlad"
    if not ckpt.exists():
        raise DataError(f"missing checkpoint {ckpt}; run 'vlad train' first")
    if tasks is None:
        tasks = sorted({e["task"] for e in read_index(out)}, key=sim.TASK_IDS.index)
    m = RunManifest("eval", {"eval": asdict(ecfg), "tasks": list(tasks), "train": train_name}, [ecfg.seed],
                    {"checkpoint": ds.file_digest(ckpt)})

    def work():
        policy, _ = st.load_checkpoint(ckpt)
        man = ds.DatasetManifest.load(tdir / "dataset.json")
        res = ev.rollout_eval(policy, [sim.make_task(t) for t in tasks], ecfg, expected_spec_hash=man.spec.hash)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "episodes.jsonl", "w") as fh:
            for e in res.episodes:
                fh.write(json.dumps(asdict(e)) + "\n")
        ev.write_json(d / "success.json", {"success": res.success, "counts": res.counts,
                                           "mean_success": res.mean_success})
        return ["episodes.jsonl", "success.json"], res

    return _run_stage(d, "eval", m, work, force)


def read_eval(out: str | Path, name: str = "eval") -> ev.EvalResult:
    d = Path(out) / name
    if not (d / "success.json").exists():
        raise DataError(f"no evaluation results under {d}; run 'vlad eval' first")
    s = json.loads((d / "success.json").read_text())
    eps = [ev.EpisodeRecord(**json.loads(l)) for l in (d / "episodes.jsonl").read_text().splitlines()]
    return ev.EvalResult(s["success"], {k: tuple(v) for k, v in s["counts"].items()}, eps)


# --------------------------------------------------------------------------- reports

def report_dir(out: str | Path) -> Path:
    return Path(out) / "report"


def teacher_audit(out: str | Path) -> ev.AuditReport:
    index = read_index(out)
    return ev.audit_episodes([_commands(data_dir(out) / e["dir"]) for e in index], [e["dir"] for e in index])


def student_audit(res: ev.EvalResult) -> ev.AuditReport:
    return ev.audit_episodes([e.gripper for e in res.episodes], [f"{e.task_id}/{e.seed}" for e in res.episodes])


def flip_ratio(teacher: ev.AuditReport, student: ev.AuditReport) -> float:
    """Teacher spurious flips per frame over the student's; inf when the student has none."""
    if student.spurious_fraction == 0:
        return float("inf")
    return teacher.spurious_fraction / student.spurious_fraction


def success_report(out: str | Path, eval_name: str = "eval") -> Path:
    coll = json.loads((data_dir(out) / "collection.json").read_text())
    rows = [{"source": "teacher_collection", "task": t, "episodes": v["attempts"], "successes": v["successes"],
             "success_rate": v["teacher_success_rate"]} for t, v in coll.items() if not t.startswith("_")]
    if (Path(out) / eval_name / "success.json").exists():
        rows += ev.success_rows("student", read_eval(out, eval_name))
    return ev.write_csv(report_dir(out) / "success.csv", ev.SUCCESS_COLUMNS, rows)


def audit_report(out: str | Path, eval_name: str = "eval") -> dict:
    """Flip audit of the teacher data and, if present, the student evaluation; writes flips.csv and a trace SVG."""
    rdir = report_dir(out)
    t_rep = teacher_audit(out)
    rows = ev.flip_rows("teacher", t_rep)
    summary = {"teacher": {k: v for k, v in t_rep.to_dict().items() if k != "per_episode"}}
    index = read_index(out)
    first = index[0]
    traces = {f"teacher {first['task']}": _commands(data_dir(out) / first["dir"])}
    if (Path(out) / eval_name / "success.json").exists():
        res = read_eval(out, eval_name)
        s_rep = student_audit(res)
        rows += ev.flip_rows("student", s_rep)
        summary["student"] = {k: v for k, v in s_rep.to_dict().items() if k != "per_episode"}
        summary["ratio"] = flip_ratio(t_rep, s_rep)
        ep = next((e for e in res.episodes if e.task_id == first["task"]), res.episodes[0])
        traces[f"student {ep.task_id}"] = ep.gripper
    ev.write_csv(rdir / "flips.csv", ev.FLIPS_COLUMNS, rows)
    ev.gripper_trace_svg(rdir / "gripper_trace.svg", traces, "gripper command (red: spurious reversal)")
    ev.write_json(rdir / "flips.json", summary)
    return summary


def phase_cv_report(out: str | Path, granularities: Sequence[int] = an.GRANULARITIES) -> ev.GranularityReport:
    """Per-taxonomy |CV-1| over teacher rollouts, one rollout set per task."""
    sets: dict[str, list[list[str]]] = {}
    for e in read_index(out):
        tr = ds.read_trajectory(data_dir(out) / e["dir"])
        sets.setdefault(e["task"], []).append(an.label_trajectory(tr))
    rep = ev.phase_cv(list(sets.values()), granularities)
    rdir = report_dir(out)
    ev.write_csv(rdir / "cv.csv", ev.CV_COLUMNS, ev.cv_rows(rep))
    ev.phase_bars_svg(rdir / "phase_shares.svg", rep)
    return rep


def record_report(out: str | Path, name: str, config: dict, outputs: Sequence[str]) -> None:
    now = time.time()
    write_stage(report_dir(out), name, RunManifest(name, config, [], {}, list(outputs), now, now))


# --------------------------------------------------------------------------- sweep

def cell_id(alpha: float, descriptions: bool, taxonomy: int, seed: int) -> str:
    return f"a{alpha:g}_d{'on' if descriptions else 'off'}_t{taxonomy}_s{seed}"


def _training_signature(scfg: st.StudentConfig, taxonomy: int) -> str:
    # the no-description student ignores alpha, so its cells share one training run
    d = scfg.to_dict()
    d["alpha"] = st.path_weights(scfg)
    return digest([d, taxonomy])


def _sweep_cell(args) -> dict:
    out, scfg_d, taxonomy, ecfg_d, tasks, teacher_frac = args
    scfg = st.StudentConfig.from_dict(scfg_d)
    ecfg = ev.EvalConfig(**ecfg_d)
    dset, man = build_run_dataset(out, taxonomy, scfg.K)
    res = st.train(dset, scfg)
    er = ev.rollout_eval(res.policy, [sim.make_task(t) for t in tasks], ecfg, expected_spec_hash=man.spec.hash)
    a = student_audit(er)
    last = res.curve[-1]
    return {"mean_success": er.mean_success, "success_by_task": er.success,
            "student_spurious_per_frame": a.spurious_fraction, "teacher_spurious_per_frame": teacher_frac,
            "val_token_acc": last.val_token_acc, "final_val_loss": last.val_loss,
            "curve": res.curve_rows()}


def _flat_row(cell: dict) -> dict:
    r = dict(cell)
    r["success_by_task"] = ";".join(f"{k}={v:.3f}" for k, v in cell["success_by_task"].items())
    return r


def write_sweep_csv(out: str | Path) -> Path:
    cells_dir = Path(out) / "sweep" / "cells"
    rows = [json.loads(p.read_text()) for p in sorted(cells_dir.glob("*.json"))]
    rows.sort(key=lambda r: (r["taxonomy"], r["seed"], not r["descriptions"], r["alpha"]))
    path = report_dir(out) / "sweep.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        ev.write_csv(path, ev.SWEEP_COLUMNS, [_flat_row(r) for r in rows])
    return path


@dataclass
class SweepOutcome:
    computed: list[str]
    skipped: list[str]
    csv: Path


def sweep_stage(out: str | Path, base: st.StudentConfig, ecfg: ev.EvalConfig, alphas: Sequence[float] = ALPHA_GRID,
                modes: Sequence[bool] = (True, False), taxonomies: Sequence[int] = (9,),
                tasks: Sequence[str] | None = None, workers: int = 1) -> SweepOutcome:
    """Train and evaluate every (alpha, descriptions, taxonomy) cell; finished cells are skipped."""
    if not alphas or not modes or not taxonomies:
        raise ConfigError("sweep grid must be non-empty")
    if tasks is None:
        tasks = sorted({e["task"] for e in read_index(out)}, key=sim.TASK_IDS.index)
    cells_dir = Path(out) / "sweep" / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    for n in taxonomies:
        annotate_stage(out, n)
    t_frac = teacher_audit(out).spurious_fraction
    ddir = data_dir(out)

    pending: dict[str, list[tuple[str, dict]]] = {}
    jobs: dict[str, tuple] = {}
    skipped = []
    for n in taxonomies:
        inputs = {"collect": stage_fingerprint(ddir, "collect"), "annotate": stage_fingerprint(ddir, f"annotate.t{n}")}
        for desc in modes:
            for a in alphas:
                scfg = replace(base, alpha=float(a), descriptions=bool(desc))
                cid = cell_id(a, desc, n, scfg.seed)
                meta = {"cell": cid, "alpha": float(a), "descriptions": bool(desc), "taxonomy": n, "seed": scfg.seed,
                        "tasks": list(tasks)}
                fp = digest([scfg.to_dict(), n, asdict(ecfg), list(tasks), inputs])
                p = cells_dir / f"{cid}.json"
                if p.exists() and json.loads(p.read_text()).get("fingerprint") == fp:
                    skipped.append(cid)
                    continue
                sig = _training_signature(scfg, n)
                pending.setdefault(sig, []).append((cid, {**meta, "fingerprint": fp}))
                jobs.setdefault(sig, (str(out), scfg.to_dict(), n, asdict(ecfg), list(tasks), t_frac))

    def finish(sig, result):
        for cid, meta in pending[sig]:
            (cells_dir / f"{cid}.json").write_text(json.dumps({**meta, **result}, indent=1))
            log.info("sweep cell %s: mean success %.3f", cid, result["mean_success"])
        write_sweep_csv(out)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            futs = {sig: pool.submit(_sweep_cell, job) for sig, job in jobs.items()}
            for sig, f in futs.items():
                finish(sig, f.result())
    else:
        for sig, job in jobs.items():
            finish(sig, _sweep_cell(job))
    path = write_sweep_csv(out)
    computed = [cid for cells in pending.values() for cid, _ in cells]
    write_stage(Path(out) / "sweep", "sweep", RunManifest(
        "sweep", {"alphas": list(alphas), "modes": list(modes), "taxonomies": list(taxonomies),
                  "student": base.to_dict(), "eval": asdict(ecfg), "tasks": list(tasks)},
        [base.seed, ecfg.seed], {}, [f"cells/{p.name}" for p in sorted(cells_dir.glob('*.json'))],
        time.time(), time.time()))
    return SweepOutcome(computed, skipped, path)


# --------------------------------------------------------------------------- bench

def bench_stage(out: str | Path, n_steps: int = 200, train_name: str = "train") -> dict:
    ckpt = Path(out) / train_name / "checkpoint.vlad"
    if not ckpt.exists():
        raise DataError(f"missing checkpoint {ckpt}; run 'vlad train' first")
    policy, header = st.load_checkpoint(ckpt)
    sec, hz = ev.latency_bench(policy, n_steps)
    res = {"sec_per_step": sec, "hz": hz, "n_steps": n_steps, "param_count": header["param_count"]}
    ev.write_json(report_dir(out) / "bench.json", res)
    return res


# --------------------------------------------------------------------------- demo

@dataclass(frozen=True)
class DemoConfig:
    tasks: tuple[str, ...] = sim.TASK_IDS
    episodes_per_task: int = 50
    flip_noise: float = 0.03
    taxonomy: int = 9
    alpha: float = 1.0
    epochs: int = 30
    eval_episodes_per_task: int = 25
    seed: int = 0
    workers: int = 1
    execute_chunk: bool = False

    def __post_init__(self):
        if self.episodes_per_task <= 0 or self.eval_episodes_per_task <= 0 or self.epochs <= 0:
            raise ConfigError("episode counts and epochs must be > 0")


def run_demo(out: str | Path, cfg: DemoConfig = DemoConfig(), scfg: st.StudentConfig | None = None,
             tcfg: te.TeacherConfig | None = None, vlm: VlmConfig = VlmConfig()) -> dict:
    """collect -> annotate -> train -> eval -> audit, cv and success reports; returns a summary."""
    tcfg = tcfg or te.TeacherConfig(flip_noise_p=cfg.flip_noise)
    scfg = scfg or st.StudentConfig(alpha=cfg.alpha, epochs=cfg.epochs, seed=cfg.seed)
    timings = {}
    t0 = time.time()
    collect_stage(out, cfg.tasks, cfg.episodes_per_task, tcfg, cfg.seed, cfg.workers)
    timings["collect"] = time.time() - t0
    t = time.time()
    annotate_stage(out, cfg.taxonomy, vlm)
    timings["annotate"] = time.time() - t
    t = time.time()
    train_stage(out, scfg, cfg.taxonomy)
    timings["train"] = time.time() - t
    t = time.time()
    eval_stage(out, ev.EvalConfig(episodes=cfg.eval_episodes_per_task, seed=cfg.seed,
                                  execute_chunk=cfg.execute_chunk), cfg.tasks)
    timings["eval"] = time.time() - t
    t = time.time()
    flips = audit_report(out)
    cv = phase_cv_report(out)
    success_report(out)
    timings["reports"] = time.time() - t
    timings["total"] = time.time() - t0
    res = read_eval(out)
    summary = {"success": res.success, "mean_success": res.mean_success, "flips": flips,
               "cv": {r.granularity: r.abs_cv_minus_1 for r in cv.rows},
               "train": json.loads((Path(out) / "train" / "train.json").read_text()), "timings": timings}
    ev.write_json(report_dir(out) / "demo.json", summary)
    record_report(out, "demo", {"demo": asdict(cfg), "student": scfg.to_dict(), "teacher": asdict(tcfg)},
                  ["demo.json", "success.csv", "flips.csv", "flips.json", "cv.csv", "gripper_trace.svg",
                   "phase_shares.svg"])
    return summary


# --------------------------------------------------------------------------- direction ablation

DRAWER_PAIR = ("drawer_open", "drawer_close")


def _ablation_seed(args) -> dict:
    out, seed, episodes, epochs, eval_episodes, descriptions = args
    train_name, eval_name = f"train_{'on' if descriptions else 'off'}", f"eval_{'on' if descriptions else 'off'}"
    scfg = st.StudentConfig(epochs=epochs, seed=seed, descriptions=descriptions)
    train_stage(out, scfg, 9, name=train_name)
    eval_stage(out, ev.EvalConfig(episodes=eval_episodes, seed=seed), DRAWER_PAIR, train_name, eval_name)
    return read_eval(out, eval_name).success


def direction_ablation(out: str | Path, seeds: Sequence[int] = (0, 1, 2), episodes_per_task: int = 100,
                       epochs: int = 30, eval_episodes: int = 50, workers: int = 1) -> dict:
    """With- vs without-description students on the drawer_open + drawer_close mixture, per seed."""
    runs = {}
    for s in seeds:
        run = Path(out) / f"seed{s}"
        collect_stage(run, DRAWER_PAIR, episodes_per_task, te.TeacherConfig(), s, 1)
        annotate_stage(run, 9)
        runs[s] = run
    jobs = [(str(runs[s]), s, episodes_per_task, epochs, eval_episodes, d) for s in seeds for d in (True, False)]
    if workers > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            results = list(pool.map(_ablation_seed, jobs))
    else:
        results = [_ablation_seed(j) for j in jobs]
    per_seed = {s: {"on": None, "off": None} for s in seeds}
    for job, r in zip(jobs, results):
        per_seed[job[1]]["on" if job[5] else "off"] = r
    rows = []
    for s, v in per_seed.items():
        for mode in ("on", "off"):
            rows += [{"seed": s, "descriptions": mode, "task": t, "success_rate": v[mode][t]} for t in DRAWER_PAIR]
    ev.write_csv(Path(out) / "ablation.csv", ["seed", "descriptions", "task", "success_rate"], rows)
    on = {t: float(np.mean([per_seed[s]["on"][t] for s in seeds])) for t in DRAWER_PAIR}
    off = {t: float(np.mean([per_seed[s]["off"][t] for s in seeds])) for t in DRAWER_PAIR}
    summary = {"per_seed": per_seed, "on": on, "off": off,
               "gap": float(np.mean(list(on.values())) - np.mean(list(off.values())))}
    ev.write_json(Path(out) / "ablation.json", summary)
    return summary


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
