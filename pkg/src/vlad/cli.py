"""``vlad`` command line: one subcommand per pipeline stage plus sweep, bench and demo.

Exit codes: 0 ok, 2 configuration or input error, 3 data error, 4 training divergence.
Settings resolve as command-line flag, then config file (TOML or JSON, one table per
subcommand plus an optional ``common`` table), then built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import annotator as an
from . import evaluation as ev
from . import pipeline as pl
from . import sim
from .errors import ConfigError, VladError
from .student import StudentConfig
from .teacher import TeacherConfig
from .vlm_bridge import VlmConfig

log = logging.getLogger("vlad")

COMMON = {"out": "runs/default", "seed": 0}
DEFAULTS = {
    "collect": {"tasks": ",".join(sim.TASK_IDS), "episodes": 50, "flip_noise": 0.03, "jitter": 0.005,
                "workers": 1},
    "annotate": {"taxonomy": 9, "vlm": "off", "vlm_endpoint": "", "vlm_model": "vlm-small", "vlm_concurrency": 4},
    "train": {"alpha": 1.0, "epochs": 30, "batch": 32, "chunk": 5, "lr": 3e-4, "descriptions": "on",
              "taxonomy": 9, "name": "train", "dtype": "float32"},
    "eval": {"episodes": 50, "tasks": "", "execute_chunk": False, "train_name": "train", "name": "eval"},
    "audit-flips": {"eval_name": "eval"},
    "phase-cv": {"granularities": ",".join(map(str, an.GRANULARITIES))},
    "sweep": {"alphas": ",".join(f"{a:g}" for a in pl.ALPHA_GRID), "descriptions": "on,off", "taxonomies": "9",
              "epochs": 30, "batch": 32, "chunk": 5, "lr": 3e-4, "episodes": 50, "tasks": "", "workers": 1,
              "execute_chunk": False},
    "bench": {"steps": 200, "train_name": "train"},
    "demo": {"tasks": ",".join(sim.TASK_IDS), "episodes": 50, "eval_episodes": 25, "flip_noise": 0.03,
             "taxonomy": 9, "alpha": 1.0, "epochs": 30, "batch": 32, "chunk": 5, "lr": 3e-4, "descriptions": "on",
             "execute_chunk": False, "vlm": "off", "vlm_endpoint": "", "vlm_model": "vlm-small", "workers": 1},
}


def _on_off(v) -> bool:
    if isinstance(v, bool):
        return v
    if v in ("on", "off"):
        return v == "on"
    raise ConfigError(f"expected on or off, got {v!r}")


def _csv(v, cast=str) -> list:
    items = v if isinstance(v, (list, tuple)) else [x for x in str(v).split(",") if x.strip()]
    try:
        return [cast(str(x).strip()) for x in items]
    except ValueError as e:
        raise ConfigError(f"bad list value {v!r}: {e}") from None


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        if p.suffix == ".toml":
            try:
                import tomllib as toml
            except ModuleNotFoundError:
                import tomli as toml
            return toml.loads(p.read_text())
        return json.loads(p.read_text())
    except ValueError as e:
        raise ConfigError(f"cannot parse config file {p}: {e}") from None


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Effective settings for ``command``: flag > config file > default."""
    base = {**COMMON, **DEFAULTS[command]}
    raw = load_config_file(getattr(args, "config", None))
    from_file = {}
    for section in ("common", command):
        tbl = raw.get(section, {})
        if not isinstance(tbl, dict):
            raise ConfigError(f"config section [{section}] must be a table")
        for k, v in tbl.items():
            key = k.replace("-", "_")
            if key not in base:
                if section == "common":
                    continue
                raise ConfigError(f"unknown setting {k!r} in [{section}]")
            from_file[key] = v
    flags = {k: v for k, v in vars(args).items() if k in base and v is not None}
    return {**base, **from_file, **flags}


def _student_cfg(c: dict, descriptions: bool) -> StudentConfig:
    return StudentConfig(alpha=float(c["alpha"]) if "alpha" in c else 1.0, epochs=int(c["epochs"]),
                         batch=int(c["batch"]), K=int(c["chunk"]), lr=float(c["lr"]), descriptions=descriptions,
                         seed=int(c["seed"]), dtype=c.get("dtype", "float32"))


def _vlm_cfg(c: dict) -> VlmConfig:
    return VlmConfig(enabled=_on_off(c["vlm"]), endpoint=c["vlm_endpoint"], model=c["vlm_model"],
                     concurrency=int(c.get("vlm_concurrency", 4)))


def _tasks(c: dict) -> list[str] | None:
    ts = _csv(c["tasks"])
    for t in ts:
        if t not in sim.TASK_IDS:
            raise ConfigError(f"unknown task {t!r}; choose from {', '.join(sim.TASK_IDS)}")
    return ts or None


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, default=str))


# --------------------------------------------------------------------------- commands

def cmd_collect(c: dict, force: bool) -> int:
    tcfg = TeacherConfig(flip_noise_p=float(c["flip_noise"]), jitter_sigma=float(c["jitter"]))
    r = pl.collect_stage(c["out"], _tasks(c) or sim.TASK_IDS, int(c["episodes"]), tcfg, int(c["seed"]),
                         int(c["workers"]), force)
    meta = json.loads((pl.data_dir(c["out"]) / "collection.json").read_text())
    _print({"stage": "collect", "skipped": r.skipped, "out": str(pl.data_dir(c["out"])), **meta})
    return 0


def cmd_annotate(c: dict, force: bool) -> int:
    r = pl.annotate_stage(c["out"], int(c["taxonomy"]), _vlm_cfg(c), force)
    _print({"stage": "annotate", "skipped": r.skipped, "taxonomy": int(c["taxonomy"]),
            "labels": list(an.make_taxonomy(int(c["taxonomy"])).labels)})
    return 0


def cmd_train(c: dict, force: bool, explicit: set) -> int:
    desc = _on_off(c["descriptions"])
    if not desc and "alpha" in explicit:
        raise ConfigError("--alpha has no effect with --descriptions off")
    scfg = _student_cfg(c, desc)
    r = pl.train_stage(c["out"], scfg, int(c["taxonomy"]), c["name"], force)
    summary = json.loads((Path(c["out"]) / c["name"] / "train.json").read_text())
    _print({"stage": "train", "skipped": r.skipped, "config": scfg.to_dict(), **summary})
    return 0


def cmd_eval(c: dict, force: bool) -> int:
    ecfg = ev.EvalConfig(episodes=int(c["episodes"]), seed=int(c["seed"]), execute_chunk=bool(c["execute_chunk"]))
    r = pl.eval_stage(c["out"], ecfg, _tasks(c), c["train_name"], c["name"], force)
    pl.success_report(c["out"], c["name"])
    res = pl.read_eval(c["out"], c["name"])
    _print({"stage": "eval", "skipped": r.skipped, "success": res.success, "mean_success": res.mean_success})
    return 0


def cmd_audit(c: dict, force: bool) -> int:
    s = pl.audit_report(c["out"], c["eval_name"])
    pl.record_report(c["out"], "audit-flips", {"eval_name": c["eval_name"]}, ["flips.csv", "flips.json",
                                                                              "gripper_trace.svg"])
    _print(s)
    return 0


def cmd_phase_cv(c: dict, force: bool) -> int:
    gs = _csv(c["granularities"], int)
    rep = pl.phase_cv_report(c["out"], gs)
    pl.record_report(c["out"], "phase-cv", {"granularities": gs}, ["cv.csv", "phase_shares.svg"])
    _print({r.granularity: {"cv": r.cv, "abs_cv_minus_1": r.abs_cv_minus_1} for r in rep.rows})
    return 0


def cmd_sweep(c: dict, force: bool) -> int:
    modes = [_on_off(m) for m in _csv(c["descriptions"])]
    base = StudentConfig(epochs=int(c["epochs"]), batch=int(c["batch"]), K=int(c["chunk"]), lr=float(c["lr"]),
                         seed=int(c["seed"]))
    ecfg = ev.EvalConfig(episodes=int(c["episodes"]), seed=int(c["seed"]), execute_chunk=bool(c["execute_chunk"]))
    out = pl.sweep_stage(c["out"], base, ecfg, _csv(c["alphas"], float), modes, _csv(c["taxonomies"], int),
                         _tasks(c), int(c["workers"]))
    _print({"stage": "sweep", "computed": out.computed, "skipped": out.skipped, "csv": str(out.csv)})
    return 0


def cmd_bench(c: dict, force: bool) -> int:
    _print(pl.bench_stage(c["out"], int(c["steps"]), c["train_name"]))
    return 0


def cmd_demo(c: dict, force: bool) -> int:
    desc = _on_off(c["descriptions"])
    tasks = tuple(_tasks(c) or sim.TASK_IDS)
    dcfg = pl.DemoConfig(tasks=tasks, episodes_per_task=int(c["episodes"]), flip_noise=float(c["flip_noise"]),
                         taxonomy=int(c["taxonomy"]), alpha=float(c["alpha"]), epochs=int(c["epochs"]),
                         eval_episodes_per_task=int(c["eval_episodes"]), seed=int(c["seed"]),
                         workers=int(c["workers"]), execute_chunk=bool(c["execute_chunk"]))
    scfg = _student_cfg(c, desc)
    s = pl.run_demo(c["out"], dcfg, scfg, vlm=_vlm_cfg(c))
    _print({"stage": "demo", "success": s["success"], "mean_success": s["mean_success"],
            "teacher_spurious_fraction": s["flips"]["teacher"]["spurious_fraction"],
            "student_spurious_fraction": s["flips"].get("student", {}).get("spurious_fraction"),
            "flip_ratio": s["flips"].get("ratio"), "timings": s["timings"]})
    return 0


COMMANDS = {"collect": cmd_collect, "annotate": cmd_annotate, "train": cmd_train, "eval": cmd_eval,
            "audit-flips": cmd_audit, "phase-cv": cmd_phase_cv, "sweep": cmd_sweep, "bench": cmd_bench,
            "demo": cmd_demo}


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlad", description="Phase-anchored policy distillation pipeline.")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", help="run directory (default runs/default)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config", help="TOML or JSON settings file")
        sp.add_argument("--force", action="store_true", help="recompute even if the manifest is current")
        return sp

    def vlm_flags(sp):
        sp.add_argument("--vlm", choices=["on", "off"])
        sp.add_argument("--vlm-endpoint", help="chat-completions URL; key read from $VLAD_VLM_API_KEY")
        sp.add_argument("--vlm-model")

    def student_flags(sp, alpha=True):
        if alpha:
            sp.add_argument("--alpha", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--chunk", type=int, help="action chunk length K")
        sp.add_argument("--lr", type=float)

    sp = cmd("collect", "roll out the noisy scripted teacher and keep successful episodes")
    sp.add_argument("--tasks", help=f"comma list from {','.join(sim.TASK_IDS)}")
    sp.add_argument("--episodes", type=int, help="successful episodes per task")
    sp.add_argument("--flip-noise", type=float, help="per-frame spurious gripper flip probability")
    sp.add_argument("--jitter", type=float, help="std of executed position jitter")
    sp.add_argument("--workers", type=int)

    sp = cmd("annotate", "write phase-anchored descriptions for every collected frame")
    sp.add_argument("--taxonomy", type=int, choices=an.GRANULARITIES)
    vlm_flags(sp)
    sp.add_argument("--vlm-concurrency", type=int)

    sp = cmd("train", "train the student on collected and annotated data")
    student_flags(sp)
    sp.add_argument("--descriptions", choices=["on", "off"])
    sp.add_argument("--taxonomy", type=int, choices=an.GRANULARITIES)
    sp.add_argument("--name", help="training subdirectory (default train)")
    sp.add_argument("--dtype", choices=["float32", "float64"])

    sp = cmd("eval", "closed-loop evaluation of a trained student")
    sp.add_argument("--episodes", type=int, help="episodes per task")
    sp.add_argument("--tasks")
    sp.add_argument("--execute-chunk", action="store_true", default=None,
                    help="execute all K predicted actions open loop before re-planning")
    sp.add_argument("--train-name")
    sp.add_argument("--name", help="evaluation subdirectory (default eval)")

    sp = cmd("audit-flips", "count spurious gripper flips in teacher data and student rollouts")
    sp.add_argument("--eval-name")

    sp = cmd("phase-cv", "per-taxonomy phase-share |CV-1| over the collected rollouts")
    sp.add_argument("--granularities")

    sp = cmd("sweep", "train and evaluate the alpha x descriptions x taxonomy grid (resumable)")
    sp.add_argument("--alphas")
    sp.add_argument("--descriptions", help="on, off or on,off")
    sp.add_argument("--taxonomies")
    student_flags(sp, alpha=False)
    sp.add_argument("--episodes", type=int, help="evaluation episodes per task")
    sp.add_argument("--tasks")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--execute-chunk", action="store_true", default=None)

    sp = cmd("bench", "single-observation inference latency")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--train-name")

    sp = cmd("demo", "collect, annotate, train, evaluate and report end to end")
    sp.add_argument("--tasks")
    sp.add_argument("--episodes", type=int, help="teacher episodes per task")
    sp.add_argument("--eval-episodes", type=int, help="evaluation episodes per task")
    sp.add_argument("--flip-noise", type=float)
    sp.add_argument("--taxonomy", type=int, choices=an.GRANULARITIES)
    student_flags(sp)
    sp.add_argument("--descriptions", choices=["on", "off"])
    sp.add_argument("--execute-chunk", action="store_true", default=None)
    sp.add_argument("--workers", type=int)
    vlm_flags(sp)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        c = resolve(args.command, args)
        explicit = {k for k, v in vars(args).items() if v is not None}
        with pl.run_lock(c["out"]):
            fn = COMMANDS[args.command]
            if args.command == "train":
                return fn(c, args.force, explicit)
            return fn(c, args.force)
    except VladError as e:
        print(f"vlad {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
