import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest
from filelock import FileLock

from vlad import annotator as an
from vlad import cli
from vlad import pipeline as pl
from vlad import student as S
from vlad.errors import TrainingDivergence


def run(capsys, *argv):
    code = cli.main(["--log-level", "WARNING", *argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _json(out):
    return json.loads(out)


def test_train_flags_match_protocol_defaults():
    args = cli.build_parser().parse_args(["train", "--alpha", "1.0", "--epochs", "30", "--batch", "32", "--chunk", "5"])
    cfg = cli._student_cfg(cli.resolve("train", args), True)
    assert cfg == S.StudentConfig(alpha=1.0, epochs=30, batch=32, K=5)
    assert cfg.dim_weights == (1, 1, 1, 2, 2, 2, 1) and cfg.lr == 3e-4 and cfg.weight_decay == 0.01


def test_config_precedence(tmp_path):
    (tmp_path / "c.toml").write_text("[common]\nseed = 4\n[train]\nepochs = 5\nlr = 0.001\n")
    p = cli.build_parser()
    c = cli.resolve("train", p.parse_args(["train", "--config", str(tmp_path / "c.toml"), "--epochs", "7"]))
    assert (c["epochs"], c["lr"], c["seed"], c["batch"]) == (7, 0.001, 4, 32)
    (tmp_path / "c.json").write_text(json.dumps({"train": {"epochs": 9}}))
    c = cli.resolve("train", p.parse_args(["train", "--config", str(tmp_path / "c.json")]))
    assert c["epochs"] == 9


def test_config_errors_exit_2(tmp_path, capsys):
    (tmp_path / "c.toml").write_text("[train]\nepoch = 5\n")
    code, _, err = run(capsys, "train", "--out", str(tmp_path), "--config", str(tmp_path / "c.toml"))
    assert code == 2 and "unknown setting" in err
    code, _, err = run(capsys, "train", "--out", str(tmp_path), "--descriptions", "off", "--alpha", "0.5")
    assert code == 2
    code, _, _ = run(capsys, "collect", "--out", str(tmp_path), "--tasks", "juggling")
    assert code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--taxonomy", "4"])
    assert e.value.code == 2


def test_missing_inputs_exit_3(tmp_path, capsys):
    for cmd in (["train"], ["eval"], ["annotate"], ["audit-flips"], ["bench"]):
        code, _, err = run(capsys, *cmd, "--out", str(tmp_path / "empty"))
        assert code == 3, cmd
        assert "error" in err


def test_divergence_exit_4(tmp_path, capsys, monkeypatch):
    run(capsys, "collect", "--out", str(tmp_path), "--tasks", "drawer_open", "--episodes", "10")
    run(capsys, "annotate", "--out", str(tmp_path))

    def boom(*a, **k):
        raise TrainingDivergence("loss exploded")

    monkeypatch.setattr(S, "train", boom)
    code, _, err = run(capsys, "train", "--out", str(tmp_path))
    assert code == 4 and "loss exploded" in err


def test_noise_off_collect_then_audit_has_no_spurious_flips(tmp_path, capsys):
    code, out, _ = run(capsys, "collect", "--out", str(tmp_path), "--episodes", "10", "--flip-noise", "0")
    assert code == 0
    assert all(_json(out)[t]["successes"] == 10 for t in ("pick_place", "drawer_open", "drawer_close", "multi_stage"))
    code, out, _ = run(capsys, "audit-flips", "--out", str(tmp_path))
    assert code == 0
    assert _json(out)["teacher"]["spurious"] == 0
    rows = list(csv.DictReader(open(tmp_path / "report" / "flips.csv")))
    assert rows[-1]["episode"] == "ALL" and rows[-1]["spurious"] == "0"


def test_annotate_uses_canonical_nine_labels(tmp_path, capsys):
    run(capsys, "collect", "--out", str(tmp_path), "--episodes", "2")
    code, out, _ = run(capsys, "annotate", "--out", str(tmp_path), "--taxonomy", "9")
    assert code == 0
    canon = set(an.make_taxonomy(9).labels)
    files = list((tmp_path / "data").rglob("annotations.t9.jsonl"))
    assert len(files) == 8
    for f in files:
        assert {json.loads(l)["phase"] for l in f.read_text().splitlines()} <= canon


def test_stages_are_idempotent_and_locked(tmp_path, capsys):
    args = ("collect", "--out", str(tmp_path), "--tasks", "drawer_close", "--episodes", "3")
    code, out, _ = run(capsys, *args)
    assert code == 0 and _json(out)["skipped"] is False
    before = (tmp_path / "data" / "episodes" / "drawer_close" / "0000" / "trajectory.jsonl").read_bytes()
    code, out, _ = run(capsys, *args)
    assert _json(out)["skipped"] is True
    code, out, _ = run(capsys, *args, "--force")
    assert _json(out)["skipped"] is False
    assert (tmp_path / "data" / "episodes" / "drawer_close" / "0000" / "trajectory.jsonl").read_bytes() == before
    # a changed configuration is not skipped
    code, out, _ = run(capsys, *args[:-1], "4")
    assert _json(out)["skipped"] is False
    with FileLock(str(tmp_path / pl.LOCK_NAME)):
        code, _, err = run(capsys, *args)
    assert code == 2 and "locked" in err


def test_end_to_end_tiny_run(tmp_path, capsys):
    out = str(tmp_path)
    assert run(capsys, "collect", "--out", out, "--tasks", "drawer_open,drawer_close", "--episodes", "5")[0] == 0
    assert run(capsys, "annotate", "--out", out)[0] == 0
    code, o, _ = run(capsys, "train", "--out", out, "--epochs", "1")
    assert code == 0 and _json(o)["param_count"] < 2_000_000
    code, o, _ = run(capsys, "eval", "--out", out, "--episodes", "2")
    assert code == 0 and set(_json(o)["success"]) == {"drawer_open", "drawer_close"}
    code, o, _ = run(capsys, "audit-flips", "--out", out)
    assert code == 0 and "student" in _json(o)
    code, o, _ = run(capsys, "phase-cv", "--out", out)
    assert code == 0 and sorted(map(int, _json(o))) == [3, 5, 7, 9, 11, 13]
    code, o, _ = run(capsys, "bench", "--out", out, "--steps", "20")
    assert code == 0 and _json(o)["hz"] > 0
    rep = tmp_path / "report"
    for f in ("success.csv", "flips.csv", "cv.csv", "gripper_trace.svg", "phase_shares.svg", "bench.json"):
        assert (rep / f).exists(), f
    header = (rep / "success.csv").read_text().splitlines()[0]
    assert header == "source,task,episodes,successes,success_rate"
    # one manifest per artifact directory
    for d in ("data", "train", "eval", "report"):
        assert (tmp_path / d / "manifest.json").exists()
    # re-running train with an identical manifest is skipped and leaves the checkpoint untouched
    ck = (tmp_path / "train" / "checkpoint.vlad").read_bytes()
    code, o, _ = run(capsys, "train", "--out", out, "--epochs", "1")
    assert _json(o)["skipped"] is True and (tmp_path / "train" / "checkpoint.vlad").read_bytes() == ck


def test_sweep_grid_and_resume(tmp_path, capsys):
    out = str(tmp_path)
    run(capsys, "collect", "--out", out, "--tasks", "drawer_open,drawer_close", "--episodes", "5")
    code, o, _ = run(capsys, "sweep", "--out", out, "--epochs", "1", "--episodes", "1")
    assert code == 0
    res = _json(o)
    assert len(res["computed"]) == 8 and res["skipped"] == []
    rows = list(csv.DictReader(open(tmp_path / "report" / "sweep.csv")))
    assert len(rows) == 8
    assert {float(r["alpha"]) for r in rows} == {0.3, 0.5, 0.8, 1.0}
    assert {r["descriptions"] for r in rows} == {"True", "False"}
    # remove one cell: only that cell is recomputed
    victim = tmp_path / "sweep" / "cells" / "a0.5_don_t9_s0.json"
    victim.unlink()
    code, o, _ = run(capsys, "sweep", "--out", out, "--epochs", "1", "--episodes", "1")
    res = _json(o)
    assert res["computed"] == ["a0.5_don_t9_s0"] and len(res["skipped"]) == 7
    assert len(list(csv.DictReader(open(tmp_path / "report" / "sweep.csv")))) == 8


def test_console_script_installed():
    exe = shutil.which("vlad") or str(Path(sys.executable).parent / "vlad")
    r = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for sub in ("collect", "annotate", "train", "eval", "audit-flips", "phase-cv", "sweep", "bench", "demo"):
        assert sub in r.stdout
