import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlad import annotator as an
from vlad import dataset as ds
from vlad import evaluation as ev
from vlad import sim
from vlad import student as S
from vlad import teacher
from vlad.errors import ConfigError, InputError


def runs_oracle(signs):
    """Independent flip count via sign runs.

    Reversal i opens run i. With binary signs it reverts within two frames iff
    run i is at most two frames long and is followed by another run; the run
    that closes a counted flip cannot open one itself.
    """
    runs = [len(list(g)) for _, g in itertools.groupby(signs)]
    reversals = len(runs) - 1
    spurious, i = 0, 1
    while i < len(runs):
        if runs[i] <= 2 and i + 1 < len(runs):
            spurious += 1
            i += 2
        else:
            i += 1
    return reversals, spurious


def test_auditor_matches_oracle_on_all_length_12_sequences():
    for bits in itertools.product((-1.0, 1.0), repeat=12):
        r = ev.audit_flips(bits)
        assert (r.reversals, r.spurious) == runs_oracle(bits), bits


def test_auditor_matches_oracle_on_all_shorter_sequences():
    for n in range(2, 12):
        for bits in itertools.product((-1.0, 1.0), repeat=n):
            r = ev.audit_flips(bits)
            assert (r.reversals, r.spurious) == runs_oracle(bits)


@pytest.mark.parametrize("seq,expected", [((-1, -1, 1, -1, -1), (2, 1)), ((-1, 1, 1, 1, -1), (2, 0)),
                                          ((1,) * 8, (0, 0)), ((-1,) * 3, (0, 0))])
def test_worked_sequences(seq, expected):
    r = ev.audit_flips(seq)
    assert (r.reversals, r.spurious) == expected


def test_zero_inherits_previous_sign():
    assert (ev.audit_flips([1, 0, 0, -1]).reversals, ev.audit_flips([1, 0, 0, -1]).spurious) == (1, 0)
    r = ev.audit_flips([-1, 0.5, 0, -1, -1])
    assert (r.reversals, r.spurious) == (2, 1)
    # a leading zero takes the first defined sign
    assert ev.audit_flips([0, 0, 1, 1]).reversals == 0


def test_short_sequence_is_input_error():
    with pytest.raises(InputError):
        ev.audit_flips([1.0])


@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=2, max_size=200))
def test_audit_invariants(cmds):
    r = ev.audit_flips(cmds)
    assert 0 <= r.spurious <= r.reversals <= r.frames - 1
    assert r.frames == len(cmds)


def test_audit_episodes_aggregates():
    rep = ev.audit_episodes([[1, -1, 1], [1, 1, 1, 1]], ["a", "b"])
    assert (rep.frames, rep.reversals, rep.spurious) == (7, 2, 1)
    assert rep.per_episode[0]["episode"] == "a"
    assert rep.spurious_fraction == pytest.approx(1 / 7)


# --------------------------------------------------------------------------- CV

def test_cv_hand_cases():
    assert ev.cv_from_counts([5, 5, 5, 5]) == 0.0
    assert abs(ev.cv_from_counts([5, 5, 5]) - 1) == 1.0
    assert ev.cv_from_counts([1, 0]) == pytest.approx(1.0, abs=1e-12)
    assert ev.cv_from_counts([30, 0, 0]) == pytest.approx(math.sqrt(2), abs=1e-12)
    assert abs(ev.cv_from_counts([30, 0, 0]) - 1) == pytest.approx(0.414, abs=1e-3)


def test_cv_scale_invariance():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = rng.integers(0, 1000, rng.integers(2, 14)).astype(float)
        c[0] += 1
        k = rng.uniform(0.01, 1000)
        assert ev.cv_from_counts(c * k) == pytest.approx(ev.cv_from_counts(c), rel=1e-12)


def test_cv_empty_is_input_error():
    with pytest.raises(InputError):
        ev.cv_from_counts([])
    with pytest.raises(InputError):
        ev.cv_from_counts([0, 0])
    with pytest.raises(InputError):
        ev.phase_cv([])


def test_phase_cv_all_granularities(small_rollouts):
    sets = [[an.label_trajectory(tr) for tr in trs] for trs in small_rollouts.values()]
    rep = ev.phase_cv(sets)
    assert [r.granularity for r in rep.rows] == [3, 5, 7, 9, 11, 13]
    for r in rep.rows:
        assert len(r.labels) == r.granularity
        assert sum(r.share_mean) == pytest.approx(1.0, abs=1e-9)
        assert r.abs_cv_minus_1 == pytest.approx(abs(r.cv - 1))
        assert r.cv_std >= 0


def test_phase_cv_single_set_matches_counts():
    labels = [["idle"] * 3 + ["approaching"] * 1]
    row = ev.phase_cv([labels], (9,)).rows[0]
    counts = [3, 1] + [0] * 7
    assert row.cv == pytest.approx(ev.cv_from_counts(counts))
    assert row.share_std == [0.0] * 9


# --------------------------------------------------------------------------- closed loop

def test_zero_policy_never_succeeds_on_pick_place():
    zero = lambda obs, tids: np.zeros((len(tids), 1, 7))  # noqa: E731
    res = ev.rollout_eval(None, [sim.make_task("pick_place")], ev.EvalConfig(episodes=5), actor=zero)
    assert res.success == {"pick_place": 0.0}
    assert all(e.steps == sim.make_task("pick_place").horizon for e in res.episodes)


def test_noiseless_teacher_through_harness():
    cfg = teacher.TeacherConfig(flip_noise_p=0.0, jitter_sigma=0.0)
    res = ev.teacher_eval([sim.make_task(t) for t in sim.TASK_IDS], cfg, ev.EvalConfig(episodes=20))
    for t, rate in res.success.items():
        assert rate >= 0.95, t


def _tiny_student(seed=0):
    cfg = S.StudentConfig(K=2, obs_widths=(16,), embed_dim=8, trunk_widths=(16,), seed=seed, init_scale_head=1.0)
    spec = ds.DiscretizationSpec((-0.03,) * 6 + (-1.0,), (0.03,) * 6 + (1.0,))
    return S.init_policy(cfg, sim.OBS_DIM, spec, ds.build_vocab([]))


def test_rollout_eval_deterministic():
    pol = _tiny_student()
    tasks = [sim.make_task("drawer_open"), sim.make_task("pick_place")]
    cfg = ev.EvalConfig(episodes=3, horizon=30, seed=2)
    a, b = ev.rollout_eval(pol, tasks, cfg), ev.rollout_eval(pol, tasks, cfg)
    assert a.success == b.success and a.counts == b.counts
    assert [e.gripper for e in a.episodes] == [e.gripper for e in b.episodes]
    chunked = ev.rollout_eval(pol, tasks, ev.EvalConfig(episodes=3, horizon=30, seed=2, execute_chunk=True))
    assert all(e.steps <= 30 for e in chunked.episodes)


def test_eval_seeds_disjoint_from_collection_seeds():
    seeds = ev.eval_seeds(ev.EvalConfig(episodes=100, seed=99))
    assert min(seeds) > 99 * 100_000 + 3 * 10_000 + 10_000
    with pytest.raises(ConfigError):
        ev.EvalConfig(episodes=0)


def test_latency_bench():
    pol = _tiny_student()
    with pytest.raises(InputError):
        ev.latency_bench(pol, 0)
    with pytest.raises(InputError):
        ev.latency_bench(pol, 10, warmup=5)
    sec, hz = ev.latency_bench(pol, 300)
    assert hz == pytest.approx(1.0 / sec)
    # stability: the better of repeated pairs agrees within 20 %
    a = min(ev.latency_bench(pol, 300)[0] for _ in range(3))
    b = min(ev.latency_bench(pol, 300)[0] for _ in range(3))
    assert abs(a - b) / max(a, b) <= 0.2


# --------------------------------------------------------------------------- reports

def test_report_files(tmp_path, small_rollouts):
    rep = ev.audit_episodes([tr.gripper_commands() for tr in small_rollouts["pick_place"]])
    p = ev.write_csv(tmp_path / "flips.csv", ev.FLIPS_COLUMNS, ev.flip_rows("teacher", rep))
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(ev.FLIPS_COLUMNS)
    assert lines[-1].startswith("teacher,ALL,")
    svg = ev.gripper_trace_svg(tmp_path / "t.svg", {"teacher": small_rollouts["pick_place"][0].gripper_commands()})
    assert svg.read_text().startswith("<svg")
    sets = [[an.label_trajectory(tr) for tr in trs] for trs in small_rollouts.values()]
    cvp = ev.write_csv(tmp_path / "cv.csv", ev.CV_COLUMNS, ev.cv_rows(ev.phase_cv(sets)))
    assert len(cvp.read_text().splitlines()) == 1 + sum(an.GRANULARITIES)
    assert ev.phase_bars_svg(tmp_path / "b.svg", ev.phase_cv(sets)).read_text().count("<rect") == sum(an.GRANULARITIES)
