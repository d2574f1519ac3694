import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlad import sim
from vlad.errors import ConfigError, InputError
from vlad.sim import ActionContinuous

from conftest import max_state_diff, states_equal


def test_reset_is_deterministic():
    task = sim.make_task("pick_place")
    a, b = sim.reset(task, 7), sim.reset(task, 7)
    assert states_equal(a, b)
    assert a.to_dict() == b.to_dict()


def test_reset_drawer_q_in_range():
    task = sim.make_task("drawer_open")
    s = sim.reset(task, 0)
    lo, hi = task.drawer_q_range
    assert lo <= s.drawer_q <= hi


def test_drawer_pair_resets_differ_only_in_task():
    a = sim.reset(sim.make_task("drawer_open"), 0)
    b = sim.reset(sim.make_task("drawer_close"), 0)
    assert a.task_id != b.task_id
    assert states_equal(a, b, ignore=("task_id",))


def test_drawer_pair_observations_identical_at_half():
    a = sim.reset(sim.make_task("drawer_open"), 3)
    b = sim.reset(sim.make_task("drawer_close"), 3)
    a.drawer_q = b.drawer_q = 0.5
    np.testing.assert_array_equal(sim.observe(a).vector, sim.observe(b).vector)


def test_unknown_task_rejected():
    with pytest.raises(ConfigError):
        sim.make_task("stack_blocks")
    with pytest.raises(ConfigError):
        sim.TaskSpec(task_id="nope", instruction="x")


def test_negative_seed_rejected():
    with pytest.raises(ConfigError):
        sim.reset(sim.make_task("pick_place"), -1)


def test_zero_action_only_advances_step_index():
    s0 = sim.reset(sim.make_task("pick_place"), 2)
    s1, ok = sim.step(s0, ActionContinuous.zero())
    assert not ok
    assert s1.step_index == s0.step_index + 1
    d0, d1 = s0.to_dict(), s1.to_dict()
    d0.pop("step_index"), d1.pop("step_index")
    assert d0 == d1


def test_held_object_tracks_ee():
    s = sim.reset(sim.make_task("pick_place"), 1)
    s.objects[0].pos = s.ee_pos.copy()
    s.objects[0].held = True
    s.gripper_open = 0.0
    for _ in range(5):
        s, _ = sim.step(s, ActionContinuous(np.array([0.05, 0.0, 0.0]), np.zeros(3), 1.0))
        np.testing.assert_array_equal(s.objects[0].pos, s.ee_pos)


def test_drawer_integration_hand_computed():
    # 10 steps of +0.05 along the drawer axis from q=0.5 at gain 1.0: 0.5 + 10*0.05 = 1.0 (clipped at 1)
    cfg = sim.SimConfig(drawer_gain=1.0, handle_slip=10.0)
    s = sim.reset(sim.make_task("drawer_open"), 0, cfg)
    s.drawer_q = 0.5
    s.ee_pos = cfg.handle_pos(0.5)
    s.handle_held = True
    s.gripper_open = 0.0
    axis = np.asarray(cfg.drawer_axis)
    expected = 0.5
    for _ in range(10):
        s, _ = sim.step(s, ActionContinuous(0.05 * axis, np.zeros(3), 1.0), cfg)
        expected = min(1.0, expected + 0.05)
        assert s.drawer_q == pytest.approx(expected, abs=1e-12)
    assert s.drawer_q == 1.0


def test_step_clips_and_rejects_nonfinite():
    s = sim.reset(sim.make_task("pick_place"), 0)
    s1, _ = sim.step(s, ActionContinuous(np.array([1.0, -1.0, 0.0]), np.array([5.0, 0, 0]), 0.0))
    np.testing.assert_allclose(s1.ee_pos - s.ee_pos, [0.05, -0.05, 0.0])
    np.testing.assert_allclose(s1.ee_rot - s.ee_rot, [0.1, 0, 0])
    with pytest.raises(InputError):
        sim.step(s, ActionContinuous(np.array([np.nan, 0, 0]), np.zeros(3), 0.0))
    with pytest.raises(InputError):
        sim.step(s, [0, 0, 0, 0, 0, 0, np.inf])


def test_gripper_integrates_at_fixed_rate():
    s = sim.reset(sim.make_task("pick_place"), 0)
    opens = []
    for _ in range(6):
        s, _ = sim.step(s, ActionContinuous(np.zeros(3), np.zeros(3), 1.0))
        opens.append(s.gripper_open)
    np.testing.assert_allclose(opens, [0.8, 0.6, 0.4, 0.2, 0.0, 0.0], atol=1e-12)


def test_attach_and_detach_thresholds():
    s = sim.reset(sim.make_task("pick_place"), 4)
    s.ee_pos = s.objects[0].pos + np.array([0.0, 0.0, 0.04])
    grip = ActionContinuous(np.zeros(3), np.zeros(3), 1.0)
    for _ in range(3):  # openness 0.8, 0.6, 0.4: above the attach threshold
        s, _ = sim.step(s, grip)
        assert not s.objects[0].held
    s, _ = sim.step(s, grip)  # 0.2 < 0.3
    assert s.objects[0].held
    np.testing.assert_array_equal(s.objects[0].pos, s.ee_pos)
    release = ActionContinuous(np.zeros(3), np.zeros(3), -1.0)
    for _ in range(3):  # 0.4, 0.6 -> still held, 0.8 > 0.7 releases
        s, _ = sim.step(s, release)
    assert not s.objects[0].held


def test_observe_relative_positions():
    s = sim.reset(sim.make_task("pick_place"), 0)
    s.objects[0].pos = s.ee_pos.copy()
    o = sim.observe(s)
    np.testing.assert_array_equal(o.object_rel[0], np.zeros(3))
    assert o.object_present[0] == 1.0
    np.testing.assert_array_equal(o.object_rel[1:], np.zeros((2, 3)))
    np.testing.assert_array_equal(o.object_present[1:], [0.0, 0.0])
    assert o.vector.shape == (sim.OBS_DIM,)
    np.testing.assert_array_equal(sim.Observation.from_vector(o.vector).vector, o.vector)


def test_noisy_observation_reproducible():
    s = sim.reset(sim.make_task("drawer_open"), 0)
    a = sim.observe(s, seed=5, noise=0.01).vector
    b = sim.observe(s, seed=5, noise=0.01).vector
    c = sim.observe(s, seed=6, noise=0.01).vector
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, sim.observe(s).vector)


def test_success_predicates():
    cfg = sim.DEFAULT_SIM
    s = sim.reset(sim.make_task("drawer_open"), 0)
    s.drawer_q = 0.95
    assert sim.is_success(s)
    s.task_id = "drawer_close"
    assert not sim.is_success(s)
    s.drawer_q = 0.05
    assert sim.is_success(s)
    m = sim.reset(sim.make_task("multi_stage"), 0)
    m.drawer_q = 0.95
    m.objects[0].pos = cfg.interior_center(0.95)
    assert sim.is_success(m)
    m.objects[0].held = True
    assert not sim.is_success(m)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), task=st.sampled_from(sim.TASK_IDS),
       actions=st.lists(st.lists(st.floats(-0.2, 0.2), min_size=7, max_size=7), min_size=1, max_size=40))
def test_replay_reproduces_states(seed, task, actions):
    t = sim.make_task(task)
    s = sim.reset(t, seed)
    logged = []
    for a in actions:
        s, _ = sim.step(s, a)
        logged.append(s)
    r = sim.reset(t, seed)
    for a, want in zip(actions, logged):
        r, _ = sim.step(r, a)
        assert max_state_diff(r, want) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), task=st.sampled_from(sim.TASK_IDS),
       actions=st.lists(st.lists(st.floats(-1, 1), min_size=7, max_size=7), min_size=1, max_size=60))
def test_state_invariants_hold(seed, task, actions):
    s = sim.reset(sim.make_task(task), seed)
    for a in actions:
        prev_held = [o.held for o in s.objects] + [s.handle_held]
        s, _ = sim.step(s, a)
        assert 0.0 <= s.gripper_open <= 1.0
        assert 0.0 <= s.drawer_q <= 1.0
        held = [o.held for o in s.objects] + [s.handle_held]
        assert sum(held) <= 1
        for o in s.objects:
            if o.held:
                np.testing.assert_array_equal(o.pos, s.ee_pos)
        # attach only below, detach only above the thresholds
        gained = any(h and not p for h, p in zip(held, prev_held))
        lost = any(p and not h for h, p in zip(held, prev_held))
        assert not (gained and lost)
        if gained:
            assert s.gripper_open < 0.3


def test_load_tasks_from_toml_and_json(tmp_path):
    p = tmp_path / "tasks.toml"
    p.write_text('[tasks.pick_place]\nhorizon = 300\n[tasks.drawer_open]\ndrawer_q_range = [0.4, 0.6]\n')
    tasks = sim.load_tasks(p)
    assert tasks["pick_place"].horizon == 300
    assert tasks["drawer_open"].drawer_q_range == (0.4, 0.6)
    j = tmp_path / "tasks.json"
    j.write_text('{"tasks": {"drawer_close": {"horizon": 520}}}')
    assert sim.load_tasks(j)["drawer_close"].horizon == 520
    j.write_text('{"tasks": {"drawer_close": {"horizon": 600}}}')
    with pytest.raises(ConfigError):
        sim.load_tasks(j)
