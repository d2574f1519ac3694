import numpy as np
import pytest

from vlad import annotator, sim, teacher


@pytest.fixture(scope="session")
def clean_teacher():
    return teacher.TeacherConfig(flip_noise_p=0.0, jitter_sigma=0.0)


@pytest.fixture(scope="session")
def small_rollouts():
    """A few noisy teacher episodes per task, shared across modules."""
    cfg = teacher.TeacherConfig()
    out = {}
    for tid in sim.TASK_IDS:
        out[tid] = [teacher.rollout(sim.make_task(tid), s, cfg) for s in range(4)]
    return out


@pytest.fixture(scope="session")
def tax9():
    return annotator.make_taxonomy(9)


def states_equal(a: sim.WorldState, b: sim.WorldState, ignore=()) -> bool:
    da, db = a.to_dict(), b.to_dict()
    for k in ignore:
        da.pop(k, None)
        db.pop(k, None)
    return da == db


def max_state_diff(a: sim.WorldState, b: sim.WorldState) -> float:
    diffs = [np.abs(a.ee_pos - b.ee_pos).max(), np.abs(a.ee_rot - b.ee_rot).max(),
             abs(a.gripper_open - b.gripper_open), abs(a.drawer_q - b.drawer_q)]
    diffs += [np.abs(o.pos - p.pos).max() for o, p in zip(a.objects, b.objects)]
    return float(max(diffs))


def pytest_terminal_summary(terminalreporter):
    import sys
    results = {}
    for mod in list(sys.modules.values()):
        results.update(getattr(mod, "ACCEPTANCE_RESULTS", None) or {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
