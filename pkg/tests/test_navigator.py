import json
import math

import numpy as np
import pytest

from rownav.errors import StaleGps
from rownav.evaluation import switch_geometry
from rownav.geometry import WorldPoint
from rownav.navigator import (CoarseGpsFix, EndTrigger, MissionPlan, NavEvent, NavPhase, Navigator, SensorFrame,
                              check_end_trigger, transition_allowed)
from rownav.perception import synthetic_heatmap
from rownav.simulator import ScriptEvent, TrialSettings, run_trial
from rownav.world import NoiseSpec, RobotState, VineyardLayout

CYCLE = [0, 1, 2, 3, 4]


def fix_at(plan, k, dist, t=0.0, acc=5.0):
    """Coarse fix ``dist`` metres before the exit endpoint of plan lane ``k``."""
    end, h = plan.exits[k], plan.lane_heading(k)
    return CoarseGpsFix(WorldPoint(end.east - dist * math.cos(h), end.north - dist * math.sin(h)), acc, t)


@pytest.fixture(scope="module")
def short():
    return VineyardLayout.preset("RN", n_lanes=2, length=40.0)


@pytest.fixture(scope="module")
def short_plan(short):
    return MissionPlan.serpentine(short)


# -- end trigger ---------------------------------------------------------------------


def test_far_from_endpoint_does_not_trigger(flat):
    plan = MissionPlan.serpentine(flat)
    assert not check_end_trigger(fix_at(plan, 0, 30.0), plan, 0)


def test_within_threshold_triggers(flat):
    plan = MissionPlan.serpentine(flat)
    assert plan.end_threshold == 12.0
    assert check_end_trigger(fix_at(plan, 0, 10.0, acc=5.0), plan, 0)
    assert not check_end_trigger(fix_at(plan, 0, 12.0), plan, 0)
    # the second lane runs the other way, so its exit is the far end of the first lane's entry side
    assert check_end_trigger(fix_at(plan, 1, 5.0), plan, 1)
    assert not check_end_trigger(fix_at(plan, 0, 5.0 - flat.row_length), plan, 1)


def test_stale_fix_raises(flat):
    plan = MissionPlan.serpentine(flat)
    with pytest.raises(StaleGps):
        check_end_trigger(fix_at(plan, 0, 5.0, t=0.0), plan, 0, now=2.5)
    assert check_end_trigger(fix_at(plan, 0, 5.0, t=0.0), plan, 0, now=2.0)


def test_trigger_latches_on_noisy_fixes(flat):
    plan = MissionPlan.serpentine(flat)
    rng = np.random.default_rng(11)
    trig = EndTrigger(plan)
    raw, latched = [], []
    for dist in np.linspace(16.0, 8.0, 200):
        noisy = fix_at(plan, 0, dist + rng.normal(0.0, 2.0))
        raw.append(check_end_trigger(noisy, plan, 0))
        latched.append(trig.update(noisy, 0))
    first = raw.index(True)
    assert not all(raw[first:])  # the raw check chatters across the threshold
    assert latched == [False] * first + [True] * (len(raw) - first)
    trig.rearm()
    assert not trig.update(fix_at(plan, 0, 30.0), 0)


def test_fix_accuracy_must_be_positive():
    with pytest.raises(ValueError):
        CoarseGpsFix(WorldPoint(0, 0), 0.0, 0.0)


# -- plan -------------------------------------------------------------------------------


def test_serpentine_plan(flat):
    plan = MissionPlan.serpentine(flat)
    assert plan.lanes == (0, 1, 2)
    assert plan.directions == (1, -1, 1)
    assert plan.entries[1] == flat.lane(1)[1]
    assert [plan.turn_direction(k) for k in range(2)] == [1, -1]  # lanes step to the left of the row direction
    assert plan.lane_heading(1) == pytest.approx(plan.lane_heading(0) - math.pi)


def test_plan_rejects_non_adjacent_lanes(flat):
    with pytest.raises(ValueError):
        MissionPlan.serpentine(flat, lanes=[0, 2])


def test_plan_round_trip(flat, tmp_path):
    plan = MissionPlan.serpentine(flat, end_threshold=9.0)
    plan.save(tmp_path / "plan.json")
    assert MissionPlan.load(tmp_path / "plan.json") == plan
    d = plan.to_dict()
    toml = "[plan]\n" + "\n".join(f"{k} = {json.dumps(v)}" for k, v in d.items()) + "\n"
    (tmp_path / "plan.toml").write_text(toml)
    assert MissionPlan.load(tmp_path / "plan.toml") == plan


# -- state machine, stepped by hand --------------------------------------------------------


def test_transition_table():
    for a, b in zip(CYCLE, CYCLE[1:] + [0]):
        assert transition_allowed(a, b)
    assert not transition_allowed(0, 2)
    assert not transition_allowed(3, 0)
    assert all(transition_allowed(p, -1) for p in CYCLE)
    assert transition_allowed(1, 5)
    assert not transition_allowed(5, -1)


def test_required_cameras_follow_the_turn_side(flat, cameras):
    plan = MissionPlan.serpentine(flat)
    nav = Navigator(plan, cameras)
    assert nav.required_cameras() == ("front",)
    assert nav.depth_camera() is None
    nav._enter_phase(NavPhase.END_APPROACH, 0.0, 0.0)
    assert nav.required_cameras() == ("back",)
    # the first switch turns left (plan.turn_direction(0) == 1)
    assert nav.depth_camera() == "left"
    nav._enter_phase(NavPhase.TURN_OUT, 0.0, 0.0)
    assert nav.required_cameras() == ("left",)


def tracking_frame(layout, plan, cam, t, station, gps=None):
    s = plan.entries[0]
    h = plan.lane_heading(0)
    robot = RobotState(layout.surface_pose(s.east + station * math.cos(h), s.north + station * math.sin(h), h), time=t)
    hm = synthetic_heatmap(layout, robot, cam, NoiseSpec.zero(), seed=0)
    return SensorFrame(t, {"front": hm}, gps=gps, odometry=station)


def test_step_tracks_then_triggers(flat, cameras):
    plan = MissionPlan.serpentine(flat)
    nav = Navigator(plan, cameras)
    res = nav.step(tracking_frame(flat, plan, cameras["front"], 0.0, 10.0, fix_at(plan, 0, 40.0)))
    assert res.phase == NavPhase.ROW_TRACKING
    assert res.command.v == pytest.approx(0.8) and abs(res.command.omega) < 1e-6
    res = nav.step(tracking_frame(flat, plan, cameras["front"], 0.1, 60.0, fix_at(plan, 0, 10.0, t=0.1)))
    assert res.phase == NavPhase.END_APPROACH
    assert [e.event for e in res.events] == ["EndTrigger", "PhaseChange"]
    assert res.events[1].reason == "0->1"


def test_stale_gps_is_reported_once_and_holds_state(flat, cameras):
    plan = MissionPlan.serpentine(flat)
    nav = Navigator(plan, cameras)
    old = fix_at(plan, 0, 5.0, t=0.0)
    names = []
    for k in range(3):
        res = nav.step(tracking_frame(flat, plan, cameras["front"], 3.0 + k / 15, 60.0, old))
        names += [e.event for e in res.events]
        assert res.phase == NavPhase.ROW_TRACKING
    assert names == ["StaleGps"]


def test_lost_detection_holds_then_faults(flat, cameras):
    plan = MissionPlan.serpentine(flat)
    nav = Navigator(plan, cameras)
    good = nav.step(tracking_frame(flat, plan, cameras["front"], 0.0, 10.0)).command
    t, events, cmds = 0.0, [], []
    while nav.phase == NavPhase.ROW_TRACKING:
        t += 1 / 15
        res = nav.step(SensorFrame(t, {"front": None}))
        events += res.events
        cmds.append((t, res.command))
    # the loss clock starts at the first lost frame
    t_lost = cmds[0][0]
    assert all(c == good for tt, c in cmds if tt - t_lost <= 0.5 - 1e-9)
    assert all(c.v == 0 and c.omega == 0 for tt, c in cmds if tt - t_lost > 0.5 + 1 / 15)
    assert [e.event for e in events] == ["DetectionLost", "Fault", "PhaseChange"]
    assert events[1].reason == "DetectionLost"
    assert 3.0 - 1e-6 <= events[1].time - t_lost <= 3.0 + 1 / 15 + 1e-6


def test_event_json_lines():
    ev = NavEvent(1.5, 0, "Fault", "WrongRow", 2)
    assert json.loads(ev.to_json()) == {"time": 1.5, "phase": 0, "event": "Fault", "reason": "WrongRow", "lane": 2}


# -- closed loop -----------------------------------------------------------------------


def assert_cycle_invariants(log):
    seq = [p for p in log.phase_sequence() if p >= 0]
    # every transition follows the fixed cycle (faults resume at row tracking)
    full = log.phase_sequence()
    for a, b in zip(full, full[1:]):
        assert transition_allowed(a, b) or (a == -1 and b == 0), (a, b)
    ph = log.columns["phase"]
    turning = (ph == 2) | (ph == 4)
    assert np.all(log.columns["v_cmd"][turning] == 0.0)
    return seq


@pytest.fixture(scope="module")
def crt_zero_noise(crt):
    plan = MissionPlan.serpentine(crt)
    return plan, run_trial(crt, plan, NoiseSpec.zero(), seed=0)


def test_zero_noise_crt_runs_the_full_cycle(crt_zero_noise):
    plan, log = crt_zero_noise
    assert log.faults == []
    assert log.completed
    assert log.phase_sequence() == CYCLE * 3 + [0, 1, 5]
    assert log.meta["lanes_completed"] == len(plan) == 4
    assert [e.event for e in log.events][-1] == "Completed"
    assert_cycle_invariants(log)


def test_turn_out_ends_aligned(crt, crt_zero_noise):
    plan, log = crt_zero_noise
    geo = switch_geometry(log, plan, crt)
    assert len(geo.turn_out) == 3
    assert max(abs(a) for a in geo.turn_out) <= 2.0


def test_noisy_run_keeps_invariants(short, short_plan):
    log = run_trial(short, short_plan, NoiseSpec(), seed=3)
    assert log.completed
    assert_cycle_invariants(log)


def test_row_end_never_detected_times_out(short, short_plan):
    script = [ScriptEvent("depth_override", phase=1, value=1.0)]
    log = run_trial(short, short_plan, NoiseSpec.zero(), script=script, seed=0, settings=TrialSettings(intervene=False))
    assert [f.reason for f in log.faults] == ["RowEndTimeout"]
    assert log.meta["aborted"]
    # odometry in state 1 reached the configured overrun before the fault
    i = np.nonzero(log.columns["phase"] == 1)[0]
    travelled = np.abs(log.columns["v_cmd"][i]).sum() / 30.0
    assert travelled == pytest.approx(20.0, abs=0.2)


def test_phantom_next_row_is_caught_as_wrong_row(short, short_plan):
    # the side camera locks on a row straight along its axis right after the check arms
    script = [ScriptEvent("phantom_row", phase=3, camera="left"), ScriptEvent("phantom_row", phase=3, camera="right")]
    log = run_trial(short, short_plan, NoiseSpec.zero(), script=script, seed=0, settings=TrialSettings(intervene=False))
    assert len(log.faults) == 1
    assert log.faults[0].reason.startswith("WrongRow")
    assert log.faults[0].phase == NavPhase.TRAVERSE


def test_faults_are_resolved_by_intervention(short, short_plan):
    script = [ScriptEvent("phantom_row", phase=3)]
    log = run_trial(short, short_plan, NoiseSpec.zero(), script=script, seed=0)
    assert log.completed
    assert log.interventions == 1
    assert [e.event for e in log.events].count("Resumed") == 1


def test_gps_outage_reports_stale_fix_and_recovers(short, short_plan):
    script = [ScriptEvent("gps_outage", t0=5.0, t1=15.0)]
    log = run_trial(short, short_plan, NoiseSpec.zero(), script=script, seed=0)
    names = [e.event for e in log.events]
    assert names.count("StaleGps") == 1
    assert log.completed and log.interventions == 0
