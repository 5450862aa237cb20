import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advscene.planner import Neighbor, PlannerConfig, constant_velocity, plan
from advscene.synth import synth_scenarios
from advscene.world import AgentState, VehicleFootprint, WorldError, env_coll_pens, rects_overlap

FP = VehicleFootprint(4.5, 1.8)


@pytest.fixture(scope="module")
def road():
    return synth_scenarios(5, 1, "straight")[0].map   # lanes along +x at y = 0, -3.5, -7


def idm_oracle(v, v0, gap, dv, a=2.0, b=3.0, T=1.5, s0=2.0, delta=4.0):
    s_star = s0 + max(0.0, v * T + v * dv / (2 * math.sqrt(a * b)))
    return a * (1 - (v / v0) ** delta - (s_star / gap) ** 2)


def test_free_flow_holds_centerline_speed(road):
    res = plan(AgentState(-50.0, -3.5, 0.0, 10.0), [], road)
    arr = res.as_array()
    assert not res.fallback and res.lane_id == 1
    assert arr.shape == (13, 4)
    assert np.allclose(arr[:, 1], -3.5, atol=1e-9)
    assert np.allclose(arr[:, 3], 10.0, atol=1e-9)
    assert np.allclose(np.diff(arr[:, 0]), 5.0, atol=1e-9)


def test_accelerates_toward_desired_speed(road):
    arr = plan(AgentState(-50.0, 0.0, 0.0, 4.0), [], road).as_array()
    v = arr[:, 3]
    assert (np.diff(v) > 0).all() and v[-1] <= 10.0


def test_stopped_leader_brings_ego_to_rest_before_gap(road):
    ego = AgentState(0.0, -3.5, 0.0, 10.0)
    leader = Neighbor(AgentState(15.0, -3.5, 0.0, 0.0), FP)
    res = plan(ego, [leader], road, footprint=FP)
    arr = res.as_array()
    v = arr[:, 3]
    assert (np.diff(v) <= 1e-12).all()
    assert v[-1] < 0.5
    assert (arr[:, 0] + FP.length / 2 < 15.0 - FP.length / 2).all()
    # each executed acceleration is the tick-mean of the IDM rule integrated on 10 substeps
    for k, act in enumerate(res.actions):
        x, vk = arr[k, 0], arr[k, 3]
        pos, vel = 0.0, vk
        for _ in range(10):
            acc = np.clip(idm_oracle(vel, 10.0, 15.0 - FP.length - x - pos, vel), -6, 6)
            nv = max(0.0, vel + acc * 0.05)
            pos += 0.025 * (vel + nv)
            vel = nv
        assert act.accel == pytest.approx(np.clip((vel - vk) / 0.5, -6, 6), abs=1e-9)


def test_leader_in_other_lane_is_ignored(road):
    free = plan(AgentState(0.0, -3.5, 0.0, 10.0), [], road).as_array()
    side = plan(AgentState(0.0, -3.5, 0.0, 10.0), [Neighbor(AgentState(15.0, 0.0, 0.0, 0.0), FP)],
                road).as_array()
    assert np.array_equal(free, side)


def test_far_off_map_falls_back(road):
    ego = AgentState(0.0, 50.0, 0.0, 7.0)
    res = plan(ego, [], road)
    assert res.fallback and res.warning
    assert np.array_equal(res.as_array(), constant_velocity(ego, PlannerConfig()).as_array())


def test_converges_onto_lane_from_offset(road):
    arr = plan(AgentState(-60.0, -2.5, 0.0, 10.0), [], road).as_array()
    assert abs(arr[-1, 1] + 3.5) < abs(-2.5 + 3.5)


@settings(max_examples=25, deadline=None)
@given(st.floats(-140, 100), st.sampled_from([0.0, -3.5, -7.0]), st.floats(0.0, 18.0))
def test_free_flow_stays_drivable_and_feasible(road, x, y, v):
    res = plan(AgentState(x, y, 0.0, v), [], road, footprint=FP)
    arr = res.as_array()
    assert not res.fallback
    assert all(env_coll_pens(tuple(p), FP, road) == 0.0 for p in arr[:, :2])
    for a in res.actions:
        assert abs(a.accel) <= 6.0 and abs(a.yaw_rate) <= 1.0


@settings(max_examples=20, deadline=None)
@given(st.floats(-140, 80), st.floats(2.0, 15.0), st.integers(1, 6))
def test_replan_consistency(road, x, v, k):
    first = plan(AgentState(x, -3.5, 0.0, v), [], road).as_array()
    again = plan(AgentState(*first[k]), [], road).as_array()
    assert np.abs(again[:13 - k, :2] - first[k:, :2]).max() < 0.1


def test_deterministic(road):
    ego = AgentState(-30.0, -3.5, 0.02, 8.0)
    nb = [Neighbor(AgentState(-5.0, -3.5, 0.0, 3.0), FP)]
    assert np.array_equal(plan(ego, nb, road).as_array(), plan(ego, nb, road).as_array())


def test_plan_never_overlaps_slow_leader(road):
    ego = AgentState(-40.0, 0.0, 0.0, 12.0)
    lead = AgentState(-20.0, 0.0, 0.0, 3.0)
    arr = plan(ego, [Neighbor(lead, FP)], road, footprint=FP).as_array()
    lead_arr = np.array([[lead.x + 3.0 * 0.5 * t, 0.0, 0.0, 3.0] for t in range(13)])
    assert not rects_overlap(arr, lead_arr, FP, FP).any()


@pytest.mark.parametrize("kw", [{"desired_speed": 0}, {"time_headway": -1}, {"min_gap": 0},
                                {"comfort_decel": 0}, {"replan_period": 0}, {"idm_substeps": 0}, {"lane_change": True}])
def test_config_validation(kw):
    with pytest.raises(WorldError):
        PlannerConfig(**kw)
