"""Rule-based lane-graph ego planner: IDM car-following plus pure-pursuit tracking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .control import Path, idm_accel, pure_pursuit_yaw_rate, route_path
from .world import (
    DEFAULT_LIMITS, HORIZON, TICK, AgentState, Limits, MapModel, Trajectory, VehicleFootprint,
    WorldError, bicycle_step,
)
from .world import Action


@dataclass(frozen=True)
class PlannerConfig:
    desired_speed: float = 10.0
    time_headway: float = 1.5
    min_gap: float = 2.0
    comfort_decel: float = 3.0
    max_accel: float = 2.0
    idm_delta: float = 4.0
    replan_period: int = 2
    lane_change: bool = False
    horizon: int = HORIZON
    tick: float = TICK
    lookahead_min: float = 6.0
    lookahead_gain: float = 1.2
    max_lateral_offset: float = 5.0
    leader_lateral: float = 2.0
    idm_substeps: int = 10

    def __post_init__(self):
        for name in ("desired_speed", "time_headway", "min_gap", "comfort_decel", "max_accel",
                     "idm_delta", "tick", "lookahead_min", "max_lateral_offset", "leader_lateral"):
            if not getattr(self, name) > 0:
                raise WorldError(f"planner config: {name} must be positive")
        if self.replan_period < 1 or self.horizon < 1 or self.idm_substeps < 1:
            raise WorldError("planner config: replan_period, horizon and idm_substeps must be >= 1")
        if self.lane_change:
            raise WorldError("planner config: lane changes are not supported")


@dataclass(frozen=True)
class Neighbor:
    """Another vehicle as seen by the planner at plan time."""
    state: AgentState
    footprint: VehicleFootprint


@dataclass
class PlanResult:
    trajectory: Trajectory          # current state + ``horizon`` planned states
    actions: list
    fallback: bool = False
    warning: Optional[str] = None
    lane_id: Optional[int] = None

    def as_array(self) -> np.ndarray:
        return self.trajectory.as_array()


def _predict(n: Neighbor, t: float) -> np.ndarray:
    s = n.state
    return np.array([s.x + s.speed * math.cos(s.heading) * t,
                     s.y + s.speed * math.sin(s.heading) * t, s.heading, s.speed])


def _leaders(path: Path, ego: AgentState, fp: VehicleFootprint, neighbors: Sequence[Neighbor],
             t: float, cfg: PlannerConfig) -> list:
    """Vehicles ahead on the path at time ``t``: (bumper offset s, speed along the path)."""
    s_e = path.project((ego.x, ego.y))[0]
    out = []
    for n in neighbors:
        p = _predict(n, t)
        s_o, lat, hd, _ = path.project(p[:2])
        if abs(lat) >= cfg.leader_lateral or s_o <= s_e:
            continue
        out.append((s_o - s_e - 0.5 * (fp.length + n.footprint.length), p[3] * math.cos(p[2] - hd)))
    return out


def _idm_tick_accel(v: float, leaders: list, cfg: PlannerConfig, limits: Limits) -> float:
    """Mean acceleration over one tick of IDM integrated on ``idm_substeps`` substeps.

    A single IDM evaluation per 0.5 s tick over-brakes at the action bound and
    then creeps forward; substepping keeps the approach to a stopped leader monotone.
    """
    h = cfg.tick / cfg.idm_substeps
    pos, vel = 0.0, v
    for i in range(cfg.idm_substeps):
        gap, v_lead = None, 0.0
        for g0, vl in leaders:
            g = g0 + vl * h * i - pos
            if gap is None or g < gap:
                gap, v_lead = g, vl
        a = idm_accel(vel, cfg.desired_speed, gap, vel - v_lead, cfg.max_accel, cfg.comfort_decel,
                      cfg.time_headway, cfg.min_gap, cfg.idm_delta)
        a = float(np.clip(a, -limits.accel_max, limits.accel_max))
        nv = max(0.0, vel + a * h)
        pos += 0.5 * (vel + nv) * h
        vel = nv
    return float(np.clip((vel - v) / cfg.tick, -limits.accel_max, limits.accel_max))


def constant_velocity(ego: AgentState, cfg: PlannerConfig) -> PlanResult:
    states = [ego]
    for _ in range(cfg.horizon):
        s = states[-1]
        states.append(AgentState(s.x + s.speed * math.cos(s.heading) * cfg.tick,
                                 s.y + s.speed * math.sin(s.heading) * cfg.tick, s.heading, s.speed))
    return PlanResult(Trajectory(tuple(states), cfg.tick), [Action(0.0, 0.0)] * cfg.horizon)


def plan(ego: AgentState, neighbors: Sequence[Neighbor], map_: MapModel,
         cfg: PlannerConfig = PlannerConfig(), footprint: VehicleFootprint = VehicleFootprint(),
         limits: Limits = DEFAULT_LIMITS) -> PlanResult:
    """Plan ``cfg.horizon`` steps along the lane graph from the ego's current state."""
    proj = map_.project(ego.x, ego.y, ego.heading, max_heading_error=math.pi / 2)
    if proj is None or abs(proj[2]) > cfg.max_lateral_offset:
        res = constant_velocity(ego, cfg)
        res.fallback = True
        res.warning = "ego is off the lane graph; holding constant velocity"
        return res
    lane_id, s0 = proj[0], proj[1]
    reach = s0 + max(ego.speed, cfg.desired_speed) * cfg.tick * cfg.horizon + 60.0
    path = route_path(map_, [lane_id], min_length=reach)
    states, actions = [ego], []
    for k in range(cfg.horizon):
        cur = states[-1]
        leaders = _leaders(path, cur, footprint, neighbors, k * cfg.tick, cfg)
        a = _idm_tick_accel(cur.speed, leaders, cfg, limits)
        look = max(cfg.lookahead_min, cfg.lookahead_gain * cur.speed)
        w = pure_pursuit_yaw_rate(cur.x, cur.y, cur.heading, cur.speed, path, look,
                                  yaw_rate_max=limits.yaw_rate_max)
        act = Action(a, w)
        actions.append(act)
        states.append(bicycle_step(cur, act, cfg.tick, limits))
    return PlanResult(Trajectory(tuple(states), cfg.tick), actions, lane_id=lane_id)
