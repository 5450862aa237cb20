"""Procedural synthetic traffic: road templates plus an IDM/pure-pursuit traffic policy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .control import Path, idm_accel, pure_pursuit_yaw_rate, route_path, straightest_successor
from .world import (
    HORIZON, T_HIST, TICK, AgentRecord, AgentState, Lane, MapModel, Scenario, Trajectory,
    VehicleFootprint, WorldError, bicycle_step_t, normalize_angle, rasterize_lanes,
    rects_overlap,
)
import torch

TEMPLATES = ("straight", "curve", "intersection", "merge")
LANE_W = 3.5
JUNCTION = 10.0


# --------------------------------------------------------------------------
# road templates


def _offset(ref: np.ndarray, offset: float) -> np.ndarray:
    d = np.gradient(ref, axis=0)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    normal = np.stack([-d[:, 1], d[:, 0]], -1)
    return ref + offset * normal


def _line(p0, p1, spacing=1.0) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(int(math.ceil(np.linalg.norm(p1 - p0) / spacing)), 1)
    u = np.linspace(0, 1, n + 1)[:, None]
    return p0 + (p1 - p0) * u


def _bezier(p0, h0, p1, h1, spacing=1.0) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    L = np.linalg.norm(p1 - p0)
    c0 = p0 + 0.4 * L * np.array([math.cos(h0), math.sin(h0)])
    c1 = p1 - 0.4 * L * np.array([math.cos(h1), math.sin(h1)])
    n = max(int(math.ceil(1.3 * L / spacing)), 2)
    u = np.linspace(0, 1, n + 1)[:, None]
    return ((1 - u) ** 3 * p0 + 3 * (1 - u) ** 2 * u * c0 + 3 * (1 - u) * u ** 2 * c1 + u ** 3 * p1)


def _link_adjacent(lanes: list) -> list:
    """lanes listed left to right; wire left/right neighbours."""
    out = []
    for i, ln in enumerate(lanes):
        out.append(Lane(ln.id, ln.points, ln.width, ln.successors,
                        lanes[i - 1].id if i > 0 else None,
                        lanes[i + 1].id if i + 1 < len(lanes) else None))
    return out


def build_straight(rng) -> tuple:
    n_fwd = int(rng.integers(2, 4))
    n_opp = int(rng.integers(0, 2))
    fwd = [Lane(i, _line((-150, -LANE_W * i), (250, -LANE_W * i))) for i in range(n_fwd)]
    opp = [Lane(10 + j, _line((250, LANE_W * (j + 1)), (-150, LANE_W * (j + 1)))) for j in range(n_opp)]
    lanes = _link_adjacent(fwd) + _link_adjacent(opp[::-1])
    return lanes, {"main": [l.id for l in fwd]}


def build_curve(rng) -> tuple:
    n_fwd = int(rng.integers(2, 4))
    radius = float(rng.uniform(60.0, 120.0))
    sweep = float(rng.uniform(math.radians(50), math.radians(100)))
    turn = 1.0 if rng.random() < 0.5 else -1.0
    lead = _line((-120, 0), (0, 0))[:-1]
    u = np.arange(0.0, radius * sweep, 1.0) / radius
    arc = np.stack([radius * np.sin(u), turn * radius * (1 - np.cos(u))], -1)
    h_end = turn * sweep
    end = np.array([radius * math.sin(sweep), turn * radius * (1 - math.cos(sweep))])
    tail = _line(end, end + 150 * np.array([math.cos(h_end), math.sin(h_end)]))
    ref = np.concatenate([lead, arc, tail])
    fwd = [Lane(i, _offset(ref, -LANE_W * i)) for i in range(n_fwd)]
    return _link_adjacent(fwd), {"main": [l.id for l in fwd]}


def build_merge(rng) -> tuple:
    depth = float(rng.uniform(14.0, 22.0))
    ramp_len = float(rng.uniform(90.0, 130.0))
    left = Lane(0, _line((-150, 0), (250, 0)))
    right_up = Lane(1, _line((-150, -LANE_W), (0, -LANE_W)), successors=(2,))
    right_dn = Lane(2, _line((0, -LANE_W), (250, -LANE_W)))
    u = np.linspace(0.0, 1.0, int(ramp_len) + 1)
    ramp_pts = np.stack([-ramp_len + ramp_len * u, -LANE_W - depth * (1 - u) ** 2], -1)
    ramp = Lane(3, ramp_pts, successors=(2,))
    lanes = [
        Lane(0, left.points, right=1),
        Lane(1, right_up.points, successors=(2,), left=0),
        Lane(2, right_dn.points, left=0),
        ramp,
    ]
    # lane 0's right neighbour is 1 before the merge and 2 after; routes handle the switch
    return lanes, {"main": [1], "ramp": [3], "left": [0]}


def build_intersection(rng) -> tuple:
    arm = 130.0
    J = JUNCTION
    h = LANE_W / 2

    def rot(pts, k):
        c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k]
        pts = np.asarray(pts, float)
        return np.stack([c * pts[:, 0] - s * pts[:, 1], s * pts[:, 0] + c * pts[:, 1]], -1)

    # arm k: 0=west, 1=south, 2=east, 3=north (rotating the west arm by k*90deg)
    lanes: dict = {}
    inc_id = {k: 100 + k for k in range(4)}
    out_id = {k: 200 + k for k in range(4)}
    for k in range(4):
        lanes[inc_id[k]] = rot(_line((-arm, -h), (-J, -h)), k)
        lanes[out_id[k]] = rot(_line((-J, h), (-arm, h)), k)
    succ: dict = {inc_id[k]: [] for k in range(4)}
    turns = {}
    cid = 300
    for k in range(4):
        p0 = lanes[inc_id[k]][-1]
        h0 = math.atan2(*(lanes[inc_id[k]][-1] - lanes[inc_id[k]][-2])[::-1])
        for dk, kind in ((2, "straight"), (1, "right"), (3, "left")):
            kk = (k + dk) % 4
            p1 = lanes[out_id[kk]][0]
            h1 = math.atan2(*(lanes[out_id[kk]][1] - lanes[out_id[kk]][0])[::-1])
            lanes[cid] = _bezier(p0, h0, p1, h1)
            succ[inc_id[k]].append(cid)
            succ[cid] = [out_id[kk]]
            turns[cid] = kind
            cid += 1
    out = [Lane(lid, pts, successors=tuple(succ.get(lid, ()))) for lid, pts in sorted(lanes.items())]
    green = int(rng.integers(0, 2))  # axis with moving traffic: 0 = west/east, 1 = south/north
    return out, {"turns": turns, "incoming": inc_id, "green": (green, green + 2),
                 "red": (1 - green, 3 - green)}


BUILDERS = {"straight": build_straight, "curve": build_curve,
            "merge": build_merge, "intersection": build_intersection}


def build_map(template: str, rng) -> tuple:
    if template not in BUILDERS:
        raise WorldError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    lanes, info = BUILDERS[template](rng)
    return MapModel(tuple(lanes), rasterize_lanes(lanes)), info


# --------------------------------------------------------------------------
# traffic policy


@dataclass
class TrafficAgent:
    id: int
    footprint: VehicleFootprint
    state: np.ndarray
    path: Path
    v_desired: float
    stop_s: Optional[float] = None
    lane_change_step: Optional[int] = None
    lane_change_path: Optional[Path] = None
    old_path: Optional[Path] = None
    old_path_until: int = -1
    trace: list = field(default_factory=list)

    @property
    def s(self) -> float:
        return self.path.project(self.state[:2])[0]


def _leader(agent: TrafficAgent, others, step: int) -> tuple:
    """Nearest leader as (gap, leader speed along path), or (None, 0)."""
    best_gap, best_v = None, 0.0
    paths = [agent.path]
    if agent.old_path is not None and step <= agent.old_path_until:
        paths.append(agent.old_path)
    for path in paths:
        s_i, _, _, _ = path.project(agent.state[:2])
        for o in others:
            if o.id == agent.id:
                continue
            s_j, lat_j, hd, _ = path.project(o.state[:2])
            half = (agent.footprint.length + o.footprint.length) / 2
            gap = None
            if abs(lat_j) < 2.2 and s_j > s_i:
                gap = s_j - s_i - half
                v_along = o.state[3] * math.cos(o.state[2] - hd)
            else:
                # converging routes: compare distances to the first shared lane
                for lid in path.lane_ids:
                    s_l = path.lane_start(lid)
                    o_l = o.path.lane_start(lid)
                    if s_l is None or o_l is None or s_l <= s_i:
                        continue
                    o_s = o.path.project(o.state[:2])[0]
                    d_i, d_j = s_l - s_i, o_l - o_s
                    if d_j <= 0:
                        break
                    if d_j < d_i or (d_j == d_i and o.id < agent.id):
                        gap = d_i - d_j - half
                        v_along = o.state[3]
                    break
            if gap is not None and (best_gap is None or gap < best_gap):
                best_gap, best_v = gap, v_along
    if agent.stop_s is not None:
        s_i = agent.path.project(agent.state[:2])[0]
        g = agent.stop_s - s_i - agent.footprint.length / 2
        if best_gap is None or g < best_gap:
            best_gap, best_v = g, 0.0
    return best_gap, best_v


def traffic_actions(agents: list, step: int, accel_max: float = 6.0) -> np.ndarray:
    acts = np.zeros((len(agents), 2))
    for i, ag in enumerate(agents):
        x, y, th, v = ag.state
        gap, v_lead = _leader(ag, agents, step)
        a = idm_accel(v, ag.v_desired, gap, v - v_lead)
        a = float(np.clip(a, -accel_max, 2.0))
        look = max(6.0, 1.2 * v)
        w = pure_pursuit_yaw_rate(x, y, th, v, ag.path, look)
        acts[i] = (a, w)
    return acts


def _maybe_change_lane(ag: TrafficAgent, agents: list, step: int) -> None:
    if ag.lane_change_step is None or step < ag.lane_change_step or ag.lane_change_path is None:
        return
    target = ag.lane_change_path
    s_t = target.project(ag.state[:2])[0]
    for o in agents:
        if o.id == ag.id:
            continue
        s_o, lat_o, _, _ = target.project(o.state[:2])
        if abs(lat_o) < 2.5 and -14.0 < s_o - s_t < 16.0:
            return  # gap not acceptable yet
    ag.old_path, ag.old_path_until = ag.path, step + 8
    ag.path = target
    ag.lane_change_step = None


def simulate_traffic(agents: list, steps: int, dt: float = TICK, start_step: int = 0,
                     lane_changes: bool = True) -> None:
    """Advance all agents synchronously, appending states to ``agent.trace``."""
    for ag in agents:
        if not ag.trace:
            ag.trace.append(ag.state.copy())
    for k in range(steps):
        step = start_step + k
        if lane_changes:
            for ag in agents:
                _maybe_change_lane(ag, agents, step)
        acts = traffic_actions(agents, step)
        states = torch.as_tensor(np.stack([ag.state for ag in agents]))
        nxt = bicycle_step_t(states, torch.as_tensor(acts), dt).numpy()
        for ag, s in zip(agents, nxt):
            ag.state = s
            ag.trace.append(s.copy())


# --------------------------------------------------------------------------
# spawning


def _pose_on(path: Path, s: float) -> tuple:
    p = path.point_at(s)
    return float(p[0]), float(p[1]), path.heading_at(s)


def _random_footprint(rng) -> VehicleFootprint:
    return VehicleFootprint(float(rng.uniform(4.2, 5.0)), float(rng.uniform(1.75, 2.0)))


def _make_agent(aid, map_, lanes, s, v, v_des, rng, choose=None, **kw) -> TrafficAgent:
    path = route_path(map_, lanes, 300.0, choose)
    x, y, h = _pose_on(path, s)
    return TrafficAgent(aid, _random_footprint(rng), np.array([x, y, h, v]), path, v_des, **kw)


def _random_choice(rng, allowed=None):
    def choose(map_, lane_id):
        succ = list(map_.lane(lane_id).successors)
        if allowed is not None:
            succ = [s for s in succ if s in allowed] or succ
        if not succ:
            return None
        return int(succ[int(rng.integers(len(succ)))])
    return choose


def _spawn(template: str, map_: MapModel, info: dict, rng) -> list:
    agents: list = []
    if template in ("straight", "curve"):
        main = info["main"]
        ego_lane = int(rng.choice(main))
        ego_s = float(rng.uniform(60, 110))
        v_e = float(rng.uniform(7, 11))
        agents.append(_make_agent(0, map_, [ego_lane], ego_s, v_e, float(rng.uniform(8, 12)), rng))
        adj = [l for l in (map_.lane(ego_lane).left, map_.lane(ego_lane).right) if l is not None]
        adv_lane = int(rng.choice(adj))
        adv_s = ego_s + float(rng.choice([-1, 1]) * rng.uniform(5, 14))
        agents.append(_make_agent(1, map_, [adv_lane], adv_s, v_e + float(rng.uniform(-1.5, 1.5)),
                                  float(rng.uniform(8, 12)), rng))
        all_lanes = [l.id for l in map_.lanes]
        for k in range(int(rng.integers(2, 5))):
            lane = int(rng.choice(all_lanes))
            s = float(rng.uniform(20, 200))
            agents.append(_make_agent(2 + k, map_, [lane], s, float(rng.uniform(5, 11)),
                                      float(rng.uniform(7, 12)), rng))
        for ag in agents[1:]:
            if rng.random() < 0.35:
                ln = map_.lane(ag.path.lane_ids[0])
                nb = [l for l in (ln.left, ln.right) if l is not None]
                if nb:
                    tgt = int(rng.choice(nb))
                    ag.lane_change_path = route_path(map_, [tgt], 300.0)
                    ag.lane_change_step = int(rng.integers(0, T_HIST + HORIZON - 4))
    elif template == "merge":
        d_e = float(rng.uniform(25, 55))
        v_e = float(rng.uniform(7, 11))
        agents.append(_make_agent(0, map_, [1], map_.lane(1).length - d_e, v_e,
                                  float(rng.uniform(8, 12)), rng))
        ramp_len = map_.lane(3).length
        d_a = d_e + float(rng.uniform(-10, 10))
        agents.append(_make_agent(1, map_, [3], max(ramp_len - d_a, 5.0), v_e + float(rng.uniform(-1, 1.5)),
                                  float(rng.uniform(8, 12)), rng))
        k = 2
        for lane, lo, hi in ((0, 40, 200), (1, 20, 100), (2, 10, 120), (3, 0, 40)):
            for _ in range(int(rng.integers(0, 2))):
                agents.append(_make_agent(k, map_, [lane], float(rng.uniform(lo, hi)),
                                          float(rng.uniform(5, 11)), float(rng.uniform(7, 12)), rng))
                k += 1
    elif template == "intersection":
        inc = info["incoming"]
        green, red = info["green"], info["red"]
        allowed = {cid for cid, kind in info["turns"].items() if kind != "left"}
        choose = _random_choice(rng, allowed)
        ego_arm = int(rng.choice(green))
        L_inc = map_.lane(inc[ego_arm]).length
        ego_s = L_inc - float(rng.uniform(22, 40))
        v_e = float(rng.uniform(6, 10))
        agents.append(_make_agent(0, map_, [inc[ego_arm]], ego_s, v_e, float(rng.uniform(8, 11)),
                                  rng, choose=choose))
        k = 1
        # queued cross traffic at the stop lines
        for arm in red:
            n_q = int(rng.integers(1, 3))
            for q in range(n_q):
                s = L_inc - 3.5 - q * 8.0 - float(rng.uniform(0, 1.0))
                ag = _make_agent(k, map_, [inc[arm]], s, 0.0, 8.0, rng, choose=choose)
                ag.stop_s = L_inc - 0.5
                agents.append(ag)
                k += 1
        opp_arm = green[1] if ego_arm == green[0] else green[0]
        for _ in range(int(rng.integers(1, 3))):
            agents.append(_make_agent(k, map_, [inc[opp_arm]], L_inc - float(rng.uniform(15, 70)),
                                      float(rng.uniform(5, 10)), float(rng.uniform(7, 11)), rng,
                                      choose=choose))
            k += 1
        if rng.random() < 0.6:
            agents.append(_make_agent(k, map_, [inc[ego_arm]], ego_s - float(rng.uniform(14, 30)),
                                      float(rng.uniform(6, 10)), float(rng.uniform(8, 11)), rng,
                                      choose=choose))
            k += 1
    else:
        raise WorldError(f"unknown template {template!r}")
    return agents


def _initially_separated(agents: list) -> bool:
    for i in range(len(agents)):
        for j in range(i + 1, len(agents)):
            a, b = agents[i], agents[j]
            if np.hypot(*(a.state[:2] - b.state[:2])) < 0.5 * (a.footprint.length + b.footprint.length) + 2.0:
                return False
    return True


def _valid(map_: MapModel, agents: list) -> bool:
    traces = [np.stack(a.trace) for a in agents]
    if not all(np.isfinite(t).all() for t in traces):
        return False
    for t in traces:
        if map_.is_offroad(t[:, :2]).any():
            return False
    for i in range(len(agents)):
        for j in range(i + 1, len(agents)):
            if rects_overlap(traces[i], traces[j], agents[i].footprint, agents[j].footprint).any():
                return False
    return True


def synth_one(rng, template: str, t_hist: int = T_HIST, horizon: int = HORIZON,
              tick: float = TICK, max_tries: int = 100) -> Scenario:
    from .sim import select_adversary

    for _ in range(max_tries):
        map_, info = build_map(template, rng)
        agents = _spawn(template, map_, info, rng)
        if not _initially_separated(agents):
            continue
        if any(map_.is_offroad(a.state[None, :2])[0] for a in agents):
            continue
        simulate_traffic(agents, t_hist + horizon, tick, lane_changes=template in ("straight", "curve"))
        if not _valid(map_, agents):
            continue
        records = []
        for a in agents:
            tr = np.stack(a.trace)
            records.append(AgentRecord(a.id, a.footprint,
                                       Trajectory.from_array(tr[: t_hist + 1], tick),
                                       Trajectory.from_array(tr[t_hist + 1:], tick)))
        ids = [r.id for r in records]
        # the adversary slot is filled in below; use any non-ego id as a placeholder
        scen = Scenario(map_, tuple(records), ego_id=0, adv_id=ids[1], horizon=horizon, tick=tick,
                        meta={"template": template})
        try:
            adv = select_adversary(scen)
        except WorldError:
            continue
        return scen.replace(adv_id=adv)
    raise WorldError(f"could not generate a valid {template} scenario in {max_tries} tries")


def synth_scenarios(seed: int, count: int, template: str, **kw) -> list:
    """``count`` scenarios of one template, deterministic for a fixed seed."""
    if template not in TEMPLATES:
        raise WorldError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    if count < 1:
        raise WorldError(f"count must be >= 1, got {count}")
    children = np.random.SeedSequence([int(seed), TEMPLATES.index(template)]).spawn(count)
    out = []
    for i, ss in enumerate(children):
        scen = synth_one(np.random.default_rng(ss), template, **kw)
        out.append(scen.replace(meta={"template": template, "seed": int(seed), "index": i}))
    return out


def synth_mixture(seed: int, counts: dict, **kw) -> list:
    out = []
    for template in TEMPLATES:
        n = counts.get(template, 0)
        if n:
            out.extend(synth_scenarios(seed, n, template, **kw))
    return out
