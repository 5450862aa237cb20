"""Lane paths, IDM car-following and pure-pursuit steering.

Shared by the ego planner and the synthetic background-traffic policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .world import MapModel, normalize_angle, project_polyline, DEFAULT_LIMITS


class Path:
    """Polyline with cumulative arc length, built from a lane route."""

    def __init__(self, points: np.ndarray, lane_ids: tuple = (), lane_starts: tuple = ()):
        pts = np.asarray(points, dtype=np.float64)
        keep = np.ones(len(pts), dtype=bool)
        keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-9
        self.points = pts[keep]
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        self.lane_ids = tuple(lane_ids)
        self.lane_starts = tuple(lane_starts)

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def project(self, p) -> tuple:
        """(arc s, signed lateral offset, path heading, distance)."""
        return project_polyline(self.points, np.asarray(p, dtype=np.float64))

    def point_at(self, s: float) -> np.ndarray:
        if s >= self.s[-1]:
            # extrapolate straight beyond the end
            d = self.points[-1] - self.points[-2]
            d = d / np.linalg.norm(d)
            return self.points[-1] + d * (s - self.s[-1])
        return np.array([np.interp(s, self.s, self.points[:, 0]),
                         np.interp(s, self.s, self.points[:, 1])])

    def heading_at(self, s: float) -> float:
        k = int(np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.points) - 2))
        d = self.points[k + 1] - self.points[k]
        return math.atan2(d[1], d[0])

    def lane_start(self, lane_id: int) -> Optional[float]:
        for lid, s0 in zip(self.lane_ids, self.lane_starts):
            if lid == lane_id:
                return s0
        return None


def straightest_successor(map_: MapModel, lane_id: int) -> Optional[int]:
    lane = map_.lane(lane_id)
    if not lane.successors:
        return None
    end_h = lane.headings[-1]
    return min(lane.successors,
               key=lambda sid: (round(abs(normalize_angle(map_.lane(sid).headings[0] - end_h)), 9), sid))


def route_path(map_: MapModel, lanes: list, min_length: float = 250.0,
               choose=None) -> Path:
    """Concatenate a lane route, extending via successors until ``min_length`` is covered.

    ``choose(map, lane_id) -> successor`` decides at branches (default: straightest).
    """
    choose = choose or straightest_successor
    lanes = list(lanes)
    total = sum(map_.lane(l).length for l in lanes)
    while total < min_length:
        nxt = choose(map_, lanes[-1])
        if nxt is None or nxt in lanes:
            break
        lanes.append(nxt)
        total += map_.lane(nxt).length
    pts, starts, s = [], [], 0.0
    for lid in lanes:
        lp = map_.lane(lid).points
        if pts and np.linalg.norm(pts[-1][-1] - lp[0]) < 1e-6:
            lp = lp[1:]
        starts.append(s)
        pts.append(lp)
        s += map_.lane(lid).length
    return Path(np.concatenate(pts), tuple(lanes), tuple(starts))


def idm_accel(v: float, v_desired: float, gap: Optional[float], dv: float,
              a_max: float = 2.0, b_comf: float = 3.0, headway: float = 1.5,
              min_gap: float = 2.0, delta: float = 4.0) -> float:
    """Intelligent Driver Model acceleration; ``dv`` is the approach rate (v - v_leader)."""
    free = 1.0 - (max(v, 0.0) / max(v_desired, 0.1)) ** delta
    if gap is None:
        return a_max * free
    s_star = min_gap + max(0.0, v * headway + v * dv / (2.0 * math.sqrt(a_max * b_comf)))
    return a_max * (free - (s_star / max(gap, 0.1)) ** 2)


def pure_pursuit_yaw_rate(x: float, y: float, heading: float, speed: float, path: Path,
                          lookahead: float, lateral_target: float = 0.0,
                          yaw_rate_max: float = DEFAULT_LIMITS.yaw_rate_max) -> float:
    s, _, _, _ = path.project((x, y))
    target = path.point_at(s + lookahead)
    if lateral_target:
        h = path.heading_at(s + lookahead)
        target = target + lateral_target * np.array([-math.sin(h), math.cos(h)])
    dx, dy = target[0] - x, target[1] - y
    alpha = normalize_angle(math.atan2(dy, dx) - heading)
    ld = max(math.hypot(dx, dy), 1e-6)
    kappa = 2.0 * math.sin(alpha) / ld
    return float(np.clip(speed * kappa, -yaw_rate_max, yaw_rate_max))


@dataclass(frozen=True)
class Leader:
    gap: float
    speed_along: float
    agent_id: int
