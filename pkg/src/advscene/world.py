"""Ground-truth kinematics, map geometry and collision primitives.

Everything in this module is an immutable value or a pure function.  The
scalar API (``bicycle_step``, ``veh_coll_pens``...) works on plain floats and
dataclasses; the ``*_t`` variants operate on batched torch tensors and are the
ones used inside differentiable code (decoder, guidance losses).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

TICK = 0.5
ACCEL_MAX = 6.0
YAW_RATE_MAX = 1.0
V_MAX = 20.0
D_BUFFER = 0.25
CELL_SIZE = 0.5
SHOULDER = 1.0
T_HIST = 4
HORIZON = 12


class WorldError(ValueError):
    """Raised on invalid kinematic input or malformed world objects."""


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]; values already in range are returned untouched."""
    if -math.pi < a <= math.pi:
        return a
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def normalize_angle_t(a: torch.Tensor) -> torch.Tensor:
    wrapped = torch.atan2(torch.sin(a), torch.cos(a))
    wrapped = torch.where(wrapped <= -math.pi, wrapped + 2.0 * math.pi, wrapped)
    return torch.where((a > -math.pi) & (a <= math.pi), a, wrapped)


def _check_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise WorldError(f"{name}: non-finite value {v!r}")


@dataclass(frozen=True)
class Limits:
    accel_max: float = ACCEL_MAX
    yaw_rate_max: float = YAW_RATE_MAX
    v_max: float = V_MAX


DEFAULT_LIMITS = Limits()


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    speed: float

    def __post_init__(self):
        _check_finite("AgentState", self.x, self.y, self.heading, self.speed)
        if self.speed < 0:
            raise WorldError(f"AgentState: negative speed {self.speed}")
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed], dtype=np.float64)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "AgentState":
        return cls(float(a[0]), float(a[1]), float(a[2]), max(float(a[3]), 0.0))


@dataclass(frozen=True)
class Action:
    accel: float
    yaw_rate: float

    def __post_init__(self):
        _check_finite("Action", self.accel, self.yaw_rate)

    def within(self, limits: Limits = DEFAULT_LIMITS, tol: float = 1e-9) -> bool:
        return (abs(self.accel) <= limits.accel_max + tol
                and abs(self.yaw_rate) <= limits.yaw_rate_max + tol)


@dataclass(frozen=True)
class Trajectory:
    states: tuple
    tick: float = TICK

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        if len(self.states) < 1:
            raise WorldError("Trajectory needs at least one state")
        if not self.tick > 0:
            raise WorldError(f"Trajectory tick must be positive, got {self.tick}")

    def __len__(self) -> int:
        return len(self.states)

    def as_array(self) -> np.ndarray:
        return np.stack([s.as_array() for s in self.states])

    @classmethod
    def from_array(cls, arr, tick: float = TICK) -> "Trajectory":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(tuple(AgentState.from_array(row) for row in arr), tick)


@dataclass(frozen=True)
class VehicleFootprint:
    length: float = 4.5
    width: float = 1.8

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise WorldError(f"footprint dimensions must be positive: {self}")

    @property
    def disc_radius(self) -> float:
        return 0.5 * math.hypot(self.length, self.width)


# --------------------------------------------------------------------------
# kinematics


def bicycle_step(state: AgentState, action: Action, dt: float,
                 limits: Limits = DEFAULT_LIMITS) -> AgentState:
    """Advance one tick: speed and heading first, then position (semi-implicit)."""
    _check_finite("bicycle_step", dt)
    if dt <= 0:
        raise WorldError(f"bicycle_step: dt must be positive, got {dt}")
    if not action.within(limits):
        raise WorldError(f"bicycle_step: action {action} outside bounds {limits}")
    v = min(max(state.speed + action.accel * dt, 0.0), limits.v_max)
    th = normalize_angle(state.heading + action.yaw_rate * dt)
    return AgentState(state.x + v * math.cos(th) * dt, state.y + v * math.sin(th) * dt, th, v)


def bicycle_step_t(state: torch.Tensor, action: torch.Tensor, dt: float,
                   v_max: float = V_MAX) -> torch.Tensor:
    """Tensor version of :func:`bicycle_step`; ``state[..., 4]``, ``action[..., 2]``."""
    v = torch.clamp(state[..., 3] + action[..., 0] * dt, 0.0, v_max)
    th = normalize_angle_t(state[..., 2] + action[..., 1] * dt)
    x = state[..., 0] + v * torch.cos(th) * dt
    y = state[..., 1] + v * torch.sin(th) * dt
    return torch.stack([x, y, th, v], dim=-1)


def rollout(start: AgentState, actions: Sequence[Action], dt: float = TICK,
            limits: Limits = DEFAULT_LIMITS) -> Trajectory:
    if len(actions) == 0:
        raise WorldError("rollout: actions must be non-empty")
    states = [start]
    for a in actions:
        states.append(bicycle_step(states[-1], a, dt, limits))
    return Trajectory(tuple(states), dt)


def actions_from_states(states: np.ndarray, dt: float) -> np.ndarray:
    """Recover (accel, yaw_rate) per step from a state array (n, 4) -> (n-1, 2)."""
    states = np.asarray(states, dtype=np.float64)
    acc = np.diff(states[:, 3]) / dt
    dth = np.diff(states[:, 2])
    dth = (dth + np.pi) % (2 * np.pi) - np.pi
    return np.stack([acc, dth / dt], axis=-1)


# --------------------------------------------------------------------------
# penalties


def _safe_norm_t(v: torch.Tensor) -> torch.Tensor:
    # the tiny offset keeps the gradient finite at coincident centers
    return torch.sqrt((v * v).sum(-1) + 1e-24)


def veh_coll_pens(pos_i, pos_j, fp_i: VehicleFootprint, fp_j: VehicleFootprint,
                  d_buffer: float = D_BUFFER) -> float:
    """Vehicle-vehicle proximity penalty in [0, 1]; 1 at coincident centers."""
    _check_finite("veh_coll_pens", *pos_i, *pos_j)
    d = math.hypot(pos_i[0] - pos_j[0], pos_i[1] - pos_j[1])
    p = fp_i.disc_radius + fp_j.disc_radius + d_buffer
    return 1.0 - d / p if d <= p else 0.0


def veh_coll_pens_t(pos_i: torch.Tensor, pos_j: torch.Tensor, p_ij) -> torch.Tensor:
    d = _safe_norm_t(pos_i - pos_j)
    return torch.relu(1.0 - d / p_ij)


def env_coll_pens(pos, footprint: VehicleFootprint, map_: "MapModel") -> float:
    """Map penalty in [0, 1] from the interpolated distance-to-offroad field."""
    _check_finite("env_coll_pens", *pos)
    if map_.distance_field is None:
        return 0.0
    p = footprint.disc_radius
    d = map_.distance_at(np.array([pos], dtype=np.float64))[0]
    return 1.0 - d / p if d <= p else 0.0


def env_coll_pens_t(pos: torch.Tensor, radius, map_: "MapModel") -> torch.Tensor:
    if map_.distance_field is None:
        return torch.zeros(pos.shape[:-1], dtype=pos.dtype)
    d = map_.distance_at_t(pos)
    return torch.relu(1.0 - d / radius)


# --------------------------------------------------------------------------
# oriented-rectangle collision checks


def _corners(states: np.ndarray, fp: VehicleFootprint) -> np.ndarray:
    c, s = np.cos(states[:, 2]), np.sin(states[:, 2])
    hl, hw = fp.length / 2, fp.width / 2
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (n,2,2)
    return states[:, None, :2] + np.einsum("nij,kj->nki", rot, local)


def rects_overlap(states_a: np.ndarray, states_b: np.ndarray,
                  fp_a: VehicleFootprint, fp_b: VehicleFootprint) -> np.ndarray:
    """Separating-axis test per row; touching rectangles count as overlapping."""
    states_a = np.atleast_2d(np.asarray(states_a, dtype=np.float64))
    states_b = np.atleast_2d(np.asarray(states_b, dtype=np.float64))
    ca, cb = _corners(states_a, fp_a), _corners(states_b, fp_b)
    axes = []
    for st in (states_a, states_b):
        c, s = np.cos(st[:, 2]), np.sin(st[:, 2])
        axes += [np.stack([c, s], -1), np.stack([-s, c], -1)]
    overlap = np.ones(len(states_a), dtype=bool)
    for ax in axes:
        pa = np.einsum("nki,ni->nk", ca, ax)
        pb = np.einsum("nki,ni->nk", cb, ax)
        sep = (pa.max(1) < pb.min(1)) | (pb.max(1) < pa.min(1))
        overlap &= ~sep
    return overlap


def detect_collision(traj_a: Trajectory, traj_b: Trajectory,
                     fp_a: VehicleFootprint, fp_b: VehicleFootprint) -> Optional[int]:
    """First step at which the two footprints overlap, or None."""
    if len(traj_a) != len(traj_b):
        raise WorldError(f"detect_collision: length mismatch {len(traj_a)} vs {len(traj_b)}")
    if abs(traj_a.tick - traj_b.tick) > 1e-12:
        raise WorldError("detect_collision: tick mismatch")
    hits = np.flatnonzero(rects_overlap(traj_a.as_array(), traj_b.as_array(), fp_a, fp_b))
    return int(hits[0]) if hits.size else None


# --------------------------------------------------------------------------
# map


@dataclass(frozen=True, eq=False)
class Lane:
    id: int
    points: np.ndarray
    width: float = 3.5
    successors: tuple = ()
    left: Optional[int] = None
    right: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise WorldError(f"lane {self.id}: need >= 2 points of shape (n, 2)")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "successors", tuple(int(s) for s in self.successors))

    @cached_property
    def headings(self) -> np.ndarray:
        d = np.diff(self.points, axis=0)
        h = np.arctan2(d[:, 1], d[:, 0])
        return np.append(h, h[-1])

    @cached_property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass(frozen=True, eq=False)
class DrivableGrid:
    """Boolean occupancy grid; ``mask[i, j]`` covers the cell whose center is
    ``origin + ((j + 0.5) * cell, (i + 0.5) * cell)``."""

    origin: tuple
    cell: float
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool).copy()
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self):
        return self.mask.shape

    def cell_index(self, pts: np.ndarray):
        pts = np.atleast_2d(pts)
        j = np.floor((pts[:, 0] - self.origin[0]) / self.cell).astype(np.int64)
        i = np.floor((pts[:, 1] - self.origin[1]) / self.cell).astype(np.int64)
        inside = (i >= 0) & (i < self.shape[0]) & (j >= 0) & (j < self.shape[1])
        return i, j, inside

    def is_drivable(self, pts: np.ndarray) -> np.ndarray:
        i, j, inside = self.cell_index(pts)
        out = np.zeros(len(i), dtype=bool)
        out[inside] = self.mask[i[inside], j[inside]]
        return out

    def cell_centers(self) -> np.ndarray:
        h, w = self.shape
        xs = self.origin[0] + (np.arange(w) + 0.5) * self.cell
        ys = self.origin[1] + (np.arange(h) + 0.5) * self.cell
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], -1)


@dataclass(frozen=True, eq=False)
class MapModel:
    lanes: tuple
    grid: DrivableGrid

    def __post_init__(self):
        object.__setattr__(self, "lanes", tuple(self.lanes))
        ids = [ln.id for ln in self.lanes]
        if len(set(ids)) != len(ids):
            raise WorldError("duplicate lane ids")
        known = set(ids)
        for ln in self.lanes:
            for ref in (*ln.successors, ln.left, ln.right):
                if ref is not None and ref not in known:
                    raise WorldError(f"lane {ln.id} references unknown lane {ref}")

    @cached_property
    def lane_by_id(self) -> dict:
        return {ln.id: ln for ln in self.lanes}

    def lane(self, lane_id: int) -> Lane:
        return self.lane_by_id[lane_id]

    @cached_property
    def distance_field(self) -> Optional[np.ndarray]:
        """Distance (m) from each cell center to the nearest non-drivable cell center."""
        if self.grid.mask.all():
            return None
        return ndimage.distance_transform_edt(self.grid.mask) * self.grid.cell

    @cached_property
    def _distance_field_t(self) -> torch.Tensor:
        return torch.as_tensor(self.distance_field, dtype=torch.float64)

    def _grid_coords(self, x, y):
        h, w = self.grid.shape
        gx = (x - self.grid.origin[0]) / self.grid.cell - 0.5
        gy = (y - self.grid.origin[1]) / self.grid.cell - 0.5
        inside = (gx >= -0.5) & (gx < w - 0.5) & (gy >= -0.5) & (gy < h - 0.5)
        return gx, gy, inside

    def distance_at(self, pts: np.ndarray) -> np.ndarray:
        """Bilinear distance-to-offroad; 0 outside the grid."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        field_ = self.distance_field
        if field_ is None:
            return np.full(len(pts), np.inf)
        h, w = field_.shape
        gx, gy, inside = self._grid_coords(pts[:, 0], pts[:, 1])
        gx = np.clip(gx, 0, w - 1)
        gy = np.clip(gy, 0, h - 1)
        j0 = np.minimum(np.floor(gx).astype(np.int64), w - 2)
        i0 = np.minimum(np.floor(gy).astype(np.int64), h - 2)
        fx, fy = gx - j0, gy - i0
        v = (field_[i0, j0] * (1 - fx) * (1 - fy) + field_[i0, j0 + 1] * fx * (1 - fy)
             + field_[i0 + 1, j0] * (1 - fx) * fy + field_[i0 + 1, j0 + 1] * fx * fy)
        return np.where(inside, v, 0.0)

    def distance_at_t(self, pos: torch.Tensor) -> torch.Tensor:
        field_ = self._distance_field_t.to(pos.dtype)
        h, w = field_.shape
        gx, gy, inside = self._grid_coords(pos[..., 0], pos[..., 1])
        gx = gx.clamp(0, w - 1)
        gy = gy.clamp(0, h - 1)
        j0 = torch.floor(gx.detach()).long().clamp(max=w - 2)
        i0 = torch.floor(gy.detach()).long().clamp(max=h - 2)
        fx, fy = gx - j0, gy - i0
        v = (field_[i0, j0] * (1 - fx) * (1 - fy) + field_[i0, j0 + 1] * fx * (1 - fy)
             + field_[i0 + 1, j0] * (1 - fx) * fy + field_[i0 + 1, j0 + 1] * fx * fy)
        return torch.where(inside, v, torch.zeros_like(v))

    def is_offroad(self, pts: np.ndarray) -> np.ndarray:
        return ~self.grid.is_drivable(np.atleast_2d(pts))

    def project(self, x: float, y: float, heading: Optional[float] = None,
                max_heading_error: float = math.pi / 2):
        """Nearest lane to a point, optionally restricted to heading-compatible lanes.

        Returns ``(lane_id, arc_s, lateral, lane_heading, distance)`` or None.
        """
        best = None
        p = np.array([x, y])
        for ln in self.lanes:
            s, lat, hd, dist = project_polyline(ln.points, p)
            if heading is not None:
                err = abs(normalize_angle(heading - hd))
                if err > max_heading_error:
                    continue
                score = dist + 2.0 * err
            else:
                score = dist
            if best is None or score < best[0] - 1e-12:
                best = (score, ln.id, s, lat, hd, dist)
        if best is None:
            return None
        return best[1:]


def project_polyline(points: np.ndarray, p: np.ndarray):
    """Project a point onto a polyline -> (arc s, signed lateral, heading, distance)."""
    a, b = points[:-1], points[1:]
    ab = b - a
    seg_len2 = (ab * ab).sum(1)
    t = np.clip(((p - a) * ab).sum(1) / np.maximum(seg_len2, 1e-12), 0.0, 1.0)
    proj = a + ab * t[:, None]
    d2 = ((p - proj) ** 2).sum(1)
    k = int(np.argmin(d2))
    seg_len = np.sqrt(seg_len2)
    s = float(seg_len[:k].sum() + t[k] * seg_len[k])
    hd = math.atan2(ab[k, 1], ab[k, 0])
    rel = p - proj[k]
    lat = float(-math.sin(hd) * rel[0] + math.cos(hd) * rel[1])
    return s, lat, hd, math.sqrt(float(d2[k]))


def rasterize_lanes(lanes: Iterable[Lane], cell: float = CELL_SIZE,
                    shoulder: float = SHOULDER, margin: float = 10.0) -> DrivableGrid:
    """Drivable cells are those whose center lies within width/2 + shoulder of a centerline."""
    lanes = list(lanes)
    dense, radius = [], []
    for ln in lanes:
        pts = resample_polyline(ln.points, 0.25)
        dense.append(pts)
        radius.append(np.full(len(pts), ln.width / 2 + shoulder))
    dense_a = np.concatenate(dense)
    radius_a = np.concatenate(radius)
    lo = np.floor((dense_a.min(0) - margin) / cell) * cell
    hi = np.ceil((dense_a.max(0) + margin) / cell) * cell
    w = int(round((hi[0] - lo[0]) / cell))
    h = int(round((hi[1] - lo[1]) / cell))
    grid = DrivableGrid((lo[0], lo[1]), cell, np.zeros((h, w), dtype=bool))
    centers = grid.cell_centers().reshape(-1, 2)
    tree = cKDTree(dense_a)
    rmax = float(radius_a.max())
    dist, idx = tree.query(centers, distance_upper_bound=rmax + cell)
    ok = np.isfinite(dist)
    mask = np.zeros(len(centers), dtype=bool)
    mask[ok] = dist[ok] <= radius_a[idx[ok]]
    return DrivableGrid(grid.origin, cell, mask.reshape(h, w))


def resample_polyline(points: np.ndarray, spacing: float) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(int(math.ceil(s[-1] / spacing)), 1)
    ss = np.linspace(0.0, s[-1], n + 1)
    return np.stack([np.interp(ss, s, points[:, 0]), np.interp(ss, s, points[:, 1])], -1)


# --------------------------------------------------------------------------
# scenario


@dataclass(frozen=True, eq=False)
class AgentRecord:
    id: int
    footprint: VehicleFootprint
    past: Trajectory
    future: Optional[Trajectory] = None

    @property
    def current(self) -> AgentState:
        return self.past.states[-1]


@dataclass(frozen=True, eq=False)
class Scenario:
    map: MapModel
    agents: tuple
    ego_id: int
    adv_id: int
    horizon: int = HORIZON
    tick: float = TICK
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        ids = [a.id for a in self.agents]
        if len(ids) < 2:
            raise WorldError("scenario needs at least two agents")
        if len(set(ids)) != len(ids):
            raise WorldError("duplicate agent ids")
        if self.ego_id == self.adv_id:
            raise WorldError("ego_id and adv_id must differ")
        if self.ego_id not in ids or self.adv_id not in ids:
            raise WorldError("ego_id/adv_id must reference scenario agents")
        n = len(self.agents[0].past)
        for a in self.agents:
            if len(a.past) != n:
                raise WorldError("all pasts must share a length")
            if abs(a.past.tick - self.tick) > 1e-12:
                raise WorldError("all pasts must share the scenario tick")
            if a.future is not None and len(a.future) != self.horizon:
                raise WorldError(f"agent {a.id}: future length {len(a.future)} != horizon")
        if self.horizon < 1:
            raise WorldError("horizon must be >= 1")

    @property
    def agent_ids(self) -> list:
        return [a.id for a in self.agents]

    def agent(self, agent_id: int) -> AgentRecord:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)

    @property
    def non_ego(self) -> list:
        return [a for a in self.agents if a.id != self.ego_id]

    def replace(self, **kw) -> "Scenario":
        fields_ = dict(map=self.map, agents=self.agents, ego_id=self.ego_id, adv_id=self.adv_id,
                       horizon=self.horizon, tick=self.tick, meta=dict(self.meta))
        fields_.update(kw)
        return Scenario(**fields_)
