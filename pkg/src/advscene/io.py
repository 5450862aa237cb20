"""File formats: ``scenario.v1`` JSON and the binary parameter blob container."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path as FsPath
from typing import Union

import numpy as np

from .world import (
    AgentRecord, DrivableGrid, Lane, MapModel, Scenario, Trajectory, VehicleFootprint,
    WorldError,
)

SCENARIO_SCHEMA = "scenario.v1"
BLOB_MAGIC = b"ADVSBLOB"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def rle_encode(mask: np.ndarray) -> list:
    """Run lengths over the row-major flattening, starting with a run of False."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: list, shape) -> np.ndarray:
    vals = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(vals, runs)
    if flat.size != shape[0] * shape[1]:
        raise WorldError(f"RLE grid size {flat.size} does not match shape {shape}")
    return flat.reshape(shape)


def _traj_json(tr: Trajectory) -> list:
    return [{"x_m": s.x, "y_m": s.y, "heading_rad": s.heading, "speed_mps": s.speed}
            for s in tr.states]


def _traj_from(rows: list, tick: float) -> Trajectory:
    return Trajectory.from_array([[r["x_m"], r["y_m"], r["heading_rad"], r["speed_mps"]] for r in rows], tick)


def scenario_to_dict(s: Scenario) -> dict:
    g = s.map.grid
    return {
        "schema": SCENARIO_SCHEMA,
        "tick_s": s.tick,
        "horizon_steps": s.horizon,
        "ego_id": s.ego_id,
        "adv_id": s.adv_id,
        "meta": s.meta,
        "map": {
            "lanes": [{
                "id": ln.id, "width_m": ln.width,
                "points_m": ln.points.tolist(),
                "successors": list(ln.successors), "left": ln.left, "right": ln.right,
            } for ln in s.map.lanes],
            "drivable_grid": {
                "origin_m": list(g.origin), "cell_m": g.cell,
                "shape": list(g.shape), "rle": rle_encode(g.mask),
            },
        },
        "agents": [{
            "id": a.id,
            "length_m": a.footprint.length, "width_m": a.footprint.width,
            "past": _traj_json(a.past),
            "future": _traj_json(a.future) if a.future is not None else None,
        } for a in s.agents],
    }


def scenario_from_dict(d: dict) -> Scenario:
    if d.get("schema") != SCENARIO_SCHEMA:
        raise WorldError(f"unsupported scenario schema {d.get('schema')!r}")
    tick = float(d["tick_s"])
    m = d["map"]
    lanes = [Lane(l["id"], np.array(l["points_m"]), l["width_m"], tuple(l["successors"]),
                  l["left"], l["right"]) for l in m["lanes"]]
    g = m["drivable_grid"]
    grid = DrivableGrid(tuple(g["origin_m"]), g["cell_m"], rle_decode(g["rle"], g["shape"]))
    agents = [AgentRecord(a["id"], VehicleFootprint(a["length_m"], a["width_m"]),
                          _traj_from(a["past"], tick),
                          _traj_from(a["future"], tick) if a["future"] is not None else None)
              for a in d["agents"]]
    return Scenario(MapModel(tuple(lanes), grid), tuple(agents), d["ego_id"], d["adv_id"],
                    d["horizon_steps"], tick, d.get("meta", {}))


def dumps_scenario(s: Scenario) -> str:
    return canonical_json(scenario_to_dict(s))


def save_scenario(s: Scenario, path) -> None:
    FsPath(path).write_text(dumps_scenario(s))


def load_scenario(path) -> Scenario:
    return scenario_from_dict(json.loads(FsPath(path).read_text()))


# --------------------------------------------------------------------------
# blobs: MAGIC | u32 header length | JSON header | raw little-endian float64 tensors


def write_blob(path, schema: str, tensors: dict, header: dict) -> str:
    """Write tensors (name -> array) with a JSON header; returns the sha256 of the bytes."""
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = dict(header)
    head["schema"] = schema
    head["tensors"] = entries
    hbytes = canonical_json(head).encode()
    data = BLOB_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)
    FsPath(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_blob(path, schema: Union[str, None] = None) -> tuple:
    data = FsPath(path).read_bytes()
    if not data.startswith(BLOB_MAGIC):
        raise WorldError(f"{path}: not a parameter blob")
    n = struct.unpack("<I", data[len(BLOB_MAGIC):len(BLOB_MAGIC) + 4])[0]
    start = len(BLOB_MAGIC) + 4
    header = json.loads(data[start:start + n])
    if schema is not None and header.get("schema") != schema:
        raise WorldError(f"{path}: expected schema {schema!r}, found {header.get('schema')!r}")
    body = data[start + n:]
    tensors = {}
    for e in header["tensors"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).copy()
    return header, tensors


def file_sha256(path) -> str:
    return hashlib.sha256(FsPath(path).read_bytes()).hexdigest()
