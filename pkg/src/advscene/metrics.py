"""Evaluation metrics over rollout records, and the report writer."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .io import canonical_json
from .sim import RolloutRecord
from .world import WorldError, normalize_angle

METRICS_SCHEMA = "metrics.v1"
TTC_CAP = 10.0
D_BUFFER = 0.25

# fixed histogram edges: (name, unit, lo, hi, width)
HISTOGRAMS = (
    ("adv_speed", "m/s", 0.0, 20.0, 1.0),
    ("adv_acc_lon", "m/s^2", -6.0, 6.0, 0.5),
    ("adv_acc_lat", "m/s^2", -10.0, 10.0, 1.0),
    ("adv_ego_ttc", "s", 0.0, TTC_CAP, 0.5),
)

CSV_COLUMNS = ("metric", "value")
HIST_COLUMNS = ("bin_lo", "bin_hi", "count")


@dataclass(frozen=True)
class MetricSet:
    scenarios: int
    adv_ego_coll_pct: float
    adv_other_coll_pct: float
    other_ego_coll_pct: float
    other_other_coll_pct: float
    adv_offroad_pct: float
    other_offroad_pct: float
    ego_offroad_pct: float
    adv_acc_lon_mean: float      # mean |longitudinal accel| of the adversary
    adv_acc_lat_mean: float      # mean |lateral accel| of the adversary
    adv_acc_mean: float          # mean accel magnitude sqrt(lon^2 + lat^2)
    ttc_mean_s: float
    sim_time_mean_s: float
    other_agent_count: int
    adv_step_count: int

    def __post_init__(self):
        for name in ("adv_ego_coll_pct", "adv_other_coll_pct", "other_ego_coll_pct",
                     "other_other_coll_pct", "adv_offroad_pct", "other_offroad_pct",
                     "ego_offroad_pct"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise WorldError(f"{name} = {v} is not a percentage")

    def deterministic(self) -> dict:
        """All fields except wall-clock time."""
        d = asdict(self)
        d.pop("sim_time_mean_s")
        return d


def ttc_series(a: np.ndarray, b: np.ndarray, r_a: float, r_b: float,
               cap: float = TTC_CAP) -> np.ndarray:
    """Constant-velocity time until the discs of two agents touch, per step, capped.

    States are (T, 4) rows of x, y, heading, speed. Overlapping discs give 0;
    non-closing pairs give ``cap``.
    """
    dp = b[:, :2] - a[:, :2]
    va = a[:, 3:4] * np.stack([np.cos(a[:, 2]), np.sin(a[:, 2])], -1)
    vb = b[:, 3:4] * np.stack([np.cos(b[:, 2]), np.sin(b[:, 2])], -1)
    dv = vb - va
    # smallest t >= 0 with |dp + t dv| = r_a + r_b + buffer
    R = r_a + r_b + D_BUFFER
    gap = np.linalg.norm(dp, axis=-1) - R
    qa = (dv ** 2).sum(-1)
    qb = 2 * (dp * dv).sum(-1)
    qc = (dp ** 2).sum(-1) - R ** 2
    disc = qb ** 2 - 4 * qa * qc
    out = np.full(len(a), cap)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-qb - np.sqrt(np.maximum(disc, 0.0))) / (2 * qa)
    hit = (qa > 0) & (disc >= 0) & (t >= 0)
    out[hit] = np.minimum(t[hit], cap)
    out[gap <= 0] = 0.0
    return out


def adv_accels(states: np.ndarray, tick: float) -> tuple:
    """Longitudinal and lateral accelerations implied by consecutive executed states."""
    if len(states) < 2:
        return np.zeros(0), np.zeros(0)
    lon = np.diff(states[:, 3]) / tick
    yaw = np.array([normalize_angle(d) for d in np.diff(states[:, 2])]) / tick
    lat = states[1:, 3] * yaw
    return lon, lat


def _radius(fp) -> float:
    return 0.5 * math.hypot(*fp)


def _pct(n: int, d: int) -> float:
    return 100.0 * n / d if d else 0.0


def _distributions(records: Sequence[RolloutRecord]) -> dict:
    speed, lon, lat, ttc = [], [], [], []
    for r in records:
        adv, ego = r.states[r.adv_id], r.states[r.ego_id]
        speed.append(adv[1:, 3])
        lo, la = adv_accels(adv, r.tick)
        lon.append(lo)
        lat.append(la)
        ttc.append(ttc_series(adv, ego, _radius(r.footprints[r.adv_id]),
                              _radius(r.footprints[r.ego_id])))
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
    return {"adv_speed": cat(speed), "adv_acc_lon": cat(lon), "adv_acc_lat": cat(lat),
            "adv_ego_ttc": cat(ttc), "ttc_per_record": [float(t.mean()) for t in ttc]}


def compute_metrics(records: Sequence[RolloutRecord]) -> MetricSet:
    records = list(records)
    if not records:
        raise WorldError("compute_metrics: no records")
    n = len(records)
    counts = dict(ae=0, ao=0, oe=0, oo=0, adv_off=0, ego_off=0, other_off=0, others=0)
    for r in records:
        e, a = r.ego_id, r.adv_id
        classes = set()
        for x, y, _ in r.collisions:
            pair = {x, y}
            if pair == {a, e}:
                classes.add("ae")
            elif a in pair:
                classes.add("ao")
            elif e in pair:
                classes.add("oe")
            else:
                classes.add("oo")
        for c in classes:
            counts[c] += 1
        off = {x for x, _ in r.offroad}
        counts["adv_off"] += a in off
        counts["ego_off"] += e in off
        others = [x for x in r.agent_ids if x not in (a, e)]
        counts["others"] += len(others)
        counts["other_off"] += sum(x in off for x in others)
    dist = _distributions(records)
    lon, lat = dist["adv_acc_lon"], dist["adv_acc_lat"]
    mean = lambda x: float(np.mean(x)) if len(x) else 0.0
    return MetricSet(
        scenarios=n,
        adv_ego_coll_pct=_pct(counts["ae"], n), adv_other_coll_pct=_pct(counts["ao"], n),
        other_ego_coll_pct=_pct(counts["oe"], n), other_other_coll_pct=_pct(counts["oo"], n),
        adv_offroad_pct=_pct(counts["adv_off"], n),
        other_offroad_pct=_pct(counts["other_off"], counts["others"]),
        ego_offroad_pct=_pct(counts["ego_off"], n),
        adv_acc_lon_mean=mean(np.abs(lon)), adv_acc_lat_mean=mean(np.abs(lat)),
        adv_acc_mean=mean(np.hypot(lon, lat)),
        ttc_mean_s=mean(dist["ttc_per_record"]),
        sim_time_mean_s=float(np.mean([r.timings.get("total", 0.0) for r in records])),
        other_agent_count=counts["others"], adv_step_count=len(lon))


def histogram(values: np.ndarray, lo: float, hi: float, width: float) -> tuple:
    """Counts over fixed bins; values outside [lo, hi] land in the edge bins."""
    edges = np.round(np.arange(lo, hi + width / 2, width), 10)
    v = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
    counts, _ = np.histogram(v, bins=edges)
    return edges, counts


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def histogram_svg(title: str, unit: str, edges: np.ndarray, counts: np.ndarray) -> str:
    W, H, pad = 480, 240, 36
    top = max(int(counts.max()) if counts.size else 0, 1)
    bw = (W - 2 * pad) / max(len(counts), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
             f'viewBox="0 0 {W} {H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" '
             f'font-size="13">{title}</text>']
    for i, c in enumerate(counts):
        h = (H - 2 * pad) * int(c) / top
        parts.append(f'<rect x="{pad + i * bw:.2f}" y="{H - pad - h:.2f}" width="{bw * 0.9:.2f}" '
                     f'height="{h:.2f}" fill="#4a7bb7"/>')
    parts.append(f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>')
    for x, label in ((pad, edges[0]), (W - pad, edges[-1])):
        parts.append(f'<text x="{x}" y="{H - pad + 16}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{label:g} {unit}</text>')
    parts.append(f'<text x="{pad - 4}" y="{pad}" text-anchor="end" font-family="sans-serif" '
                 f'font-size="11">{top}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def emit_report(metrics: MetricSet, records: Sequence[RolloutRecord], out_dir,
                config_hash: str = "", seed: int = 0) -> list:
    """Write metrics.json/csv, histogram CSVs and SVGs, and timing.json; returns paths.

    Every file except timing.json is a pure function of the records' deterministic
    content, so identical runs produce byte-identical reports.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {out}: {e}") from e
    det = metrics.deterministic()
    rounded = {k: (round(v, 2) if k.endswith("_pct") else v) for k, v in det.items()}
    written = []
    doc = {"schema": METRICS_SCHEMA, "config_hash": config_hash, "seed": seed, "metrics": rounded}
    p = out / "metrics.json"
    _write(p, canonical_json(doc) + "\n")
    written.append(p)
    rows = [(k, f"{v:.2f}" if k.endswith("_pct") else _fmt(v)) for k, v in rounded.items()]
    p = out / "metrics.csv"
    _write(p, _csv_text(CSV_COLUMNS, rows))
    written.append(p)
    dist = _distributions(records)
    for name, unit, lo, hi, width in HISTOGRAMS:
        edges, counts = histogram(dist[name], lo, hi, width)
        p = out / f"hist_{name}.csv"
        _write(p, _csv_text(HIST_COLUMNS, [(f"{edges[i]:g}", f"{edges[i + 1]:g}", int(c))
                                           for i, c in enumerate(counts)]))
        written.append(p)
        p = out / f"hist_{name}.svg"
        _write(p, histogram_svg(name, unit, edges, counts))
        written.append(p)
    p = out / "timing.json"
    _write(p, canonical_json({"schema": METRICS_SCHEMA, "config_hash": config_hash, "seed": seed,
                              "sim_time_mean_s": metrics.sim_time_mean_s}) + "\n")
    written.append(p)
    return written
