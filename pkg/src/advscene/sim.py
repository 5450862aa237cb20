"""Closed-loop rollouts: adversary selection, generation, ego planning and stepping."""

from __future__ import annotations

import json
import math
import multiprocessing
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path as Path_
from typing import Optional, Sequence

import numpy as np
import torch

from .codec import ModelError, SceneCodec, encode_prior, load_codec
from .diffusion import (
    Denoiser, GuidedSampleConfig, NoiseSchedule, feasible, guided_sample, load_denoiser, select_best,
)
from .dsl import GuidanceProgram
from .guidance import program_objective
from .io import canonical_json
from .planner import Neighbor, PlannerConfig, plan
from .world import (
    AgentRecord, Scenario, Trajectory, WorldError, normalize_angle, rects_overlap,
)

ROLLOUT_SCHEMA = "rollout.v1"


def _on_lane_graph(scenario: Scenario, state) -> bool:
    proj = scenario.map.project(state.x, state.y, state.heading, max_heading_error=math.pi / 3)
    if proj is None:
        return False
    lane_id, _, lateral, _, _ = proj
    return abs(lateral) <= scenario.map.lane(lane_id).width / 2 + 1.0


def select_adversary(scenario: Scenario) -> int:
    """Nearest feasible non-ego agent at the initial state (ties -> lowest id).

    Feasible: on the lane graph, and heading parallel to the ego's road or
    pointing toward the ego.
    """
    ego = scenario.agent(scenario.ego_id).current
    proj = scenario.map.project(ego.x, ego.y, ego.heading)
    ego_road = proj[3] if proj is not None else ego.heading
    cands = []
    for a in scenario.non_ego:
        s = a.current
        cands.append((math.hypot(s.x - ego.x, s.y - ego.y), a.id, s))
    if not cands:
        raise WorldError("select_adversary: no non-ego agents")
    cands.sort(key=lambda c: (c[0], c[1]))
    for _, aid, s in cands:
        if not _on_lane_graph(scenario, s):
            continue
        parallel = abs(math.sin(normalize_angle(s.heading - ego_road))) <= math.sin(math.radians(30))
        toward = (ego.x - s.x) * math.cos(s.heading) + (ego.y - s.y) * math.sin(s.heading) > 0
        if parallel or toward:
            return aid
    raise WorldError("select_adversary: no feasible candidate")


# --------------------------------------------------------------------------
# models and generators


@dataclass
class Models:
    """Trained codec + denoiser with the sampling schedule."""
    codec: SceneCodec
    net: Denoiser
    schedule: NoiseSchedule

    @classmethod
    def load(cls, codec_path, denoiser_path) -> "Models":
        codec = load_codec(codec_path)
        net, schedule = load_denoiser(denoiser_path)
        return cls(codec, net, schedule)

    def with_steps(self, steps: Optional[int]) -> "Models":
        if steps is None or steps == self.schedule.K:
            return self
        if not self.schedule.continuous:
            raise WorldError("changing the step count needs a continuous-time schedule")
        return Models(self.codec, self.net, NoiseSchedule(steps, self.schedule.kind,
                                                          self.schedule.beta))


@dataclass
class Generation:
    states: np.ndarray            # (N, T+1, 4) world states of the non-ego agents
    agent_ids: tuple
    loss: Optional[float] = None
    feasible: bool = True
    warning: Optional[str] = None


class DiffusionGenerator:
    """Guided latent-diffusion futures for every non-ego agent."""

    def __init__(self, models: Models, program: Optional[GuidanceProgram] = None,
                 sample: GuidedSampleConfig = GuidedSampleConfig()):
        self.models = models
        self.program = program
        self.sample = sample

    def __call__(self, scenario: Scenario, ego_plan: np.ndarray, replan: int,
                 seed: int) -> Generation:
        m = self.models
        cond = encode_prior(scenario, m.codec)
        objective = (program_objective(self.program, scenario, cond, ego_plan)
                     if self.program is not None else None)
        cfg = replace(self.sample, seed=seed)
        res = guided_sample(cond, objective, m.net, m.codec, m.schedule, cfg)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            sel = select_best(res.losses.numpy(), feasible(res.actions, res.states).numpy(),
                              res.failed.numpy())
        loss = float(res.losses[sel.index]) if objective is not None else None
        return Generation(res.states[sel.index].detach().numpy(), tuple(cond.agent_ids), loss,
                          sel.feasible, sel.warning)


class ReplayGenerator:
    """Non-reactive log replay of the recorded futures, then constant velocity."""

    def __init__(self, source: Scenario):
        self.source = source

    def __call__(self, scenario: Scenario, ego_plan: np.ndarray, replan: int,
                 seed: int) -> Generation:
        step = scenario.meta.get("sim_step", 0)
        T = scenario.horizon
        out, ids = [], []
        for a in scenario.non_ego:
            rec = self.source.agent(a.id)
            full = np.concatenate([rec.past.as_array(), rec.future.as_array()])
            base = len(rec.past) - 1 + step
            rows = [full[min(base + k, len(full) - 1)].copy() for k in range(T + 1)]
            rows[0] = a.current.as_array()
            for k in range(1, T + 1):
                if base + k >= len(full):
                    prev = rows[k - 1]
                    rows[k] = prev + scenario.tick * np.array(
                        [prev[3] * math.cos(prev[2]), prev[3] * math.sin(prev[2]), 0.0, 0.0])
            out.append(np.stack(rows))
            ids.append(a.id)
        return Generation(np.stack(out), tuple(ids))


# --------------------------------------------------------------------------
# rollout


@dataclass(frozen=True)
class SimConfig:
    steps: Optional[int] = None        # executed steps; default = scenario horizon
    replan_period: int = 2
    seed: int = 0
    planner: PlannerConfig = PlannerConfig()
    stop_on_adv_ego_collision: bool = True

    def __post_init__(self):
        if self.replan_period < 1:
            raise WorldError("replan_period must be >= 1")
        if self.steps is not None and self.steps < 1:
            raise WorldError("steps must be >= 1")


TERMINATIONS = ("collision", "horizon", "failure")


@dataclass
class RolloutRecord:
    scenario: dict                 # identifying metadata
    agent_ids: list
    ego_id: int
    adv_id: int
    tick: float
    footprints: dict               # id -> (length, width)
    states: dict                   # id -> (steps+1, 4) executed states incl. the start
    guidance_losses: list          # one per replan (None when unguided)
    collisions: list               # (a, b, step) with a < b, first contact per pair
    offroad: list                  # (agent, step), first offroad step per agent
    termination: str
    timings: dict                  # seconds: total, planning, generation
    seed: int = 0
    config_hash: str = ""
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.termination not in TERMINATIONS:
            raise WorldError(f"unknown termination {self.termination!r}")
        ids = set(self.agent_ids)
        n = len(next(iter(self.states.values()))) if self.states else 0
        for a, b, t in self.collisions:
            if a not in ids or b not in ids or not 0 <= t < n:
                raise WorldError(f"collision event ({a}, {b}, {t}) is out of range")
        for a, t in self.offroad:
            if a not in ids or not 0 <= t < n:
                raise WorldError(f"offroad event ({a}, {t}) is out of range")
        if any(v < 0 for v in self.timings.values()):
            raise WorldError("timings must be non-negative")

    @property
    def steps(self) -> int:
        return len(self.states[self.ego_id]) - 1

    def pair_collided(self, a: int, b: int) -> bool:
        lo, hi = min(a, b), max(a, b)
        return any(x == lo and y == hi for x, y, _ in self.collisions)

    def content(self) -> dict:
        """Everything except wall-clock timings (the deterministic part)."""
        d = self.to_dict()
        d.pop("timings")
        return d

    def to_dict(self) -> dict:
        return {
            "schema": ROLLOUT_SCHEMA, "scenario": self.scenario, "agent_ids": list(self.agent_ids),
            "ego_id": self.ego_id, "adv_id": self.adv_id, "tick": self.tick,
            "footprints": {str(k): list(v) for k, v in self.footprints.items()},
            "states": {str(k): np.asarray(v).tolist() for k, v in self.states.items()},
            "guidance_losses": list(self.guidance_losses),
            "collisions": [list(c) for c in self.collisions],
            "offroad": [list(o) for o in self.offroad],
            "termination": self.termination, "timings": dict(self.timings), "seed": self.seed,
            "config_hash": self.config_hash, "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RolloutRecord":
        if d.get("schema") != ROLLOUT_SCHEMA:
            raise WorldError(f"expected schema {ROLLOUT_SCHEMA}, got {d.get('schema')!r}")
        return cls(dict(d["scenario"]), list(d["agent_ids"]), d["ego_id"], d["adv_id"], d["tick"],
                   {int(k): tuple(v) for k, v in d["footprints"].items()},
                   {int(k): np.asarray(v, dtype=np.float64) for k, v in d["states"].items()},
                   list(d["guidance_losses"]), [tuple(c) for c in d["collisions"]],
                   [tuple(o) for o in d["offroad"]], d["termination"], dict(d["timings"]),
                   d.get("seed", 0), d.get("config_hash", ""), list(d.get("warnings", [])))

    def save(self, path) -> None:
        Path_(path).write_text(canonical_json(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "RolloutRecord":
        return cls.from_dict(json.loads(Path_(path).read_text()))


def _replan_seed(seed: int, replan: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(replan)]).generate_state(1)[0])


def _snapshot(source: Scenario, history: dict, step: int) -> Scenario:
    """The scenario as seen at ``step``: the last T_hist+1 states of each agent as its past."""
    n_past = len(source.agents[0].past)
    agents = tuple(AgentRecord(a.id, a.footprint,
                               Trajectory.from_array(np.stack(history[a.id][-n_past:]), source.tick))
                   for a in source.agents)
    return source.replace(agents=agents, meta={**source.meta, "sim_step": step})


def run_closed_loop(scenario: Scenario, generator, cfg: SimConfig = SimConfig(),
                    config_hash: str = "") -> RolloutRecord:
    """Alternate ego planning and non-ego generation, executing ``replan_period`` steps each."""
    t_start = time.perf_counter()
    steps = cfg.steps or scenario.horizon
    if cfg.planner.horizon != scenario.horizon:
        raise WorldError("planner horizon must match the scenario horizon")
    ego_id, adv_id = scenario.ego_id, scenario.adv_id
    fps = {a.id: a.footprint for a in scenario.agents}
    # history starts with the full past so snapshots can look back T_hist steps
    history = {a.id: list(a.past.as_array()) for a in scenario.agents}
    n_past = len(scenario.agents[0].past)
    losses, collisions, offroad, notes = [], [], [], []
    t_plan = t_gen = 0.0
    termination = "horizon"
    seen_pairs, seen_off = set(), set()
    step, replan = 0, 0
    ids = sorted(history)
    for aid in ids:
        if scenario.map.is_offroad(history[aid][-1][None, :2])[0]:
            offroad.append((aid, 0))
            seen_off.add(aid)
    while step < steps:
        snap = _snapshot(scenario, history, step)
        ego_now = snap.agent(ego_id).current
        t0 = time.perf_counter()
        neighbors = [Neighbor(a.current, a.footprint) for a in snap.non_ego]
        ego_plan = plan(ego_now, neighbors, scenario.map, cfg.planner, fps[ego_id])
        if ego_plan.warning and ego_plan.warning not in notes:
            notes.append(ego_plan.warning)
        t1 = time.perf_counter()
        try:
            gen = generator(snap, ego_plan.as_array(), replan, _replan_seed(cfg.seed, replan))
        except (ModelError, WorldError, ArithmeticError) as e:
            notes.append(f"step {step}: generation failed: {e}")
            termination = "failure"
            t_plan += t1 - t0
            t_gen += time.perf_counter() - t1
            break
        t2 = time.perf_counter()
        t_plan += t1 - t0
        t_gen += t2 - t1
        losses.append(gen.loss)
        if gen.warning and gen.warning not in notes:
            notes.append(gen.warning)
        controlled = {ego_id: ("planner", ego_plan.as_array())}
        for i, aid in enumerate(gen.agent_ids):
            if aid in controlled:
                raise WorldError(f"agent {aid} is controlled twice")
            controlled[aid] = ("model", gen.states[i])
        if set(controlled) != set(ids):
            raise WorldError("every agent must be controlled exactly once")
        hit = False
        for k in range(1, min(cfg.replan_period, steps - step) + 1):
            step += 1
            for aid, (_, traj) in controlled.items():
                history[aid].append(np.asarray(traj[k], dtype=np.float64))
            cur = {aid: history[aid][-1] for aid in ids}
            for i, a in enumerate(ids):
                if a not in seen_off and scenario.map.is_offroad(cur[a][None, :2])[0]:
                    offroad.append((a, step))
                    seen_off.add(a)
                for b in ids[i + 1:]:
                    if (a, b) in seen_pairs:
                        continue
                    if rects_overlap(cur[a], cur[b], fps[a], fps[b])[0]:
                        collisions.append((a, b, step))
                        seen_pairs.add((a, b))
                        if {a, b} == {ego_id, adv_id}:
                            hit = True
            if hit and cfg.stop_on_adv_ego_collision:
                break
        replan += 1
        if hit and cfg.stop_on_adv_ego_collision:
            termination = "collision"
            break
    states = {aid: np.stack(history[aid][n_past - 1:]) for aid in ids}
    return RolloutRecord(
        scenario={k: v for k, v in scenario.meta.items() if k != "sim_step"},
        agent_ids=ids, ego_id=ego_id, adv_id=adv_id, tick=scenario.tick,
        footprints={aid: (fps[aid].length, fps[aid].width) for aid in ids},
        states=states, guidance_losses=losses, collisions=collisions, offroad=offroad,
        termination=termination,
        timings={"total": time.perf_counter() - t_start, "planning": t_plan, "generation": t_gen},
        seed=cfg.seed, config_hash=config_hash, warnings=notes)


# --------------------------------------------------------------------------
# batches


@dataclass
class BatchResult:
    records: list
    aggregate: dict


def _aggregate(records: list) -> dict:
    terms = {t: sum(r.termination == t for r in records) for t in TERMINATIONS}
    return {"scenarios": len(records), "terminations": terms,
            "adv_ego_collisions": sum(r.pair_collided(r.ego_id, r.adv_id) for r in records),
            "sim_time_total_s": sum(r.timings["total"] for r in records)}


def _run_one(args) -> RolloutRecord:
    scenario, generator, cfg, config_hash = args
    torch.set_num_threads(1)
    if generator == "replay":
        generator = ReplayGenerator(scenario)
    return run_closed_loop(scenario, generator, cfg, config_hash)


def run_batch(scenarios: Sequence[Scenario], generator, cfg: SimConfig = SimConfig(),
              jobs: int = 1, config_hash: str = "") -> BatchResult:
    """Independent rollouts; ``generator="replay"`` replays each scenario's own log.

    Results are identical for any ``jobs`` value: every rollout depends only on
    its scenario, the generator and the config seed.
    """
    scenarios = list(scenarios)
    if not scenarios:
        raise WorldError("run_batch: no scenarios")
    work = [(s, generator, cfg, config_hash) for s in scenarios]
    if jobs <= 1:
        records = [_run_one(w) for w in work]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as ex:
            records = list(ex.map(_run_one, work))
    return BatchResult(records, _aggregate(records))
