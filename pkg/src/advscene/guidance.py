"""Glue between guidance programs, scenarios and the sampler."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch

from .codec import CondLatent
from .diffusion import Routed
from .dsl import EvalContext, GuidanceProgram, evaluate_terms
from .dsl.check import LEVEL_RANGES
from .world import Scenario

DEFAULT_W_ADV = {"weak": 0.5, "medium": 1.5, "strong": 3.0}
SPEED_TARGET = 15.0

CANONICAL_TEMPLATE = """\
level: {level}
weight w_adv = {w_adv}
weight w_adv_real = {w_adv_real}
weight w_bv_real = {w_bv_real}
{extra_weights}loss = w_adv * adv_collision(adv, ego)
  + w_adv_real * sum_t(env_coll_pens(adv) + veh_coll_pens(adv, fixed(others)))
  + w_bv_real * sum_t(env_coll_pens(others) + veh_coll_pens(others, others))
{extra_terms}"""


def canonical_source(level: str = "medium", w_adv: Optional[float] = None,
                     w_adv_real: float = 1.0, w_bv_real: float = 1.0,
                     speed_term: Optional[bool] = None, turn_term: bool = False) -> str:
    """The stock guidance program; the strong level adds a high-speed term by default."""
    if level not in LEVEL_RANGES:
        raise ValueError(f"unknown level {level!r}")
    w_adv = DEFAULT_W_ADV[level] if w_adv is None else w_adv
    speed_term = (level == "strong") if speed_term is None else speed_term
    weights, terms = "", ""
    if speed_term:
        weights += "weight w_speed = 0.5\n"
        terms += f"  + w_speed * mean_t(relu({SPEED_TARGET:g} - speed(adv)))\n"
    if turn_term:
        weights += "weight w_turn = 0.5\n"
        terms += "  + w_turn * mean_t(relu(2 - abs(lat_accel(adv))))\n"
    return CANONICAL_TEMPLATE.format(level=level, w_adv=w_adv, w_adv_real=w_adv_real,
                                     w_bv_real=w_bv_real, extra_weights=weights, extra_terms=terms)


def context_from_scenario(scenario: Scenario, states: Optional[dict] = None,
                          ego_plan: Optional[np.ndarray] = None) -> EvalContext:
    """Evaluation context over current state + future for every agent.

    ``states`` overrides per-agent (..., T+1, 4) tensors; agents not given use
    their ground-truth futures. ``ego_plan`` (T+1, 4) overrides the ego.
    """
    states = dict(states or {})
    trajs = {}
    for a in scenario.agents:
        if a.id in states:
            trajs[a.id] = torch.as_tensor(states[a.id], dtype=torch.float64)
        elif a.id == scenario.ego_id and ego_plan is not None:
            trajs[a.id] = torch.as_tensor(ego_plan, dtype=torch.float64)
        else:
            if a.future is None:
                raise ValueError(f"agent {a.id} has neither a future nor supplied states")
            arr = np.concatenate([a.current.as_array()[None], a.future.as_array()])
            trajs[a.id] = torch.as_tensor(arr)
    return EvalContext(trajs, scenario.ego_id, scenario.adv_id,
                       {a.id: a.footprint for a in scenario.agents}, scenario.map, scenario.tick)


def program_objective(program: GuidanceProgram, scenario: Scenario, cond: CondLatent,
                      ego_plan: np.ndarray):
    """Sampler objective: decoded states (S, N, T+1, 4) -> routed per-sample loss."""
    ego = torch.as_tensor(np.asarray(ego_plan), dtype=torch.float64)
    footprints = {a.id: a.footprint for a in scenario.agents}
    ids = list(cond.agent_ids)

    def objective(states: torch.Tensor) -> Routed:
        trajs = {aid: states[..., i, :, :] for i, aid in enumerate(ids)}
        trajs[scenario.ego_id] = ego
        ctx = EvalContext(trajs, scenario.ego_id, scenario.adv_id, footprints, scenario.map,
                          scenario.tick)
        adv, others = evaluate_terms(program, ctx, check=False)
        return Routed(adv, others)

    return objective
