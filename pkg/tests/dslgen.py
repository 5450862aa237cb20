"""Random well-typed guidance programs and perturbed evaluation contexts for tests."""

import numpy as np
import torch

from advscene.dsl import EvalContext
from advscene.llm.harness import fixture_context

ADV_SERIES = ("veh_coll_pens(adv, ego)", "veh_coll_pens(adv, fixed(others))", "env_coll_pens(adv)",
              "dist(adv, ego)", "speed(adv)", "lon_accel(adv)", "lat_accel(adv)",
              "heading_diff(adv, ego)", "ttc(adv, ego)")
OTHER_SERIES = ("veh_coll_pens(others, others)", "env_coll_pens(others)",
                "veh_coll_pens(others, ego)", "veh_coll_pens(others, fixed(adv))")
WRAPS = ("relu({})", "neg({})", "sq({})", "abs({})", "clip({}, 0.5, 5)", "({} * 0.5)",
         "({} + 1)", "({} / 2)", "{}")
REDUCERS = ("sum_t({})", "mean_t({})", "min_t({})", "max_t({})")


def random_series(rng, route: str) -> str:
    pool = ADV_SERIES if route == "adv" else OTHER_SERIES
    expr = pool[rng.integers(len(pool))]
    for _ in range(rng.integers(0, 3)):
        expr = WRAPS[rng.integers(len(WRAPS))].format(expr)
    if rng.random() < 0.3:
        other = pool[rng.integers(len(pool))]
        expr = f"({expr} {'+-*'[rng.integers(3)]} {other})"
    return expr


def random_program(rng) -> str:
    level = ("weak", "medium", "strong")[rng.integers(3)]
    lo, hi = {"weak": (0.25, 0.99), "medium": (1.0, 1.99), "strong": (2.0, 4.0)}[level]
    n_terms = int(rng.integers(1, 4))
    weights = [("w_adv", round(float(rng.uniform(lo, hi)), 3))]
    terms = ["w_adv * adv_collision(adv, ego)"] if rng.random() < 0.5 else []
    for i in range(n_terms):
        route = "adv" if rng.random() < 0.5 else "others"
        w = f"w_{i}"
        weights.append((w, round(float(rng.uniform(0.1, 2.0)), 3)))
        red = REDUCERS[rng.integers(len(REDUCERS))].format(random_series(rng, route))
        terms.append(f"{w} * {red}")
    if rng.random() < 0.2:
        terms.append("0.5")
    if rng.random() < 0.2:
        terms.append("speed(adv, 3)")
    decls = "\n".join(f"weight {n} = {v}" for n, v in weights)
    ops = [" + " if rng.random() < 0.8 else " - " for _ in terms[1:]]
    body = terms[0] + "".join(o + t for o, t in zip(ops, terms[1:]))
    return f"level: {level}\n{decls}\nloss = {body}\n"


def random_context(rng, seed: int = 0, batch: int = 0) -> EvalContext:
    base = fixture_context(seed)
    trajs = {}
    for aid, s in base.trajs.items():
        s = s.clone()
        shape = (batch,) + tuple(s.shape) if batch else tuple(s.shape)
        noise = torch.as_tensor(rng.normal(size=shape))
        noise[..., 0, :] = 0.0
        scale = torch.tensor([1.0, 1.0, 0.05, 0.5], dtype=torch.float64)
        trajs[aid] = s.expand(shape).clone() + noise * scale
    return EvalContext(trajs, base.ego_id, base.adv_id, base.footprints, base.map, base.tick)


def directional_fd(f, trajs: dict, ids, rng, h: float = 1e-6) -> tuple:
    """Directional derivative of ``f(trajs)`` by central differences along a random direction."""
    dirs = {a: torch.as_tensor(rng.normal(size=tuple(trajs[a].shape))) for a in ids}
    plus = {a: (t + h * dirs[a] if a in dirs else t) for a, t in trajs.items()}
    minus = {a: (t - h * dirs[a] if a in dirs else t) for a, t in trajs.items()}
    return dirs, (f(plus) - f(minus)) / (2 * h)


def rng_for(seed: int):
    return np.random.default_rng(seed)
