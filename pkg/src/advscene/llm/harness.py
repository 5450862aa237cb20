"""Unit-test fixture and the debugger success-rate harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from ..dsl import EvalContext
from ..guidance import context_from_scenario
from ..synth import synth_scenarios
from .pipeline import GuidanceFailure, query_to_guidance
from .prompts import PromptBundle
from .providers import FAULT_KINDS, MockProvider

ACTIONS = ("collide with the ego vehicle", "cut in front of the ego vehicle and crash",
           "overtake the ego vehicle and collide with it", "merge into the ego lane and hit it",
           "approach the ego vehicle from behind and collide")
MANNERS = ("", "aggressively", "gently", "at high speed", "at a low speed", "cautiously",
           "forcefully", "with a slight drift")


@lru_cache(maxsize=4)
def _fixture_scenario(seed: int):
    return synth_scenarios(seed, 1, "straight")[0]


def fixture_context(seed: int = 0) -> EvalContext:
    """Ground-truth futures of a small synthetic scenario, used for unit tests."""
    return context_from_scenario(_fixture_scenario(seed))


def scripted_queries(n: int, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        act = ACTIONS[int(rng.integers(len(ACTIONS)))]
        manner = MANNERS[int(rng.integers(len(MANNERS)))]
        out.append(f"Make vehicle {i} {act}{' ' + manner if manner else ''}.")
    return out


def assign_faults(queries: list, rate: float, seed: int = 0) -> dict:
    """Exactly ``round(rate * n)`` queries get a fault, cycling through the debuggable kinds."""
    k = int(round(rate * len(queries)))
    idx = np.random.default_rng(seed).permutation(len(queries))[:k]
    return {queries[int(i)]: FAULT_KINDS[j % 4] for j, i in enumerate(sorted(idx))}


@dataclass
class HarnessResult:
    queries: int
    successes: int
    traces: list = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.successes / self.queries if self.queries else 0.0


def success_rate(queries: list, faults: dict, max_iters: int,
                 fixture: Optional[EvalContext] = None, seed: int = 0,
                 bundle: PromptBundle = PromptBundle()) -> HarnessResult:
    fixture = fixture if fixture is not None else fixture_context()
    provider = MockProvider(seed=seed, faults=dict(faults))
    ok, traces = 0, []
    for q in queries:
        try:
            _, trace = query_to_guidance(q, provider, fixture, bundle, max_iters)
            ok += 1
        except GuidanceFailure as e:
            trace = e.trace
        traces.append(trace)
    return HarnessResult(len(queries), ok, traces)


def debugger_ablation(n: int = 50, fault_rate: float = 0.3, max_iters: int = 3,
                      seed: int = 0) -> tuple:
    """Success with the debugger (``max_iters``) and without it (a single attempt)."""
    queries = scripted_queries(n, seed)
    faults = assign_faults(queries, fault_rate, seed)
    fixture = fixture_context()
    with_dbg = success_rate(queries, faults, max_iters, fixture, seed)
    without = success_rate(queries, faults, 1, fixture, seed)
    return with_dbg, without
