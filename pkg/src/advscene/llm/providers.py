"""Chat providers: a deterministic in-tree mock, a scripted replayer and an HTTP client."""

from __future__ import annotations

import hashlib
import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..guidance import canonical_source

KEY_ENV = "ADVSCENE_LLM_KEY"
FAULT_KINDS = ("syntax", "unknown_builtin", "nonfinite", "mixed_route", "weight_range")


class ProviderError(RuntimeError):
    """A provider could not produce a completion (offline, timeout, bad reply)."""


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "mock"                  # mock | http
    endpoint: str = ""
    model: str = ""
    temperature: float = 0.0
    timeout: float = 30.0
    key_env: str = KEY_ENV
    seed: int = 0
    fault_rate: float = 0.0

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("provider timeout must be positive")
        if self.kind not in ("mock", "http"):
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if not 0.0 <= self.fault_rate <= 1.0:
            raise ValueError("fault_rate must lie in [0, 1]")


class Provider:
    """``complete(system, turns)`` where turns are ``{"role", "content"}`` dicts."""

    def complete(self, system: str, turns: Sequence[dict]) -> str:
        raise NotImplementedError


def _fenced(source: str) -> str:
    return f"```gdl\n{source}```\n"


def _field(pattern: str, text: str) -> Optional[str]:
    m = re.search(pattern, text)
    return m.group(1).strip() if m else None


def inject_fault(source: str, kind: str) -> str:
    """Corrupt a valid canonical program in one of the supported ways."""
    if kind == "syntax":
        return source.replace("adv_collision(adv, ego)", "adv_collision(adv, ego", 1)
    if kind == "unknown_builtin":
        return source.replace("adv_collision(", "collision_loss(", 1)
    if kind == "nonfinite":
        return source + "  + 1e300 * 1e300 * mean_t(speed(adv))\n"
    if kind == "mixed_route":
        return source + "  + 0.1 * sum_t(veh_coll_pens(adv, others))\n"
    if kind == "weight_range":
        return re.sub(r"weight w_adv = [0-9.eE+-]+", "weight w_adv = 9.0", source, count=1)
    raise ValueError(f"unknown fault kind {kind!r}")


@dataclass
class MockProvider(Provider):
    """Deterministic offline provider.

    Code generation returns the canonical program for the requested level;
    selected queries receive an injected fault on their first completion.
    Debugger prompts are answered with the repaired program. Faults come from
    ``faults`` (query -> kind) or, failing that, from a hash of the query
    compared against ``fault_rate``.
    """
    seed: int = 0
    fault_rate: float = 0.0
    faults: dict = field(default_factory=dict)
    reasoning_level: str = "medium"
    calls: int = 0

    def fault_for(self, query: str) -> Optional[str]:
        if query in self.faults:
            return self.faults[query]
        h = hashlib.sha256(f"{self.seed}:{query}".encode()).digest()
        u = int.from_bytes(h[:8], "big") / 2 ** 64
        if u < self.fault_rate:
            return FAULT_KINDS[h[8] % 4]    # the four kinds that reach the debugger
        return None

    def complete(self, system: str, turns: Sequence[dict]) -> str:
        self.calls += 1
        text = turns[-1]["content"]
        level = _field(r"Adversarial level: (\w+)", text) or self.reasoning_level
        if text.startswith("## Reasoning"):
            return f"level: {self.reasoning_level}"
        if text.startswith("## Code generation"):
            query = _field(r"User query: (.*)", text) or ""
            src = canonical_source(level)
            kind = self.fault_for(query)
            return "Reasoning: complete the template.\n" + _fenced(
                inject_fault(src, kind) if kind else src)
        if text.startswith("## Weight correction"):
            level = _field(r"outside the (\w+) range", text) or level
            return _fenced(canonical_source(level))
        if text.startswith("## Debugging"):
            return "Fixed the reported problem.\n" + _fenced(canonical_source(level))
        raise ProviderError("mock provider: unrecognized prompt")


@dataclass
class ScriptedProvider(Provider):
    """Replays canned completions in order; ``ProviderError`` items are raised."""
    replies: list
    position: int = 0
    prompts: list = field(default_factory=list)

    def complete(self, system: str, turns: Sequence[dict]) -> str:
        self.prompts.append(turns[-1]["content"])
        if self.position >= len(self.replies):
            raise ProviderError("scripted provider: no replies left")
        r = self.replies[self.position]
        self.position += 1
        if isinstance(r, Exception):
            raise r
        return r


@dataclass
class HttpProvider(Provider):
    """Chat-completions-style JSON over HTTP; the API key is read from the environment."""
    config: ProviderConfig

    def complete(self, system: str, turns: Sequence[dict]) -> str:
        cfg = self.config
        if not cfg.endpoint:
            raise ProviderError("http provider: no endpoint configured")
        body = json.dumps({"model": cfg.model, "temperature": cfg.temperature,
                           "messages": [{"role": "system", "content": system}, *turns]}).encode()
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(cfg.key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(cfg.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=cfg.timeout) as resp:
                data = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError) as e:
            raise ProviderError(f"http provider: request failed: {e}") from e
        except ValueError as e:
            raise ProviderError(f"http provider: invalid JSON reply: {e}") from e
        try:
            return str(data["choices"][0]["message"]["content"])
        except (KeyError, IndexError, TypeError) as e:
            raise ProviderError("http provider: reply lacks choices[0].message.content") from e


def make_provider(cfg: ProviderConfig) -> Provider:
    if cfg.kind == "mock":
        return MockProvider(seed=cfg.seed, fault_rate=cfg.fault_rate)
    return HttpProvider(cfg)
