"""Query -> level -> program -> closed-loop unit test, with a persisted reasoning trace."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..dsl import Diagnostic, DslError, EvalContext, GuidanceProgram, compile_source, evaluate
from ..dsl import gradient_check, in_level_range, level_range_text
from ..dsl.check import LEVEL_RANGES, REQUIRED_WEIGHT
from ..dsl.syntax import parse
from ..guidance import canonical_source
from ..io import canonical_json
from .prompts import GRAMMAR, PromptBundle, builtin_table, weight_table
from .providers import Provider, ProviderError

TRACE_SCHEMA = "trace.v1"
DEFAULT_MAX_ITERS = 3

STRONG_TERMS = ("aggressive", "aggressively", "forceful", "forcefully", "high-speed",
                "high speed", "fast", "rapid", "rapidly", "reckless", "recklessly", "violent",
                "violently", "abrupt", "abruptly", "sudden", "suddenly", "speeding", "hard")
WEAK_TERMS = ("gentle", "gently", "cautious", "cautiously", "slight", "slightly", "mild",
              "mildly", "low speed", "low-speed", "slow", "slowly", "soft", "softly", "careful",
              "carefully", "subtle", "subtly", "light", "lightly")
AMBIGUOUS_TERMS = ("collide", "collides", "collision", "crash", "crashes", "hit", "hits",
                   "attempt", "attempts", "try", "tries", "cut in", "cuts in", "cut-in",
                   "overtake", "overtakes", "merge", "merges", "approach", "approaches", "block",
                   "blocks", "drift", "drifts", "swerve", "swerves")

_FENCE_RE = re.compile(r"```([^\n`]*)\n(.*?)```", re.DOTALL)


class ExtractionError(ValueError):
    """The completion did not contain exactly one fenced ``gdl`` block."""


class GuidanceFailure(RuntimeError):
    """A pipeline stage failed; ``stage`` is classify, generate or debug."""

    def __init__(self, stage: str, message: str, trace: "ReasoningTrace"):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.trace = trace


@dataclass
class ReasoningTrace:
    query: str = ""
    level: Optional[str] = None
    level_source: Optional[str] = None       # lexicon | llm
    triggers: list = field(default_factory=list)
    weights: dict = field(default_factory=dict)
    sources: list = field(default_factory=list)        # one per attempt
    diagnostics: list = field(default_factory=list)    # one list per attempt
    attempts: int = 0
    status: str = "failed"                   # ok | failed
    stage: Optional[str] = None              # failing stage, if any
    completions: list = field(default_factory=list)

    def all_diagnostics(self) -> list:
        return [d for ds in self.diagnostics for d in ds]

    def to_dict(self) -> dict:
        return {"schema": TRACE_SCHEMA, "query": self.query, "level": self.level,
                "level_source": self.level_source, "triggers": list(self.triggers),
                "weights": dict(sorted(self.weights.items())), "sources": list(self.sources),
                "diagnostics": [[d.to_dict() for d in ds] for ds in self.diagnostics],
                "attempts": self.attempts, "status": self.status, "stage": self.stage,
                "completions": list(self.completions)}

    def save(self, path) -> None:
        Path(path).write_text(canonical_json(self.to_dict()) + "\n")

    @staticmethod
    def load_dict(path) -> dict:
        d = json.loads(Path(path).read_text())
        if d.get("schema") != TRACE_SCHEMA:
            raise ValueError(f"expected schema {TRACE_SCHEMA}, got {d.get('schema')!r}")
        return d


# --------------------------------------------------------------------------
# level classification


def _find(terms, text: str) -> list:
    found = []
    for t in sorted(terms, key=len, reverse=True):
        pattern = r"(?<![\w-])" + re.escape(t) + r"(?![\w-])"
        if re.search(pattern, text) and not any(t in f for f in found):
            found.append(t)
    return sorted(found)


def lexicon_level(query: str) -> tuple:
    """``(level or None, triggers)`` from the descriptor lexicon alone."""
    text = query.lower()
    strong, weak = _find(STRONG_TERMS, text), _find(WEAK_TERMS, text)
    if strong and weak:
        return "medium", strong + weak
    if strong:
        return "strong", strong
    if weak:
        return "weak", weak
    amb = _find(AMBIGUOUS_TERMS, text)
    if amb:
        return "medium", amb
    return None, []


def classify_level(query: str, provider: Optional[Provider] = None,
                   bundle: PromptBundle = PromptBundle()) -> tuple:
    """``(level, triggers, source)``; the provider is consulted only when the lexicon is silent."""
    if not query.strip():
        raise ValueError("query must be non-empty")
    level, triggers = lexicon_level(query)
    if level is not None:
        return level, triggers, "lexicon"
    if provider is None:
        raise ProviderError("no lexicon match and no provider to consult")
    reply = provider.complete(bundle.system, [{"role": "user",
                                               "content": bundle.render("reasoning", query=query)}])
    m = re.search(r"level:\s*(weak|medium|strong)", reply.lower())
    if m is None:
        raise ProviderError(f"could not read a level from the reply: {reply[:80]!r}")
    return m.group(1), [], "llm"


# --------------------------------------------------------------------------
# generation


def extract_program(completion: str) -> str:
    blocks = _FENCE_RE.findall(completion)
    gdl = [body for tag, body in blocks if tag.strip() == "gdl"]
    if len(blocks) != 1 or len(gdl) != 1:
        raise ExtractionError(f"expected exactly one fenced gdl block, found {len(gdl)} gdl "
                              f"block(s) among {len(blocks)} fenced block(s)")
    return gdl[0]


def _declared_weights(source: str) -> Optional[dict]:
    try:
        return {w.name: w.value for w in parse(source).weights}
    except DslError:
        return None


@dataclass
class Generated:
    source: str
    weights: dict
    completions: list


def generate_program(query: str, level: str, bundle: PromptBundle, provider: Provider) -> Generated:
    """Ask the provider to complete the template; re-prompt once if w_adv is out of range."""
    if level not in LEVEL_RANGES:
        raise ValueError(f"unknown level {level!r}")
    prompt = bundle.render("codegen", query=query, level=level,
                           weight_range=level_range_text(level), grammar=GRAMMAR,
                           builtins=builtin_table(), weight_table=weight_table(),
                           template=canonical_source(level))
    turns = [{"role": "user", "content": prompt}]
    reply = provider.complete(bundle.system, turns)
    completions = [reply]
    source = extract_program(reply)
    weights = _declared_weights(source) or {}
    w = weights.get(REQUIRED_WEIGHT)
    if w is not None and not in_level_range(level, w):
        turns += [{"role": "assistant", "content": reply},
                  {"role": "user", "content": bundle.render(
                      "weight_retry", w_adv=w, level=level,
                      weight_range=level_range_text(level), source=source)}]
        reply = provider.complete(bundle.system, turns)
        completions.append(reply)
        source = extract_program(reply)
        weights = _declared_weights(source) or {}
    return Generated(source, weights, completions)


# --------------------------------------------------------------------------
# closed-loop unit test and debugger


def unit_test(source: str, fixture: EvalContext, expected_level: Optional[str] = None) -> tuple:
    """parse -> typecheck -> evaluate on the fixture -> gradient check.

    Returns ``(program, None)`` or ``(None, diagnostics)``.
    """
    try:
        program = compile_source(source)
        if expected_level is not None and program.level != expected_level:
            return None, [Diagnostic("typecheck", f"program level '{program.level}' differs from "
                                                  f"the requested level '{expected_level}'",
                                     program.ast.level_span)]
        evaluate(program, fixture, grad=True)
        diag = gradient_check(program, fixture)
    except DslError as e:
        return None, e.diagnostics
    if diag is not None:
        return None, [diag]
    return program, None


@dataclass
class DebugOutcome:
    program: Optional[GuidanceProgram]
    trace: ReasoningTrace

    @property
    def ok(self) -> bool:
        return self.program is not None


def debug_loop(source: str, fixture: EvalContext, provider: Provider,
               bundle: PromptBundle = PromptBundle(), max_iters: int = DEFAULT_MAX_ITERS,
               expected_level: Optional[str] = None,
               trace: Optional[ReasoningTrace] = None) -> DebugOutcome:
    """Test the source; on failure send source and diagnostics back for repair.

    ``max_iters`` bounds the number of tested sources (so ``max_iters - 1`` repairs).
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    trace = trace or ReasoningTrace()
    trace.status = "failed"
    for attempt in range(1, max_iters + 1):
        trace.attempts = attempt
        trace.sources.append(source)
        program, diags = unit_test(source, fixture, expected_level)
        if program is not None:
            trace.diagnostics.append([])
            trace.status = "ok"
            trace.weights = dict(program.weights)
            trace.stage = None
            return DebugOutcome(program, trace)
        trace.diagnostics.append(list(diags))
        if attempt == max_iters:
            break
        level = expected_level or (trace.level or "medium")
        prompt = bundle.render("debugger", level=level, source=source,
                               diagnostics="\n".join(str(d) for d in diags))
        try:
            reply = provider.complete(bundle.system, [{"role": "user", "content": prompt}])
            trace.completions.append(reply)
            source = extract_program(reply)
        except (ProviderError, ExtractionError) as e:
            trace.diagnostics[-1].append(Diagnostic("provider", f"repair request failed: {e}"))
            break
    trace.stage = "debug"
    return DebugOutcome(None, trace)


def query_to_guidance(query: str, provider: Provider, fixture: EvalContext,
                      bundle: PromptBundle = PromptBundle(),
                      max_iters: int = DEFAULT_MAX_ITERS) -> tuple:
    """Classify, generate and debug; returns ``(program, trace)`` or raises GuidanceFailure."""
    trace = ReasoningTrace(query=query)

    def fail(stage: str, err: Exception):
        trace.stage, trace.status = stage, "failed"
        trace.diagnostics.append([Diagnostic("provider", f"{stage} stage failed: {err}")])
        raise GuidanceFailure(stage, str(err), trace) from err

    try:
        level, triggers, how = classify_level(query, provider, bundle)
    except (ProviderError, ValueError) as e:
        fail("classify", e)
    trace.level, trace.triggers, trace.level_source = level, triggers, how
    try:
        gen = generate_program(query, level, bundle, provider)
    except (ProviderError, ExtractionError) as e:
        fail("generate", e)
    trace.completions.extend(gen.completions)
    trace.weights = dict(gen.weights)
    out = debug_loop(gen.source, fixture, provider, bundle, max_iters, level, trace)
    if not out.ok:
        raise GuidanceFailure("debug", f"no valid program after {trace.attempts} attempt(s)", trace)
    return out.program, trace
