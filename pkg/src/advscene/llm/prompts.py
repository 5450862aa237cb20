"""Prompt templates for level reasoning, program generation and debugging."""

from __future__ import annotations

import string
from dataclasses import dataclass

from ..dsl.check import LEVEL_RANGES, builtin_names, level_range_text, signature_text
from ..dsl.syntax import __doc__ as _SYNTAX_DOC

GRAMMAR = _SYNTAX_DOC.split("Grammar::", 1)[1].strip()

SYSTEM = """\
You write adversarial guidance objectives for a driving-scenario generator.
A guidance objective is a program in a small loss language. Lower loss must mean a
more adversarial yet realistic scenario: the adversarial vehicle (adv) should
collide with the ego vehicle (ego) while all vehicles stay on the road and avoid
unrelated collisions. The ego trajectory is fixed; only adv and others are optimized."""

REASONING = """\
## Reasoning
Classify the adversarial intensity requested by the user query.
Rules: strong descriptors (aggressive, forceful, high-speed) mean strong; mild
descriptors (gentle, cautious, slight) mean weak; ambiguous intensity means medium.
User query: {query}
Answer with one line of the form `level: <weak|medium|strong>`."""

CODEGEN = """\
## Code generation
User query: {query}
Adversarial level: {level}
Weight range for w_adv at this level: {weight_range}

Grammar:
{grammar}

Builtins:
{builtins}

Level weight table:
{weight_table}

Complete this template. Keep the realism terms, choose w_adv inside the range, and
add terms only when the query asks for a specific behavior (for example a speed term
for high-speed requests):
```gdl
{template}```

Reply with exactly one fenced block labeled gdl."""

WEIGHT_RETRY = """\
## Weight correction
The program declares w_adv = {w_adv}, outside the {level} range {weight_range}.
Return the same program with w_adv inside the range, as exactly one fenced gdl block.
```gdl
{source}```"""

DEBUGGER = """\
## Debugging
The program below failed its unit test (parse, typecheck, evaluation on a fixture
scenario, finite-difference gradient check). Analyze the source and the error
messages, then return a corrected program as exactly one fenced gdl block.
Adversarial level: {level}
Errors:
{diagnostics}
```gdl
{source}```"""

REQUIRED = {
    "reasoning": {"query"},
    "codegen": {"query", "level", "weight_range", "grammar", "builtins", "weight_table",
                "template"},
    "weight_retry": {"w_adv", "level", "weight_range", "source"},
    "debugger": {"level", "diagnostics", "source"},
}


def placeholders(template: str) -> set:
    return {f for _, f, _, _ in string.Formatter().parse(template) if f}


@dataclass(frozen=True)
class PromptBundle:
    system: str = SYSTEM
    reasoning: str = REASONING
    codegen: str = CODEGEN
    weight_retry: str = WEIGHT_RETRY
    debugger: str = DEBUGGER

    def __post_init__(self):
        for name, need in REQUIRED.items():
            missing = need - placeholders(getattr(self, name))
            if missing:
                raise ValueError(f"{name} template lacks placeholders: {sorted(missing)}")

    def render(self, name: str, **values) -> str:
        return getattr(self, name).format(**values)


def builtin_table() -> str:
    return "\n".join(signature_text(n) for n in builtin_names())


def weight_table() -> str:
    return "\n".join(f"{lv}: w_adv in {level_range_text(lv)}" for lv in LEVEL_RANGES)
