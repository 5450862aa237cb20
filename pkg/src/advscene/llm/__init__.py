"""Natural-language queries to validated guidance programs through a chat provider."""

from .harness import (
    HarnessResult, assign_faults, debugger_ablation, fixture_context, scripted_queries,
    success_rate,
)
from .pipeline import (
    DEFAULT_MAX_ITERS, DebugOutcome, ExtractionError, Generated, GuidanceFailure, ReasoningTrace,
    classify_level, debug_loop, extract_program, generate_program, lexicon_level,
    query_to_guidance, unit_test,
)
from .prompts import PromptBundle
from .providers import (
    FAULT_KINDS, HttpProvider, MockProvider, Provider, ProviderConfig, ProviderError,
    ScriptedProvider, inject_fault, make_provider,
)

__all__ = [
    "DEFAULT_MAX_ITERS", "DebugOutcome", "ExtractionError", "FAULT_KINDS", "Generated",
    "GuidanceFailure", "HarnessResult", "HttpProvider", "MockProvider", "PromptBundle", "Provider",
    "ProviderConfig", "ProviderError", "ReasoningTrace", "ScriptedProvider", "assign_faults",
    "classify_level", "debug_loop", "debugger_ablation", "extract_program", "fixture_context",
    "generate_program", "inject_fault", "lexicon_level", "make_provider", "query_to_guidance",
    "scripted_queries", "success_rate", "unit_test",
]
