"""Guidance language: parse, typecheck and differentiably evaluate loss programs."""

from .check import (
    BUILTINS, LEVEL_RANGES, GuidanceProgram, Term, builtin_names, compile_source,
    in_level_range, level_range_text, signature_text, typecheck,
)
from .errors import Diagnostic, DslError, Span
from .runtime import (
    EvalContext, EvalResult, adv_collision_loss, evaluate, evaluate_terms, gradient_check,
    smooth_ttc,
)
from .syntax import parse, print_expr, print_program

__all__ = [
    "BUILTINS", "LEVEL_RANGES", "Diagnostic", "DslError", "EvalContext", "EvalResult",
    "GuidanceProgram", "Span", "Term", "adv_collision_loss", "builtin_names", "compile_source",
    "evaluate", "evaluate_terms", "gradient_check", "in_level_range", "level_range_text",
    "parse", "print_expr", "print_program", "signature_text", "smooth_ttc", "typecheck",
]
