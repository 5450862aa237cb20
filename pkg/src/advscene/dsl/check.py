"""Type checking, weight-range validation and gradient routing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .errors import Diagnostic, DslError
from .syntax import AGENT_REFS, BinOp, Call, Expr, Name, Num, Program, describe, parse

SCALAR, SERIES, AGENT, AGENTS = "scalar", "series", "agent", "agents"
NUMERIC = (SCALAR, SERIES)
ANY_AGENT = (AGENT, AGENTS)

# level -> (low, high, high inclusive)
LEVEL_RANGES = {
    "weak": (0.25, 1.0, False),
    "medium": (1.0, 2.0, False),
    "strong": (2.0, 4.0, True),
}
REQUIRED_WEIGHT = "w_adv"


def in_level_range(level: str, value: float) -> bool:
    lo, hi, closed = LEVEL_RANGES[level]
    return lo <= value <= hi if closed else lo <= value < hi


def level_range_text(level: str) -> str:
    lo, hi, closed = LEVEL_RANGES[level]
    return f"[{lo}, {hi}{']' if closed else ')'}"


@dataclass(frozen=True)
class Signature:
    params: tuple          # allowed types per positional parameter
    result: str            # result type, or "same" for elementwise builtins
    index: bool = False    # accepts an optional trailing step-index literal
    doc: str = ""


BUILTINS = {
    "veh_coll_pens": Signature((ANY_AGENT, ANY_AGENT), SERIES,
                               doc="summed vehicle proximity penalty over agent pairs, per step"),
    "env_coll_pens": Signature((ANY_AGENT,), SERIES,
                               doc="summed map (offroad) penalty over agents, per step"),
    "dist": Signature(((AGENT,), (AGENT,)), SERIES, True, "center distance in meters"),
    "heading_diff": Signature(((AGENT,), (AGENT,)), SERIES, True, "absolute heading difference"),
    "ttc": Signature(((AGENT,), (AGENT,)), SERIES, True, "smoothed time to collision, capped"),
    "speed": Signature(((AGENT,),), SERIES, True, "speed in m/s"),
    "lon_accel": Signature(((AGENT,),), SERIES, True, "longitudinal acceleration"),
    "lat_accel": Signature(((AGENT,),), SERIES, True, "lateral acceleration v * yaw_rate"),
    "sum_t": Signature(((SERIES,),), SCALAR, doc="sum over future steps"),
    "mean_t": Signature(((SERIES,),), SCALAR, doc="mean over future steps"),
    "min_t": Signature(((SERIES,),), SCALAR, doc="smooth minimum over steps (temperature 10)"),
    "max_t": Signature(((SERIES,),), SCALAR, doc="smooth maximum over steps (temperature 10)"),
    "hard_min_t": Signature(((SERIES,),), SCALAR, doc="exact minimum over steps"),
    "hard_max_t": Signature(((SERIES,),), SCALAR, doc="exact maximum over steps"),
    "clip": Signature((NUMERIC, NUMERIC, NUMERIC), "same", doc="clip(x, lo, hi)"),
    "relu": Signature((NUMERIC,), "same"),
    "neg": Signature((NUMERIC,), "same"),
    "sq": Signature((NUMERIC,), "same"),
    "abs": Signature((NUMERIC,), "same"),
    "adv_collision": Signature(((AGENT,), (AGENT,)), SCALAR,
                               doc="hinged approach loss plus terminal gap"),
    "fixed": Signature((ANY_AGENT,), "agent-same", doc="treat agents as constants"),
}


@dataclass(frozen=True)
class Term:
    sign: float
    expr: Expr
    route: str   # "adv" | "others" | "none"


@dataclass(frozen=True)
class GuidanceProgram:
    """A typechecked program with its routing table."""
    ast: Program
    level: str
    weights: dict = field(hash=False)
    terms: tuple
    source: str = ""

    @property
    def w_adv(self) -> float:
        return self.weights[REQUIRED_WEIGHT]

    def routes(self) -> list:
        return [t.route for t in self.terms]


def _fail(msg: str, node) -> None:
    raise DslError(Diagnostic("typecheck", msg, node.span))


def _type_of(node: Expr, weights: dict) -> str:
    if isinstance(node, Num):
        return SCALAR
    if isinstance(node, Name):
        if node.ident in AGENT_REFS:
            return AGENTS if node.ident == "others" else AGENT
        if node.ident in weights:
            return SCALAR
        _fail(f"unknown identifier '{node.ident}'", node)
    if isinstance(node, BinOp):
        lt, rt = _type_of(node.left, weights), _type_of(node.right, weights)
        for side, t in ((node.left, lt), (node.right, rt)):
            if t not in NUMERIC:
                _fail(f"operator '{node.op}' needs numbers, got {t} from {describe(side)}", side)
        if node.op == "/":
            if rt != SCALAR or not _is_constant(node.right):
                _fail("divisor must be a constant (numbers and weights only)", node.right)
            if _fold(node.right, weights) == 0.0:
                _fail("division by zero", node.right)
        return SERIES if SERIES in (lt, rt) else SCALAR
    return _type_of_call(node, weights)


def _type_of_call(node: Call, weights: dict) -> str:
    sig = BUILTINS.get(node.func)
    if sig is None:
        _fail(f"unknown builtin '{node.func}'", node)
    n = len(sig.params)
    args = list(node.args)
    index = None
    if sig.index and len(args) == n + 1:
        index = args.pop()
        if not isinstance(index, Num) or index.value != int(index.value):
            _fail(f"'{node.func}' step index must be an integer literal", index)
    if len(args) != n:
        want = f"{n} or {n + 1}" if sig.index else str(n)
        _fail(f"'{node.func}' takes {want} argument(s), got {len(node.args)}", node)
    types = [_type_of(a, weights) for a in args]
    for a, t, allowed in zip(args, types, sig.params):
        if t not in allowed:
            _fail(f"'{node.func}' argument {describe(a)} has type {t}, expected "
                  f"{' or '.join(allowed)}", a)
    if sig.result == "same":
        return SERIES if SERIES in types else SCALAR
    if sig.result == "agent-same":
        return types[0]
    if index is not None:
        return SCALAR
    return sig.result


def _is_constant(node: Expr) -> bool:
    if isinstance(node, Num):
        return True
    if isinstance(node, Name):
        return node.ident not in AGENT_REFS
    if isinstance(node, BinOp):
        return _is_constant(node.left) and _is_constant(node.right)
    return False


def _fold(node: Expr, weights: dict) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Name):
        return weights[node.ident]
    a, b = _fold(node.left, weights), _fold(node.right, weights)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    return a / b if b != 0 else float("nan")


def agent_refs(node: Expr, differentiable_only: bool = True) -> set:
    """Agent references that carry gradient (``fixed(...)`` and ``ego`` excluded)."""
    if isinstance(node, Name):
        if node.ident in ("adv", "others"):
            return {node.ident}
        if node.ident == "ego" and not differentiable_only:
            return {"ego"}
        return set()
    if isinstance(node, Call):
        if node.func == "fixed" and differentiable_only:
            return set()
        out = set()
        for a in node.args:
            out |= agent_refs(a, differentiable_only)
        return out
    if isinstance(node, BinOp):
        return agent_refs(node.left, differentiable_only) | agent_refs(node.right, differentiable_only)
    return set()


def top_level_terms(node: Expr, sign: float = 1.0) -> list:
    """Split the loss on top-level ``+``/``-`` into signed additive terms."""
    if isinstance(node, BinOp) and node.op in "+-":
        right_sign = sign if node.op == "+" else -sign
        return top_level_terms(node.left, sign) + top_level_terms(node.right, right_sign)
    return [(sign, node)]


def route_of(node: Expr) -> str:
    refs = agent_refs(node)
    if refs == {"adv"}:
        return "adv"
    if refs == {"others"}:
        return "others"
    if not refs:
        return "none"
    _fail("term mixes the adversary with other agents; split it into separate terms "
          "or wrap one side in fixed(...)", node)


def typecheck(program: Program, source: str = "") -> GuidanceProgram:
    weights = {}
    for w in program.weights:
        if w.name in weights:
            _fail(f"weight '{w.name}' declared twice", w)
        weights[w.name] = w.value
    if REQUIRED_WEIGHT not in weights:
        raise DslError(Diagnostic("typecheck", f"weight '{REQUIRED_WEIGHT}' must be declared",
                                  program.level_span))
    decl = next(w for w in program.weights if w.name == REQUIRED_WEIGHT)
    if not in_level_range(program.level, decl.value):
        _fail(f"{REQUIRED_WEIGHT} = {decl.value} is outside the {program.level} range "
              f"{level_range_text(program.level)}", decl)
    t = _type_of(program.loss, weights)
    if t != SCALAR:
        _fail(f"loss must be a scalar, got {t}; reduce series with sum_t/mean_t/min_t/max_t",
              program.loss)
    terms = tuple(Term(sign, expr, route_of(expr)) for sign, expr in top_level_terms(program.loss))
    return GuidanceProgram(program, program.level, weights, terms, source)


def compile_source(source: str) -> GuidanceProgram:
    """parse + typecheck."""
    return typecheck(parse(source), source)


def builtin_names() -> list:
    return sorted(BUILTINS)


def signature_text(name: str) -> str:
    sig = BUILTINS[name]
    names = {AGENT: "agent", AGENTS: "agents", SCALAR: "scalar", SERIES: "series"}
    parts = ["|".join(names[t] for t in p) for p in sig.params]
    if sig.index:
        parts.append("[t]")
    res = sig.result if sig.result not in ("same", "agent-same") else "like arg"
    return f"{name}({', '.join(parts)}) -> {res}" + (f"  # {sig.doc}" if sig.doc else "")
