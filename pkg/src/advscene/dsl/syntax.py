"""Lexer, recursive-descent parser, AST and pretty-printer for guidance programs.

Grammar::

    program := header decl* "loss" "=" expr
    header  := "level" ":" ("weak" | "medium" | "strong")
    decl    := "weight" ident "=" number
    expr    := term (("+" | "-") term)*
    term    := factor (("*" | "/") factor)*
    factor  := number | ident | call | "(" expr ")"
    call    := ident "(" (expr ("," expr)*)? ")"

``#`` starts a comment running to the end of the line.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Union

from .errors import Diagnostic, DslError, Span, span_at

MAX_SOURCE_BYTES = 64 * 1024
LEVELS = ("weak", "medium", "strong")
AGENT_REFS = ("adv", "ego", "others")
RESERVED = frozenset(("level", "weight", "loss") + LEVELS + AGENT_REFS)

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/=(),:])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str      # number | ident | op | eof
    text: str
    span: Span


def tokenize(source: str) -> list:
    tokens, pos = [], 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise DslError(Diagnostic("parse", f"unexpected character {source[pos]!r}",
                                      span_at(source, pos, pos + 1)))
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), span_at(source, m.start(), m.end())))
        pos = m.end()
    tokens.append(Token("eof", "", span_at(source, len(source), len(source))))
    return tokens


# --------------------------------------------------------------------------
# AST (spans excluded from equality so re-parsed trees compare equal)


@dataclass(frozen=True)
class Num:
    value: float
    span: Span = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Name:
    ident: str
    span: Span = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    span: Span = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"
    span: Span = field(default=None, compare=False, repr=False)


Expr = Union[Num, Name, Call, BinOp]


@dataclass(frozen=True)
class WeightDecl:
    name: str
    value: float
    span: Span = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Program:
    level: str
    weights: tuple
    loss: Expr
    level_span: Span = field(default=None, compare=False, repr=False)


def describe(node: Expr) -> str:
    if isinstance(node, Num):
        return f"number {format_number(node.value)}"
    if isinstance(node, Name):
        return f"name '{node.ident}'"
    if isinstance(node, Call):
        return f"call '{node.func}'"
    return f"operator '{node.op}'"


# --------------------------------------------------------------------------
# parser


class Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = tokenize(source)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def _error(self, msg: str, tok: Token = None):
        raise DslError(Diagnostic("parse", msg, (tok or self.tok).span))

    def _advance(self) -> Token:
        t = self.tok
        self.i += 1
        return t

    def _expect_op(self, op: str) -> Token:
        if self.tok.kind != "op" or self.tok.text != op:
            found = self.tok.text or "end of input"
            self._error(f"expected '{op}', found '{found}'")
        return self._advance()

    def _expect_keyword(self, word: str) -> Token:
        if self.tok.kind != "ident" or self.tok.text != word:
            found = self.tok.text or "end of input"
            self._error(f"expected '{word}', found '{found}'")
        return self._advance()

    def _span(self, start: Span, end: Span) -> Span:
        return span_at(self.source, start.start, end.end)

    def program(self) -> Program:
        self._expect_keyword("level")
        self._expect_op(":")
        lv = self.tok
        if lv.kind != "ident" or lv.text not in LEVELS:
            self._error(f"level must be one of {', '.join(LEVELS)}")
        self._advance()
        weights = []
        while self.tok.kind == "ident" and self.tok.text == "weight":
            start = self._advance()
            name = self.tok
            if name.kind != "ident":
                self._error("expected a weight name")
            if name.text in RESERVED:
                self._error(f"reserved word '{name.text}' cannot name a weight")
            self._advance()
            self._expect_op("=")
            num = self.tok
            if num.kind != "number":
                self._error("weight value must be a number literal")
            self._advance()
            weights.append(WeightDecl(name.text, self._number(num), self._span(start.span, num.span)))
        self._expect_keyword("loss")
        self._expect_op("=")
        body = self.expr()
        if self.tok.kind != "eof":
            if self.tok.kind == "op" and self.tok.text == ")":
                self._error("unbalanced ')'")
            self._error(f"unexpected '{self.tok.text}' after the loss expression")
        return Program(lv.text, tuple(weights), body, lv.span)

    def _number(self, tok: Token) -> float:
        v = float(tok.text)
        if not math.isfinite(v):
            self._error(f"numeric literal {tok.text} is out of range", tok)
        return v

    def expr(self) -> Expr:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self._advance().text
            rhs = self.term()
            node = BinOp(op, node, rhs, self._span(node.span, rhs.span))
        return node

    def term(self) -> Expr:
        node = self.factor()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self._advance().text
            rhs = self.factor()
            node = BinOp(op, node, rhs, self._span(node.span, rhs.span))
        return node

    def factor(self) -> Expr:
        t = self.tok
        if t.kind == "number":
            self._advance()
            return Num(self._number(t), t.span)
        if t.kind == "op" and t.text == "(":
            self._advance()
            inner = self.expr()
            if self.tok.kind != "op" or self.tok.text != ")":
                self._error("unbalanced '(': expected ')'", t if self.tok.kind == "eof" else None)
            close = self._advance()
            # keep the inner node but widen its span to the parentheses
            return _with_span(inner, self._span(t.span, close.span))
        if t.kind == "ident":
            self._advance()
            if self.tok.kind == "op" and self.tok.text == "(":
                if t.text in RESERVED:
                    self._error(f"reserved word '{t.text}' is not a function", t)
                self._advance()
                args = []
                if not (self.tok.kind == "op" and self.tok.text == ")"):
                    args.append(self.expr())
                    while self.tok.kind == "op" and self.tok.text == ",":
                        self._advance()
                        args.append(self.expr())
                if self.tok.kind != "op" or self.tok.text != ")":
                    self._error("unbalanced '(': expected ')' to close the call",
                                t if self.tok.kind == "eof" else None)
                close = self._advance()
                return Call(t.text, tuple(args), self._span(t.span, close.span))
            if t.text in RESERVED and t.text not in AGENT_REFS:
                self._error(f"reserved word '{t.text}' cannot be used as a value", t)
            return Name(t.text, t.span)
        if t.kind == "eof":
            self._error("unexpected end of input")
        if t.text == ")":
            self._error("unbalanced ')'")
        self._error(f"unexpected '{t.text}'")


def _with_span(node: Expr, span: Span) -> Expr:
    return type(node)(**{**{k: getattr(node, k) for k in node.__dataclass_fields__}, "span": span})


def parse(source: str) -> Program:
    """Parse guidance source into a :class:`Program`; raises :class:`DslError`."""
    if len(source.encode("utf-8")) > MAX_SOURCE_BYTES:
        raise DslError(Diagnostic("parse", f"source exceeds {MAX_SOURCE_BYTES} bytes"))
    return Parser(source).program()


# --------------------------------------------------------------------------
# printer


def format_number(v: float) -> str:
    r = repr(float(v))
    return r


def print_expr(node: Expr) -> str:
    if isinstance(node, Num):
        return format_number(node.value)
    if isinstance(node, Name):
        return node.ident
    if isinstance(node, Call):
        return f"{node.func}({', '.join(print_expr(a) for a in node.args)})"
    return f"({print_expr(node.left)} {node.op} {print_expr(node.right)})"


def print_program(p: Program) -> str:
    lines = [f"level: {p.level}"]
    lines += [f"weight {w.name} = {format_number(w.value)}" for w in p.weights]
    lines.append(f"loss = {print_expr(p.loss)}")
    return "\n".join(lines) + "\n"
