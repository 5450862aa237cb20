"""Source spans and diagnostics shared by every DSL phase."""

from __future__ import annotations

from dataclasses import dataclass

PHASES = ("parse", "typecheck", "eval", "gradcheck", "provider")


@dataclass(frozen=True)
class Span:
    """Half-open character range with 1-based line/column of its start."""
    start: int
    end: int
    line: int
    col: int

    def valid_in(self, source: str) -> bool:
        return 0 <= self.start <= self.end <= len(source)


NO_SPAN = Span(0, 0, 1, 1)


@dataclass(frozen=True)
class Diagnostic:
    phase: str
    message: str
    span: Span = NO_SPAN

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown diagnostic phase {self.phase!r}")

    def __str__(self) -> str:
        return f"{self.phase}:{self.span.line}:{self.span.col}: {self.message}"

    def to_dict(self) -> dict:
        return {"phase": self.phase, "message": self.message, "line": self.span.line,
                "col": self.span.col, "start": self.span.start, "end": self.span.end}


class DslError(Exception):
    """Raised by any phase; carries one or more diagnostics."""

    def __init__(self, diagnostics):
        if isinstance(diagnostics, Diagnostic):
            diagnostics = [diagnostics]
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))

    @property
    def diagnostic(self) -> Diagnostic:
        return self.diagnostics[0]


def span_at(source: str, start: int, end: int) -> Span:
    line = source.count("\n", 0, start) + 1
    col = start - (source.rfind("\n", 0, start) + 1) + 1
    return Span(start, end, line, col)
