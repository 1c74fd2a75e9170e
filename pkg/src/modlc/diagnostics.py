"""Source spans, diagnostics and compile errors shared by all stages."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Span:
    """Half-open byte range into the original source, with 1-based line/col."""

    line: int
    col: int
    offset: int
    length: int

    @property
    def end(self) -> int:
        return self.offset + self.length

    def covers(self, other: "Span") -> bool:
        return self.offset <= other.offset and other.end <= self.end

    @staticmethod
    def merge(a: "Span", b: "Span") -> "Span":
        start = min(a.offset, b.offset)
        end = max(a.end, b.end)
        first = a if a.offset <= b.offset else b
        return Span(first.line, first.col, start, end - start)


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    message: str
    span: Span | None = None
    filename: str = "<input>"

    def format(self) -> str:
        if self.span is None:
            return f"{self.filename}: {self.severity}: {self.message}"
        return f"{self.filename}:{self.span.line}:{self.span.col}: {self.severity}: {self.message}"


class CompileError(Exception):
    """Raised when a stage cannot continue; carries the diagnostics it produced."""

    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(d.format() for d in self.diagnostics))


class LexError(CompileError):
    pass


class ParseError(CompileError):
    pass


class SemanticError(CompileError):
    pass


class SolverError(CompileError):
    pass


@dataclass
class DiagnosticSink:
    """Accumulates warnings/errors for stages that keep going after problems."""

    filename: str = "<input>"
    items: list[Diagnostic] = field(default_factory=list)

    def error(self, message: str, span: Span | None = None) -> Diagnostic:
        d = Diagnostic("error", message, span, self.filename)
        self.items.append(d)
        return d

    def warning(self, message: str, span: Span | None = None) -> Diagnostic:
        d = Diagnostic("warning", message, span, self.filename)
        self.items.append(d)
        return d

    @property
    def errors(self) -> list[Diagnostic]:
        return [d for d in self.items if d.severity == "error"]

    def raise_if_errors(self, exc: type[CompileError] = CompileError) -> None:
        if self.errors:
            raise exc(self.errors)
