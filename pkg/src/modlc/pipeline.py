"""End-to-end compile pipeline: frontend, passes, solver lowering, layout."""

from __future__ import annotations

from dataclasses import dataclass, field

from .ast_nodes import Node, validate
from .diagnostics import DiagnosticSink
from .layout import MechanismLayout, build_layout
from .odes import lower_program
from .parser import parse_source
from .passes import PASS_ORDER, PassReport, run_passes
from .symtab import build_symbol_tables


@dataclass
class CompileResult:
    filename: str
    source_ast: Node  # as parsed
    optimized_ast: Node  # after DSL passes, before solver lowering
    lowered_ast: Node  # solver statements resolved
    layout: MechanismLayout
    reports: list[PassReport] = field(default_factory=list)
    sink: DiagnosticSink = field(default_factory=DiagnosticSink)


def frontend(source: str, filename: str = "<input>") -> Node:
    """Tokenize, parse, validate and resolve names."""
    program = parse_source(source, filename)
    validate(program, filename)
    build_symbol_tables(program, filename)
    return program


def compile_source(
    source: str,
    filename: str = "<input>",
    passes: tuple[str, ...] = PASS_ORDER,
    observe: tuple[str, ...] = (),
    use_cse: bool = True,
    pade: bool = False,
    conductance: bool = True,
) -> CompileResult:
    sink = DiagnosticSink(filename)
    source_ast = frontend(source, filename)
    optimized_ast, reports = run_passes(source_ast, passes, sink, observe=observe)
    lowered_ast = lower_program(
        optimized_ast, sink, use_cse=use_cse, pade=pade, conductance=conductance
    )
    layout = build_layout(lowered_ast, filename)
    return CompileResult(
        filename=filename,
        source_ast=source_ast,
        optimized_ast=optimized_ast,
        lowered_ast=lowered_ast,
        layout=layout,
        reports=reports,
        sink=sink,
    )


def compile_file(path, **kwargs) -> CompileResult:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return compile_source(text, filename=str(path), **kwargs)
