"""Scoped symbol tables and name resolution.

One global table hangs off the Program node; each top-level block that can
hold statements gets its own child table for LOCALs and formal arguments.
USEION statements implicitly declare the ion variables they mention, and the
simulator-provided names (v, dt, celsius) plus the numeric builtins are
always in scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ast_nodes import BLOCK_KINDS, Node, iter_nodes
from .diagnostics import DiagnosticSink, SemanticError, Span

BUILTIN_FUNCTIONS = ("exp", "log", "pow", "sqrt", "fabs")

# Property tags a symbol may carry (a symbol can hold several).
P_RANGE = "Range"
P_GLOBAL = "Global"
P_PARAMETER = "Parameter"
P_ASSIGNED = "Assigned"
P_STATE = "State"
P_LOCAL = "Local"
P_FUNCTION = "FunctionName"
P_PROCEDURE = "ProcedureName"
P_ION = "Ion"
P_ARGUMENT = "Argument"


@dataclass
class Symbol:
    name: str
    properties: set[str] = field(default_factory=set)
    def_span: Span | None = None
    default: float | None = None  # PARAMETER default value, if any
    array_size: int | None = None
    builtin: bool = False
    read_count: int = 0
    write_count: int = 0

    def has(self, *props: str) -> bool:
        return any(p in self.properties for p in props)

    def __repr__(self) -> str:
        return f"Symbol({self.name}, {{{', '.join(sorted(self.properties))}}})"


@dataclass
class SymbolTable:
    owner: Node
    parent: "SymbolTable | None" = None
    entries: dict[str, Symbol] = field(default_factory=dict)

    def lookup(self, name: str) -> Symbol | None:
        table: SymbolTable | None = self
        while table is not None:
            sym = table.entries.get(name)
            if sym is not None:
                return sym
            table = table.parent
        return None

    def lookup_local(self, name: str) -> Symbol | None:
        return self.entries.get(name)

    def define(self, sym: Symbol) -> Symbol:
        self.entries[sym.name] = sym
        return sym

    def get_or_create(self, name: str, span: Span | None = None) -> Symbol:
        sym = self.entries.get(name)
        if sym is None:
            sym = Symbol(name, def_span=span)
            self.entries[name] = sym
        return sym


def build_symbol_tables(program: Node, filename: str = "<input>") -> Node:
    """Attach scoped symbol tables and resolve every identifier use.

    Raises SemanticError on undeclared identifiers or redeclarations. Safe to
    re-run: tables are rebuilt from scratch each time.
    """
    sink = DiagnosticSink(filename)
    global_table = SymbolTable(owner=program)
    program.scope = global_table

    for name in BUILTIN_FUNCTIONS:
        global_table.define(Symbol(name, {P_FUNCTION}, builtin=True))
    global_table.define(Symbol("v", {P_ASSIGNED}, builtin=True))
    global_table.define(Symbol("dt", {P_GLOBAL}, builtin=True))
    global_table.define(Symbol("celsius", {P_GLOBAL}, builtin=True))

    _declare_globals(program, global_table, sink)
    sink.raise_if_errors(SemanticError)

    for block in program.children:
        if block.kind in BLOCK_KINDS:
            table = SymbolTable(owner=block, parent=global_table)
            block.scope = table
            _declare_block_names(block, table, sink)
    sink.raise_if_errors(SemanticError)

    for block in program.children:
        if block.kind in BLOCK_KINDS:
            _resolve_block(block, block.scope, sink)
    sink.raise_if_errors(SemanticError)
    return program


def _define_fresh(table: SymbolTable, name: str, prop: str, span: Span | None, sink: DiagnosticSink, **kw) -> Symbol:
    existing = table.lookup_local(name)
    if existing is not None and not existing.builtin and existing.has(
        P_PARAMETER, P_ASSIGNED, P_STATE, P_LOCAL, P_ARGUMENT, P_FUNCTION, P_PROCEDURE
    ):
        sink.error(f"redeclaration of {name!r} in the same scope", span)
        return existing
    if existing is not None and existing.builtin:
        # user declaration shadows/extends a simulator-provided name (e.g. v)
        existing.properties.add(prop)
        existing.def_span = span
        for key, value in kw.items():
            setattr(existing, key, value)
        return existing
    sym = existing or table.get_or_create(name, span)
    sym.properties.add(prop)
    sym.def_span = sym.def_span or span
    for key, value in kw.items():
        setattr(sym, key, value)
    return sym


def _declare_globals(program: Node, table: SymbolTable, sink: DiagnosticSink) -> None:
    for block in program.children:
        if block.kind == "NeuronBlock":
            for stmt in block.children:
                if stmt.kind == "RangeDecl":
                    for name in stmt.attrs["names"]:
                        table.get_or_create(name, stmt.span).properties.add(P_RANGE)
                elif stmt.kind == "GlobalDecl":
                    for name in stmt.attrs["names"]:
                        table.get_or_create(name, stmt.span).properties.add(P_GLOBAL)
                elif stmt.kind == "NonspecificCurrent":
                    for name in stmt.attrs["names"]:
                        sym = table.get_or_create(name, stmt.span)
                        sym.properties.add(P_ION)
                elif stmt.kind == "UseIon":
                    for name in stmt.attrs["reads"] + stmt.attrs["writes"]:
                        sym = table.get_or_create(name, stmt.span)
                        sym.properties.add(P_ION)
        elif block.kind == "ParamBlock":
            for decl in block.children:
                default = decl.children[0].attrs["value"] if decl.children else None
                _define_fresh(table, decl.attrs["name"], P_PARAMETER, decl.span, sink, default=default)
        elif block.kind == "AssignedBlock":
            for decl in block.children:
                _define_fresh(
                    table, decl.attrs["name"], P_ASSIGNED, decl.span, sink, array_size=decl.attrs["size"]
                )
        elif block.kind == "StateBlock":
            for decl in block.children:
                _define_fresh(
                    table, decl.attrs["name"], P_STATE, decl.span, sink, array_size=decl.attrs["size"]
                )
        elif block.kind == "ProcedureBlock":
            _define_fresh(table, block.attrs["name"], P_PROCEDURE, block.span, sink)
        elif block.kind == "FunctionBlock":
            _define_fresh(table, block.attrs["name"], P_FUNCTION, block.span, sink)


def _declare_block_names(block: Node, table: SymbolTable, sink: DiagnosticSink) -> None:
    for child in block.children:
        if child.kind == "FormalArg":
            _define_fresh(table, child.attrs["name"], P_ARGUMENT, child.span, sink)
    body = block.children[-1] if block.children and block.children[-1].kind == "StatementBlock" else None
    if body is not None:
        _declare_statement_names(body, table, sink)


def _declare_statement_names(stmt_block: Node, table: SymbolTable, sink: DiagnosticSink) -> None:
    for stmt in stmt_block.children:
        if stmt.kind == "LocalDecl":
            for name in stmt.attrs["names"]:
                _define_fresh(table, name, P_LOCAL, stmt.span, sink)
        elif stmt.kind in ("NewtonSolveNode", "LinearSolveNode"):
            for name in stmt.attrs["unknowns"]:
                if table.lookup_local(name) is None:
                    table.define(Symbol(name, {P_LOCAL}, stmt.span))
        elif stmt.kind == "FromLoop":
            sym = table.lookup_local(stmt.attrs["name"])
            if sym is None:
                table.define(Symbol(stmt.attrs["name"], {P_LOCAL}, stmt.span))
            _declare_statement_names(stmt.children[2], table, sink)
        elif stmt.kind == "If":
            _declare_statement_names(stmt.children[1], table, sink)
            if len(stmt.children) == 3:
                _declare_statement_names(stmt.children[2], table, sink)
        elif stmt.kind == "While":
            _declare_statement_names(stmt.children[1], table, sink)


def _resolve_block(block: Node, table: SymbolTable, sink: DiagnosticSink) -> None:
    body = block.children[-1] if block.children and block.children[-1].kind == "StatementBlock" else None
    if body is None:
        return
    for node in iter_nodes(body):
        if node.kind == "Identifier" or node.kind == "IndexedName":
            name = node.attrs["name"]
            if table.lookup(name) is None:
                sink.error(f"use of undeclared identifier {name!r}", node.span)
        elif node.kind == "Call":
            callee = table.lookup(node.attrs["name"])
            if callee is None:
                sink.error(f"call to undefined function {node.attrs['name']!r}", node.span)
            elif not callee.has(P_FUNCTION, P_PROCEDURE):
                sink.error(f"{node.attrs['name']!r} is not callable", node.span)
        elif node.kind == "Solve":
            pass  # target checked when solver lowering runs
        elif node.kind == "ConductanceStmt":
            if table.lookup(node.attrs["var"]) is None:
                sink.error(f"use of undeclared identifier {node.attrs['var']!r}", node.span)


# ---------------------------------------------------------------------------
# Mechanism-level queries used throughout the pipeline.


def mechanism_name(program: Node) -> str:
    for block in program.children:
        if block.kind == "NeuronBlock":
            for stmt in block.children:
                if stmt.kind in ("Suffix", "PointProcess"):
                    return stmt.attrs["name"]
    return "mechanism"


def is_point_process(program: Node) -> bool:
    for block in program.children:
        if block.kind == "NeuronBlock":
            for stmt in block.children:
                if stmt.kind == "PointProcess":
                    return True
    return False


def find_blocks(program: Node, kind: str) -> list[Node]:
    return [b for b in program.children if b.kind == kind]


def find_block_named(program: Node, name: str) -> Node | None:
    for block in program.children:
        if block.kind in BLOCK_KINDS and block.attrs.get("name") == name:
            return block
    return None


def use_ion_statements(program: Node) -> list[Node]:
    out = []
    for block in find_blocks(program, "NeuronBlock"):
        out.extend(s for s in block.children if s.kind == "UseIon")
    return out


def written_currents(program: Node) -> list[tuple[str, str]]:
    """(current variable, ion name) pairs this mechanism contributes.

    Covers USEION WRITE entries that follow the i<ion> naming convention and
    every NONSPECIFIC_CURRENT variable (ion name "" for those).
    """
    out: list[tuple[str, str]] = []
    for stmt in use_ion_statements(program):
        ion = stmt.attrs["name"]
        for name in stmt.attrs["writes"]:
            if name == "i" + ion:
                out.append((name, ion))
    for block in find_blocks(program, "NeuronBlock"):
        for stmt in block.children:
            if stmt.kind == "NonspecificCurrent":
                for name in stmt.attrs["names"]:
                    out.append((name, ""))
    return out


def global_symbols(program: Node) -> dict[str, Symbol]:
    if program.scope is None:
        raise ValueError("symbol tables not built")
    return program.scope.entries
