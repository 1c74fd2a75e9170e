"""AST node type, node-kind catalog, traversal and structural comparison.

Every construct of the supported NMODL subset is one `Node` with a `kind`
tag, an ordered child tuple and a kind-specific `attrs` payload. Trees are
treated as immutable after construction; rewriting traversals build fresh
trees and never alias nodes with their input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Mapping

from .diagnostics import Diagnostic, SemanticError, Span

# Kind catalog for the supported construct subset.
NODE_KINDS = frozenset(
    {
        # program structure
        "Program",
        "Title",
        # NEURON block
        "NeuronBlock",
        "Suffix",
        "PointProcess",
        "UseIon",
        "RangeDecl",
        "GlobalDecl",
        "NonspecificCurrent",
        # declaration blocks
        "UnitsBlock",
        "UnitDef",
        "ParamBlock",
        "ParamDecl",
        "AssignedBlock",
        "StateBlock",
        "VarDecl",
        # kernel / callable blocks
        "BreakpointBlock",
        "InitialBlock",
        "DerivativeBlock",
        "KineticBlock",
        "LinearBlock",
        "NonlinearBlock",
        "ProcedureBlock",
        "FunctionBlock",
        "FormalArg",
        # statements
        "StatementBlock",
        "LocalDecl",
        "Assign",
        "If",
        "While",
        "FromLoop",
        "Solve",
        "ConductanceStmt",
        "Reaction",
        "ReactionSide",
        "ReactionTerm",
        "Conserve",
        "Equation",
        "ExprStatement",
        "Verbatim",
        # expressions
        "Number",
        "Identifier",
        "String",
        "Binary",
        "Unary",
        "Call",
        "IndexedName",
        "DerivVar",
        # solver lowering extensions (synthesized, never parsed)
        "LinearSolveNode",
        "NewtonSolveNode",
    }
)

BLOCK_KINDS = frozenset(
    {
        "BreakpointBlock",
        "InitialBlock",
        "DerivativeBlock",
        "KineticBlock",
        "LinearBlock",
        "NonlinearBlock",
        "ProcedureBlock",
        "FunctionBlock",
    }
)

# Kernel-owning blocks analysed by the dataflow passes.
KERNEL_BLOCK_KINDS = frozenset(
    {"BreakpointBlock", "InitialBlock", "DerivativeBlock", "KineticBlock", "LinearBlock", "NonlinearBlock"}
)

STATEMENT_CONTAINER_KINDS = frozenset({"StatementBlock", "Program"})


@dataclass(eq=False)
class Node:
    kind: str
    children: tuple["Node", ...] = ()
    attrs: dict[str, Any] = field(default_factory=dict)
    span: Span | None = None
    scope: Any = None  # SymbolTable attached by symtab.build_symbol_tables

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise ValueError(f"unknown node kind {self.kind!r}")
        self.children = tuple(self.children)

    def get(self, name: str, default: Any = None) -> Any:
        return self.attrs.get(name, default)

    @property
    def name(self) -> str:
        return self.attrs["name"]

    def with_children(self, children: tuple["Node", ...]) -> "Node":
        return Node(self.kind, children, dict(self.attrs), self.span)

    def with_attrs(self, **updates: Any) -> "Node":
        attrs = dict(self.attrs)
        attrs.update(updates)
        return Node(self.kind, self.children, attrs, self.span)

    def __repr__(self) -> str:
        bits = [self.kind]
        if "name" in self.attrs:
            bits.append(self.attrs["name"])
        elif "op" in self.attrs:
            bits.append(self.attrs["op"])
        elif self.kind == "Number":
            bits.append(number_text(self))
        return f"<{' '.join(bits)} ({len(self.children)} children)>"


def mk(kind: str, children: tuple[Node, ...] | list[Node] = (), span: Span | None = None, **attrs: Any) -> Node:
    return Node(kind, tuple(children), attrs, span)


def number(value: float, text: str | None = None, span: Span | None = None) -> Node:
    return Node("Number", (), {"value": float(value), "text": text}, span)


def ident(name: str, span: Span | None = None) -> Node:
    return Node("Identifier", (), {"name": name}, span)


def binop(op: str, left: Node, right: Node) -> Node:
    return Node("Binary", (left, right), {"op": op})


def number_text(node: Node) -> str:
    """Literal text for printing: original bytes if untouched, else shortest round-trip."""
    text = node.attrs.get("text")
    if text is not None:
        return text
    return format_double(node.attrs["value"])


def format_double(value: float) -> str:
    if value == int(value) and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


# ---------------------------------------------------------------------------
# Traversal


def iter_nodes(node: Node, order: str = "pre") -> Iterator[Node]:
    if order == "pre":
        yield node
    for child in node.children:
        yield from iter_nodes(child, order)
    if order == "post":
        yield node


def visit(node: Node, callbacks: Mapping[str, Callable[[Node], None]], order: str = "pre") -> None:
    """Fire the per-kind callback once per node, in pre or post order."""
    if order not in ("pre", "post"):
        raise ValueError(f"order must be 'pre' or 'post', got {order!r}")
    for n in iter_nodes(node, order):
        cb = callbacks.get(n.kind)
        if cb is not None:
            cb(n)


RewriteFn = Callable[[Node], "Node | list[Node] | None"]


def rewrite(node: Node, fn: RewriteFn) -> Node:
    """Bottom-up rewriting traversal returning a fresh tree.

    `fn` sees each rebuilt node and may return a replacement node, a list of
    nodes (spliced into the parent's child sequence; only meaningful in
    statement positions) or None to keep the node. The input tree is never
    mutated and shares no nodes with the result.
    """
    result = _rewrite_one(node, fn)
    if isinstance(result, list):
        raise ValueError("rewrite of the root node cannot return a statement splice")
    return result


def _rewrite_one(node: Node, fn: RewriteFn) -> Node | list[Node]:
    new_children: list[Node] = []
    for child in node.children:
        out = _rewrite_one(child, fn)
        if isinstance(out, list):
            new_children.extend(out)
        else:
            new_children.append(out)
    rebuilt = Node(node.kind, tuple(new_children), dict(node.attrs), node.span)
    replacement = fn(rebuilt)
    if replacement is None:
        return rebuilt
    return replacement


def copy_tree(node: Node) -> Node:
    return rewrite(node, lambda n: None)


def count_nodes(node: Node) -> int:
    return sum(1 for _ in iter_nodes(node))


# ---------------------------------------------------------------------------
# Structural comparison


def structurally_equal(a: Node, b: Node) -> bool:
    """Kind/attrs/children equality; spans and scopes ignored.

    Numeric literal attrs compare by value, so `0.003` equals `3e-3`.
    """
    if a.kind != b.kind or len(a.children) != len(b.children):
        return False
    if not _attrs_equal(a, b):
        return False
    return all(structurally_equal(x, y) for x, y in zip(a.children, b.children))


def _attrs_equal(a: Node, b: Node) -> bool:
    if a.kind == "Number":
        return a.attrs["value"] == b.attrs["value"]
    keys_a = set(a.attrs)
    keys_b = set(b.attrs)
    if keys_a != keys_b:
        return False
    return all(a.attrs[k] == b.attrs[k] for k in keys_a)


# ---------------------------------------------------------------------------
# Validation

# Child-pattern table: kind -> (allowed child kinds | None for any), checked
# shallowly. None means the kind takes arbitrary statement/expression children.
_EXPR_KINDS = frozenset({"Number", "Identifier", "String", "Binary", "Unary", "Call", "IndexedName"})
_STMT_KINDS = frozenset(
    {
        "LocalDecl",
        "Assign",
        "If",
        "While",
        "FromLoop",
        "Solve",
        "ConductanceStmt",
        "Reaction",
        "Conserve",
        "Equation",
        "ExprStatement",
        "Verbatim",
        "LinearSolveNode",
        "NewtonSolveNode",
    }
)

_CHILD_PATTERNS: dict[str, frozenset[str] | None] = {
    "Program": frozenset(
        {
            "Title",
            "NeuronBlock",
            "UnitsBlock",
            "ParamBlock",
            "AssignedBlock",
            "StateBlock",
            "BreakpointBlock",
            "InitialBlock",
            "DerivativeBlock",
            "KineticBlock",
            "LinearBlock",
            "NonlinearBlock",
            "ProcedureBlock",
            "FunctionBlock",
            "Verbatim",
        }
    ),
    "Title": frozenset(),
    "NeuronBlock": frozenset(
        {"Suffix", "PointProcess", "UseIon", "RangeDecl", "GlobalDecl", "NonspecificCurrent"}
    ),
    "Suffix": frozenset(),
    "PointProcess": frozenset(),
    "UseIon": frozenset(),
    "RangeDecl": frozenset(),
    "GlobalDecl": frozenset(),
    "NonspecificCurrent": frozenset(),
    "UnitsBlock": frozenset({"UnitDef"}),
    "UnitDef": frozenset(),
    "ParamBlock": frozenset({"ParamDecl"}),
    "ParamDecl": frozenset({"Number", "Unary"}),
    "AssignedBlock": frozenset({"VarDecl"}),
    "StateBlock": frozenset({"VarDecl"}),
    "VarDecl": frozenset(),
    "BreakpointBlock": frozenset({"StatementBlock"}),
    "InitialBlock": frozenset({"StatementBlock"}),
    "DerivativeBlock": frozenset({"StatementBlock"}),
    "KineticBlock": frozenset({"StatementBlock"}),
    "LinearBlock": frozenset({"StatementBlock"}),
    "NonlinearBlock": frozenset({"StatementBlock"}),
    "ProcedureBlock": frozenset({"FormalArg", "StatementBlock"}),
    "FunctionBlock": frozenset({"FormalArg", "StatementBlock"}),
    "FormalArg": frozenset(),
    "StatementBlock": _STMT_KINDS,
    "LocalDecl": frozenset(),
    "Assign": _EXPR_KINDS | {"DerivVar"},
    "If": _EXPR_KINDS | {"StatementBlock"},
    "While": _EXPR_KINDS | {"StatementBlock"},
    "FromLoop": _EXPR_KINDS | {"StatementBlock"},
    "Solve": frozenset(),
    "ConductanceStmt": frozenset(),
    "Reaction": _EXPR_KINDS | {"ReactionSide"},
    "ReactionSide": frozenset({"ReactionTerm"}),
    "ReactionTerm": frozenset({"Identifier", "IndexedName"}),
    "Conserve": _EXPR_KINDS,
    "Equation": _EXPR_KINDS,
    "ExprStatement": _EXPR_KINDS,
    "Verbatim": frozenset(),
    "Number": frozenset(),
    "Identifier": frozenset(),
    "String": frozenset(),
    "Binary": _EXPR_KINDS,
    "Unary": _EXPR_KINDS,
    "Call": _EXPR_KINDS,
    "IndexedName": _EXPR_KINDS,
    "DerivVar": frozenset({"Identifier", "IndexedName"}),
    # synthesized solver nodes carry expression and statement children
    "LinearSolveNode": None,
    "NewtonSolveNode": None,
}


def validate(program: Node, filename: str = "<input>") -> None:
    """Check every node's children against the legal pattern for its kind."""
    problems: list[Diagnostic] = []
    for node in iter_nodes(program):
        allowed = _CHILD_PATTERNS.get(node.kind)
        if allowed is None:
            continue
        for child in node.children:
            if child.kind not in allowed:
                problems.append(
                    Diagnostic(
                        "error",
                        f"node kind {node.kind} cannot contain child of kind {child.kind}",
                        child.span or node.span,
                        filename,
                    )
                )
    if problems:
        raise SemanticError(problems)


def check_span_soundness(program: Node) -> bool:
    """True iff every node's span is contained in its parent's span."""
    for node in iter_nodes(program):
        if node.span is None:
            continue
        for child in node.children:
            if child.span is not None and not node.span.covers(child.span):
                return False
    return True


# ---------------------------------------------------------------------------
# Debug dumps


def dump_text(node: Node, indent: int = 0) -> str:
    pad = "    " * indent
    attrs = {k: v for k, v in node.attrs.items() if v is not None}
    line = f"{pad}{node.kind}"
    if attrs:
        line += " " + ", ".join(f"{k}={v!r}" for k, v in sorted(attrs.items()))
    lines = [line]
    for child in node.children:
        lines.append(dump_text(child, indent + 1))
    return "\n".join(lines)


def dump_json(node: Node) -> str:
    def encode(n: Node) -> dict[str, Any]:
        return {
            "kind": n.kind,
            "attrs": {k: v for k, v in n.attrs.items() if v is not None},
            "children": [encode(c) for c in n.children],
        }

    return json.dumps(encode(node), indent=2, default=list)
