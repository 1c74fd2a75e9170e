"""Static kernel characterization: operation census and flop-per-byte class.

The census counts operator and builtin-call nodes exactly as the kernels
execute them: user calls are expanded per call site, the two-point numeric
conductance fallback doubles the current-kernel body, and solver iteration
nodes are counted once and flagged as repeating at runtime.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .ast_nodes import Node, iter_nodes
from .layout import Kernel, MechanismLayout
from .odes import linear_parts, newton_parts

COUNT_KEYS = ("add", "sub", "mul", "div", "exp", "log", "pow", "sqrt", "compare")
BYTES_PER_ACCESS = 8.0
DEFAULT_THRESHOLD = 1.0

_BINARY_COUNTS = {
    "+": "add",
    "-": "sub",
    "*": "mul",
    "/": "div",
    "^": "pow",
    "<": "compare",
    "<=": "compare",
    ">": "compare",
    ">=": "compare",
    "==": "compare",
    "!=": "compare",
}
_CALL_COUNTS = {"exp": "exp", "log": "log", "sqrt": "sqrt", "pow": "pow"}


@dataclass
class KernelProfile:
    mechanism: str
    kernel: str
    counts: dict[str, int]
    reads: int
    writes: int
    runtime_iteration: bool = False  # NewtonSolve/LinearSolve repeats at runtime

    @property
    def flops(self) -> int:
        return sum(self.counts.values())

    @property
    def flop_per_byte(self) -> float | None:
        traffic = self.reads + self.writes
        if traffic == 0:
            return None
        return self.flops / (BYTES_PER_ACCESS * traffic)

    def classify(self, threshold: float = DEFAULT_THRESHOLD) -> str:
        ratio = self.flop_per_byte
        if ratio is None:  # zero traffic: compute-bound by convention
            return "compute-bound"
        return "compute-bound" if ratio > threshold else "memory-bound"

    def as_dict(self, threshold: float = DEFAULT_THRESHOLD) -> dict:
        return {
            "mechanism": self.mechanism,
            "kernel": self.kernel,
            "counts": dict(self.counts),
            "reads": self.reads,
            "writes": self.writes,
            "flop_per_byte": self.flop_per_byte,
            "class": self.classify(threshold),
            "runtime_iteration": self.runtime_iteration,
        }


class _Census:
    def __init__(self, functions: dict[str, Node]):
        self.functions = functions
        self.counts = {k: 0 for k in COUNT_KEYS}
        self.flagged = False
        self._depth = 0

    def bump(self, key: str) -> None:
        self.counts[key] += 1

    def expr(self, node: Node) -> None:
        kind = node.kind
        if kind == "Binary":
            key = _BINARY_COUNTS.get(node.attrs["op"])
            if key:
                self.bump(key)
        elif kind == "Unary" and node.attrs["op"] == "-":
            self.bump("sub")
        elif kind == "Call":
            name = node.attrs["name"]
            key = _CALL_COUNTS.get(name)
            if key:
                self.bump(key)
            elif name in self.functions and self._depth < 50:
                self._depth += 1
                for stmt in self.functions[name].children[-1].children:
                    self.statement(stmt)
                self._depth -= 1
        elif kind == "IndexedName":
            pass  # address arithmetic, not a flop
        for child in node.children:
            self.expr(child)

    def statement(self, node: Node) -> None:
        kind = node.kind
        if kind == "Assign":
            if node.children[0].kind == "IndexedName":
                self.expr(node.children[0].children[0])
            self.expr(node.children[1])
        elif kind in ("If", "While"):
            self.expr(node.children[0])
            for block in node.children[1:]:
                for stmt in block.children:
                    self.statement(stmt)
        elif kind == "FromLoop":
            self.expr(node.children[0])
            self.expr(node.children[1])
            for stmt in node.children[2].children:
                self.statement(stmt)
        elif kind == "ExprStatement":
            self.expr(node.children[0])
        elif kind == "NewtonSolveNode":
            self.flagged = True
            residuals, jac = newton_parts(node)
            for e in residuals:
                self.expr(e)
            for row in jac:
                for e in row:
                    self.expr(e)
        elif kind == "LinearSolveNode":
            self.flagged = True
            a, b = linear_parts(node)
            for row in a:
                for e in row:
                    self.expr(e)
            for e in b:
                self.expr(e)
        elif kind in ("Reaction", "Conserve", "Equation"):
            for child in node.children:
                self.expr(child)
        # LocalDecl, Solve, ConductanceStmt, Verbatim contribute no flops


def census(statements: tuple[Node, ...] | list[Node], functions: dict[str, Node] | None = None):
    """Operator/builtin counts for a statement sequence."""
    walker = _Census(functions or {})
    for stmt in statements:
        walker.statement(stmt)
    return walker.counts, walker.flagged


class _Traffic:
    """Distinct per-instance slot reads/writes, following user calls."""

    def __init__(self, layout: MechanismLayout):
        self.layout = layout
        self.slots = set(layout.slot_names()) | {"v"}
        self.reads: set[str] = set()
        self.writes: set[str] = set()
        self._depth = 0

    def read_expr(self, node: Node) -> None:
        for n in iter_nodes(node):
            name = _slot_name(n)
            if name and name in self.slots:
                self.reads.add(name)
            if n.kind == "Call" and n.attrs["name"] in self.layout.functions and self._depth < 50:
                self._depth += 1
                for stmt in self.layout.functions[n.attrs["name"]].children[-1].children:
                    self.statement(stmt)
                self._depth -= 1

    def statement(self, node: Node) -> None:
        kind = node.kind
        if kind == "Assign":
            target, value = node.children
            base = target.children[0] if target.kind == "DerivVar" else target
            name = _slot_name(base)
            if name and name in self.slots:
                self.writes.add(name)
            if base.kind == "IndexedName":
                self.read_expr(base.children[0])
            self.read_expr(value)
        elif kind in ("If", "While"):
            self.read_expr(node.children[0])
            for block in node.children[1:]:
                for stmt in block.children:
                    self.statement(stmt)
        elif kind == "FromLoop":
            self.read_expr(node.children[0])
            self.read_expr(node.children[1])
            for stmt in node.children[2].children:
                self.statement(stmt)
        elif kind == "ExprStatement":
            self.read_expr(node.children[0])
        elif kind == "NewtonSolveNode":
            residuals, jac = newton_parts(node)
            for e in residuals:
                self.read_expr(e)
            for row in jac:
                for e in row:
                    self.read_expr(e)
            for s in node.attrs["states"]:
                self.reads.add(s)
                self.writes.add(s)
        elif kind == "LinearSolveNode":
            a, b = linear_parts(node)
            for row in a:
                for e in row:
                    self.read_expr(e)
            for e in b:
                self.read_expr(e)
            for s in node.attrs["states"]:
                self.writes.add(s)
        elif kind in ("Reaction", "Conserve", "Equation"):
            for child in node.children:
                self.read_expr(child)


def _slot_name(node: Node) -> str | None:
    if node.kind == "Identifier":
        return node.attrs["name"]
    if node.kind == "IndexedName" and node.children[0].kind == "Number":
        return f"{node.attrs['name']}[{int(node.children[0].attrs['value'])}]"
    return None


def profile_kernel(layout: MechanismLayout, kernel_name: str) -> KernelProfile:
    kernel: Kernel = layout.kernels[kernel_name]
    counts, flagged = census(kernel.statements, layout.functions)
    traffic = _Traffic(layout)
    for stmt in kernel.statements:
        traffic.statement(stmt)
    reads, writes = traffic.reads, set(traffic.writes)

    if kernel_name == "current_update" and layout.currents:
        n_cur = len(layout.currents)
        if not layout.analytic_conductance:
            # two-point fallback evaluates the body twice plus one finite
            # difference: counts double, plus the current sums and (i1-i0)/h
            counts = {k: 2 * v for k, v in counts.items()}
            counts["add"] += 2 * (n_cur - 1)
            counts["sub"] += 1
            counts["div"] += 1
        counts["add"] += 2 * n_cur  # accumulation into i_acc and g_acc
        for var, _ion in layout.currents:
            reads.add(var)
        for acc in ("i_acc", "g_acc"):
            reads.add(acc)
            writes.add(acc)

    return KernelProfile(
        mechanism=layout.mechanism,
        kernel=kernel_name,
        counts=counts,
        reads=len(reads),
        writes=len(writes),
        runtime_iteration=flagged,
    )


def profile_mechanism(layout: MechanismLayout) -> list[KernelProfile]:
    return [profile_kernel(layout, name) for name in ("initialize", "state_update", "current_update")]


def characterize(profiles: list[KernelProfile], threshold: float = DEFAULT_THRESHOLD) -> list[dict]:
    """JSON-ready report; raises ValueError when given nothing."""
    if not profiles:
        raise ValueError("nothing to characterize")
    return [p.as_dict(threshold) for p in profiles]


def report_json(profiles: list[KernelProfile], threshold: float = DEFAULT_THRESHOLD) -> str:
    return json.dumps(characterize(profiles, threshold), indent=2)


def report_table(profiles: list[KernelProfile], threshold: float = DEFAULT_THRESHOLD) -> str:
    rows = characterize(profiles, threshold)
    headers = ["mechanism", "kernel", "flops", "reads", "writes", "flop/byte", "class"]
    table = [headers]
    for r, p in zip(rows, profiles):
        ratio = "-" if r["flop_per_byte"] is None else f"{r['flop_per_byte']:.3f}"
        table.append(
            [r["mechanism"], r["kernel"], str(p.flops), str(r["reads"]), str(r["writes"]), ratio, r["class"]]
        )
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    return "\n".join(lines)
