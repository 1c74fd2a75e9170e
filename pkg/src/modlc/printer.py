"""Deterministic NMODL pretty-printer.

Reparsing the emitted text gives a structurally equal tree, and printing is
a projection: a second print of the reparsed text is byte-identical.
Untouched numeric literals keep their original spelling; synthesized ones
print with the shortest round-trip representation. Solver nodes print as
equation statements so the emitted file stays consumable NMODL.
"""

from __future__ import annotations

from .ast_nodes import Node, format_double, number_text
from .odes import linear_parts, newton_parts

INDENT = "    "

# printing precedence; higher binds tighter
_PREC = {
    "||": 1,
    "&&": 2,
    "<": 3,
    "<=": 3,
    ">": 3,
    ">=": 3,
    "==": 3,
    "!=": 3,
    "+": 4,
    "-": 4,
    "*": 5,
    "/": 5,
    "^": 7,
}
_UNARY_PREC = 6
_TIGHT_OPS = {"*", "/", "^"}


def expr_text(node: Node, context: int = 0) -> str:
    kind = node.kind
    if kind == "Number":
        return number_text(node)
    if kind == "Identifier":
        return node.attrs["name"]
    if kind == "String":
        return node.attrs["text"]
    if kind == "IndexedName":
        return f"{node.attrs['name']}[{expr_text(node.children[0])}]"
    if kind == "DerivVar":
        return expr_text(node.children[0]) + "'"
    if kind == "Call":
        args = ", ".join(expr_text(a) for a in node.children)
        return f"{node.attrs['name']}({args})"
    if kind == "Unary":
        op = node.attrs["op"]
        inner = expr_text(node.children[0], _UNARY_PREC)
        text = f"{op}{inner}"
        return f"({text})" if _UNARY_PREC < context else text
    if kind == "Binary":
        op = node.attrs["op"]
        prec = _PREC[op]
        if op == "^":  # right-associative
            left = expr_text(node.children[0], prec + 1)
            right = expr_text(node.children[1], prec)
        else:
            left = expr_text(node.children[0], prec)
            right = expr_text(node.children[1], prec + 1)
        sep = "" if op in _TIGHT_OPS else " "
        text = f"{left}{sep}{op}{sep}{right}"
        return f"({text})" if prec < context else text
    raise ValueError(f"cannot print expression node {kind}")


def _unary_operand_fix(node: Node) -> str:
    return expr_text(node)


class _Printer:
    def __init__(self):
        self.lines: list[str] = []
        self.depth = 0

    def emit(self, text: str = "") -> None:
        self.lines.append(INDENT * self.depth + text if text else "")

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"

    # -- top level ---------------------------------------------------------

    def program(self, node: Node) -> None:
        first = True
        for block in node.children:
            if not first:
                self.emit()
            first = False
            self.block(block)

    def block(self, node: Node) -> None:
        kind = node.kind
        if kind == "Title":
            self.emit(f"TITLE {node.attrs['text']}")
        elif kind == "NeuronBlock":
            self.braced("NEURON", node.children, self.neuron_stmt)
        elif kind == "UnitsBlock":
            self.braced("UNITS", node.children, lambda d: self.emit(d.attrs["text"]))
        elif kind == "ParamBlock":
            self.braced("PARAMETER", node.children, self.param_decl)
        elif kind == "AssignedBlock":
            self.braced("ASSIGNED", node.children, self.var_decl)
        elif kind == "StateBlock":
            self.braced("STATE", node.children, self.var_decl)
        elif kind == "BreakpointBlock":
            self.stmt_block_header("BREAKPOINT", node)
        elif kind == "InitialBlock":
            self.stmt_block_header("INITIAL", node)
        elif kind == "DerivativeBlock":
            self.stmt_block_header(f"DERIVATIVE {node.attrs['name']}", node)
        elif kind == "KineticBlock":
            self.stmt_block_header(f"KINETIC {node.attrs['name']}", node)
        elif kind == "LinearBlock":
            self.stmt_block_header(f"LINEAR {node.attrs['name']}", node)
        elif kind == "NonlinearBlock":
            self.stmt_block_header(f"NONLINEAR {node.attrs['name']}", node)
        elif kind in ("ProcedureBlock", "FunctionBlock"):
            kw = "PROCEDURE" if kind == "ProcedureBlock" else "FUNCTION"
            formals = [c for c in node.children if c.kind == "FormalArg"]
            args = ", ".join(
                f"{f.attrs['name']} ({f.attrs['unit']})" if f.attrs.get("unit") else f.attrs["name"]
                for f in formals
            )
            header = f"{kw} {node.attrs['name']}({args})"
            if node.attrs.get("unit"):
                header += f" ({node.attrs['unit']})"
            self.emit(header + " {")
            self.depth += 1
            for stmt in node.children[-1].children:
                self.statement(stmt)
            self.depth -= 1
            self.emit("}")
        elif kind == "Verbatim":
            self.verbatim(node)
        else:
            raise ValueError(f"cannot print top-level node {kind}")

    def braced(self, keyword: str, children, fn) -> None:
        self.emit(keyword + " {")
        self.depth += 1
        for child in children:
            fn(child)
        self.depth -= 1
        self.emit("}")

    def stmt_block_header(self, header: str, node: Node) -> None:
        self.emit(header + " {")
        self.depth += 1
        for stmt in node.children[-1].children:
            self.statement(stmt)
        self.depth -= 1
        self.emit("}")

    # -- declarations ----------------------------------------------------

    def neuron_stmt(self, node: Node) -> None:
        kind = node.kind
        if kind == "Suffix":
            self.emit(f"SUFFIX {node.attrs['name']}")
        elif kind == "PointProcess":
            self.emit(f"POINT_PROCESS {node.attrs['name']}")
        elif kind == "UseIon":
            text = f"USEION {node.attrs['name']}"
            if node.attrs["reads"]:
                text += " READ " + ", ".join(node.attrs["reads"])
            if node.attrs["writes"]:
                text += " WRITE " + ", ".join(node.attrs["writes"])
            if node.attrs.get("valence") is not None:
                text += f" VALENCE {format_double(node.attrs['valence'])}"
            self.emit(text)
        elif kind == "RangeDecl":
            self.emit("RANGE " + ", ".join(node.attrs["names"]))
        elif kind == "GlobalDecl":
            self.emit("GLOBAL " + ", ".join(node.attrs["names"]))
        elif kind == "NonspecificCurrent":
            self.emit("NONSPECIFIC_CURRENT " + ", ".join(node.attrs["names"]))
        else:
            raise ValueError(f"cannot print NEURON statement {kind}")

    def param_decl(self, node: Node) -> None:
        text = node.attrs["name"]
        if node.children:
            text += f" = {number_text(node.children[0])}"
        if node.attrs.get("unit"):
            text += f" ({node.attrs['unit']})"
        if node.attrs.get("lo") is not None:
            text += f" <{format_double(node.attrs['lo'])}, {format_double(node.attrs['hi'])}>"
        self.emit(text)

    def var_decl(self, node: Node) -> None:
        text = node.attrs["name"]
        if node.attrs.get("size") is not None:
            text += f"[{node.attrs['size']}]"
        if node.attrs.get("unit"):
            text += f" ({node.attrs['unit']})"
        self.emit(text)

    # -- statements --------------------------------------------------------

    def statement(self, node: Node) -> None:
        kind = node.kind
        if kind == "Assign":
            target, value = node.children
            self.emit(f"{expr_text(target)} = {expr_text(value)}")
        elif kind == "LocalDecl":
            self.emit("LOCAL " + ", ".join(node.attrs["names"]))
        elif kind == "ExprStatement":
            self.emit(expr_text(node.children[0]))
        elif kind == "Solve":
            text = f"SOLVE {node.attrs['target']}"
            if node.attrs.get("method"):
                text += f" METHOD {node.attrs['method']}"
            self.emit(text)
        elif kind == "ConductanceStmt":
            text = f"CONDUCTANCE {node.attrs['var']}"
            if node.attrs.get("ion"):
                text += f" USEION {node.attrs['ion']}"
            self.emit(text)
        elif kind == "If":
            self.if_statement(node)
        elif kind == "While":
            self.emit(f"WHILE ({expr_text(node.children[0])}) {{")
            self.depth += 1
            for stmt in node.children[1].children:
                self.statement(stmt)
            self.depth -= 1
            self.emit("}")
        elif kind == "FromLoop":
            lo, hi, body = node.children
            self.emit(f"FROM {node.attrs['name']} = {expr_text(lo)} TO {expr_text(hi)} {{")
            self.depth += 1
            for stmt in body.children:
                self.statement(stmt)
            self.depth -= 1
            self.emit("}")
        elif kind == "Reaction":
            lhs, rhs, kf, kb = node.children
            self.emit(
                f"~ {self.reaction_side(lhs)} <-> {self.reaction_side(rhs)}"
                f" ({expr_text(kf)}, {expr_text(kb)})"
            )
        elif kind == "Conserve":
            self.emit(f"CONSERVE {expr_text(node.children[0])} = {expr_text(node.children[1])}")
        elif kind == "Equation":
            self.emit(f"~ {expr_text(node.children[0])} = {expr_text(node.children[1])}")
        elif kind == "Verbatim":
            self.verbatim(node)
        elif kind == "LinearSolveNode":
            self.linear_solve(node)
        elif kind == "NewtonSolveNode":
            self.newton_solve(node)
        else:
            raise ValueError(f"cannot print statement {kind}")

    def if_statement(self, node: Node) -> None:
        self.emit(f"IF ({expr_text(node.children[0])}) {{")
        self.depth += 1
        for stmt in node.children[1].children:
            self.statement(stmt)
        self.depth -= 1
        if len(node.children) == 3:
            self.emit("} ELSE {")
            self.depth += 1
            for stmt in node.children[2].children:
                self.statement(stmt)
            self.depth -= 1
        self.emit("}")

    def reaction_side(self, side: Node) -> str:
        parts = []
        for term in side.children:
            coeff = term.attrs["coeff"]
            name = expr_text(term.children[0])
            parts.append(f"{coeff} {name}" if coeff != 1 else name)
        return " + ".join(parts)

    def verbatim(self, node: Node) -> None:
        # body must round-trip byte-exactly; do not indent it
        self.lines.append("VERBATIM" + node.attrs["text"] + "ENDVERBATIM")

    # -- solver nodes: print as consumable equation statements -----------

    def linear_solve(self, node: Node) -> None:
        a, b = linear_parts(node)
        unknowns = node.attrs["unknowns"]
        decl = ", ".join(unknowns)
        self.emit(f"LOCAL {decl}")
        for i, row in enumerate(a):
            lhs = None
            for j, entry in enumerate(row):
                term = f"{_paren_mul(entry)}*{unknowns[j]}"
                lhs = term if lhs is None else f"{lhs} + {term}"
            self.emit(f"~ {lhs} = {expr_text(b[i])}")
        for state, unknown in zip(node.attrs["states"], unknowns):
            self.emit(f"{state} = {unknown}")

    def newton_solve(self, node: Node) -> None:
        residuals, _ = newton_parts(node)
        unknowns = node.attrs["unknowns"]
        self.emit("LOCAL " + ", ".join(unknowns))
        for res in residuals:
            self.emit(f"~ {expr_text(res)} = 0")
        for state, unknown in zip(node.attrs["states"], unknowns):
            self.emit(f"{state} = {unknown}")


def _paren_mul(node: Node) -> str:
    return expr_text(node, _PREC["*"])


def emit_nmodl_text(program: Node) -> str:
    """Full-program NMODL emission, re-synthesizing stripped SOLVE statements."""
    printer = _Printer()
    printer.program(_restore_solves(program))
    return printer.text()


def _restore_solves(program: Node) -> Node:
    """Lowered BREAKPOINTs carry their SOLVE statements as an annotation."""
    from .ast_nodes import mk

    blocks = []
    for block in program.children:
        targets = block.attrs.get("solve_targets")
        if block.kind == "BreakpointBlock" and targets:
            body = block.children[-1]
            solves = tuple(mk("Solve", (), target=t, method=m) for t, m in targets)
            new_body = body.with_children(solves + body.children)
            attrs = dict(block.attrs)
            attrs.pop("solve_targets")
            block = Node(block.kind, (*block.children[:-1], new_body), attrs, block.span)
        blocks.append(block)
    return program.with_children(tuple(blocks))
