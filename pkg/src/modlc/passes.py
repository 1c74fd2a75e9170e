"""AST-level optimization passes: constant folding, loop unrolling, call
inlining, definition-use analysis and RANGE-to-LOCAL conversion.

Each pass is a pure tree-to-tree function returning a fresh program plus a
PassReport; the canonical order is fold -> unroll -> inline -> localize.
A mechanism containing VERBATIM keeps its inlining and localization disabled
because opaque code may touch any variable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .ast_nodes import KERNEL_BLOCK_KINDS, Node, iter_nodes, mk, number, rewrite
from .diagnostics import DiagnosticSink
from .symtab import (
    P_ARGUMENT,
    P_ASSIGNED,
    P_FUNCTION,
    P_GLOBAL,
    P_ION,
    P_LOCAL,
    P_PARAMETER,
    P_PROCEDURE,
    P_RANGE,
    P_STATE,
    build_symbol_tables,
    global_symbols,
)

PASS_ORDER = ("fold", "unroll", "inline", "localize")

_FOLDABLE_OPS = {"+", "-", "*", "/", "^"}


@dataclass
class PassReport:
    name: str
    nodes_changed: int = 0
    symbols_affected: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "pass": self.name,
            "nodes_changed": self.nodes_changed,
            "symbols_affected": list(self.symbols_affected),
        }


def has_verbatim(program: Node) -> bool:
    return any(n.kind == "Verbatim" for n in iter_nodes(program))


def run_passes(
    program: Node,
    names: tuple[str, ...],
    sink: DiagnosticSink | None = None,
    observe: tuple[str, ...] = (),
) -> tuple[Node, list[PassReport]]:
    """Apply the requested passes in canonical order; unknown names rejected."""
    sink = sink if sink is not None else DiagnosticSink()
    unknown = [n for n in names if n not in PASS_ORDER]
    if unknown:
        raise ValueError(f"unknown pass name(s): {', '.join(unknown)}")
    reports: list[PassReport] = []
    for name in PASS_ORDER:
        if name not in names:
            continue
        if name == "fold":
            program, report = constant_fold(program, sink)
        elif name == "unroll":
            program, report = unroll_loops(program, sink)
        elif name == "inline":
            program, report = inline_calls(program, sink)
        else:
            program, report = localize(program, sink, observe=observe)
        reports.append(report)
    return program, reports


# ---------------------------------------------------------------------------
# Constant folding


def _fold_binary(op: str, a: float, b: float) -> float | None:
    try:
        if op == "+":
            v = a + b
        elif op == "-":
            v = a - b
        elif op == "*":
            v = a * b
        elif op == "/":
            v = a / b
        elif op == "^":
            v = math.pow(a, b)
        else:
            return None
    except (ZeroDivisionError, OverflowError, ValueError):
        return None
    return v if math.isfinite(v) else None


def constant_fold(program: Node, sink: DiagnosticSink) -> tuple[Node, PassReport]:
    """Fold literal subexpressions; substitute PARAMETER defaults in loop bounds."""
    report = PassReport("fold")
    build_symbol_tables(program, sink.filename)
    params = {
        name: sym.default
        for name, sym in global_symbols(program).items()
        if sym.has(P_PARAMETER) and sym.default is not None
    }

    def fold_expr(node: Node) -> Node | None:
        if node.kind == "Binary":
            left, right = node.children
            if left.kind == "Number" and right.kind == "Number":
                op = node.attrs["op"]
                if op == "/" and right.attrs["value"] == 0.0:
                    sink.warning("division by literal zero left unfolded", node.span)
                    return None
                if op in _FOLDABLE_OPS:
                    value = _fold_binary(op, left.attrs["value"], right.attrs["value"])
                    if value is not None:
                        report.nodes_changed += 1
                        return number(value, span=node.span)
        elif node.kind == "Unary" and node.attrs["op"] == "-":
            (operand,) = node.children
            if operand.kind == "Number":
                report.nodes_changed += 1
                return number(-operand.attrs["value"], span=node.span)
        return None

    def subst_params(node: Node) -> Node | None:
        if node.kind == "Identifier" and node.attrs["name"] in params:
            report.nodes_changed += 1
            if node.attrs["name"] not in report.symbols_affected:
                report.symbols_affected.append(node.attrs["name"])
            return number(params[node.attrs["name"]], span=node.span)
        return fold_expr(node)

    def per_node(node: Node) -> Node | None:
        if node.kind == "FromLoop":
            lo = rewrite(node.children[0], subst_params)
            hi = rewrite(node.children[1], subst_params)
            return Node("FromLoop", (lo, hi, node.children[2]), dict(node.attrs), node.span)
        return fold_expr(node)

    out = rewrite(program, per_node)
    build_symbol_tables(out, sink.filename)
    return out, report


# ---------------------------------------------------------------------------
# Loop unrolling


def _int_literal(node: Node) -> int | None:
    if node.kind == "Number" and node.attrs["value"] == int(node.attrs["value"]):
        return int(node.attrs["value"])
    return None


def unroll_loops(program: Node, sink: DiagnosticSink) -> tuple[Node, PassReport]:
    """Replace FROM loops with literal bounds by explicit statement copies."""
    report = PassReport("unroll")

    def substitute_index(body: Node, var: str, value: int) -> Node:
        def sub(node: Node) -> Node | None:
            if node.kind == "Identifier" and node.attrs["name"] == var:
                return number(float(value))
            if node.kind == "IndexedName":
                idx = node.children[0]
                if idx.kind == "Binary" or idx.kind == "Unary" or idx.kind == "Number":
                    folded = _fold_index(idx)
                    if folded is not None:
                        return node.with_children((folded,))
            return None

        return rewrite(body, sub)

    def _fold_index(idx: Node) -> Node | None:
        if idx.kind == "Number":
            return None
        if idx.kind == "Binary":
            left, right = idx.children
            if left.kind == "Number" and right.kind == "Number":
                value = _fold_binary(idx.attrs["op"], left.attrs["value"], right.attrs["value"])
                if value is not None:
                    return number(value)
        if idx.kind == "Unary" and idx.attrs["op"] == "-" and idx.children[0].kind == "Number":
            return number(-idx.children[0].attrs["value"])
        return None

    def per_node(node: Node) -> Node | list[Node] | None:
        if node.kind != "FromLoop":
            return None
        lo = _int_literal(node.children[0])
        hi = _int_literal(node.children[1])
        if lo is None or hi is None:
            sink.warning(
                f"cannot unroll FROM {node.attrs['name']} loop: bounds are not integer literals",
                node.span,
            )
            return None
        body = node.children[2]
        out: list[Node] = []
        for k in range(lo, hi + 1):
            copy = substitute_index(body, node.attrs["name"], k)
            out.extend(copy.children)
        report.nodes_changed += 1
        if node.attrs["name"] not in report.symbols_affected:
            report.symbols_affected.append(node.attrs["name"])
        return out

    out = rewrite(program, per_node)
    build_symbol_tables(out, sink.filename)
    return out, report


# ---------------------------------------------------------------------------
# Inlining


def _user_callables(program: Node) -> dict[str, Node]:
    return {
        b.attrs["name"]: b
        for b in program.children
        if b.kind in ("ProcedureBlock", "FunctionBlock")
    }


def _call_graph_cycles(callables: dict[str, Node]) -> set[str]:
    """Names participating in call-graph cycles (never inlined)."""
    edges = {
        name: {
            n.attrs["name"]
            for n in iter_nodes(block)
            if n.kind == "Call" and n.attrs["name"] in callables
        }
        for name, block in callables.items()
    }
    in_cycle: set[str] = set()
    for start in callables:
        stack = [(start, iter(edges[start]))]
        path = {start}
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if nxt == start:
                    in_cycle.add(start)
                elif nxt not in path:
                    path.add(nxt)
                    stack.append((nxt, iter(edges[nxt])))
                    advanced = True
                    break
            if not advanced:
                stack.pop()
    return in_cycle


class _Inliner:
    def __init__(self, program: Node, sink: DiagnosticSink, report: PassReport):
        self.callables = _user_callables(program)
        self.cycles = _call_graph_cycles(self.callables)
        self.sink = sink
        self.report = report
        self.counter = 0
        if self.cycles:
            sink.warning(
                "recursive call chain detected; not inlining: " + ", ".join(sorted(self.cycles))
            )

    def inlinable(self, name: str) -> bool:
        return name in self.callables and name not in self.cycles

    def process_block(self, stmt_block: Node) -> Node:
        out: list[Node] = []
        for stmt in stmt_block.children:
            out.extend(self.process_statement(stmt))
        return stmt_block.with_children(tuple(out))

    def process_statement(self, stmt: Node) -> list[Node]:
        kind = stmt.kind
        if kind == "ExprStatement" and stmt.children[0].kind == "Call":
            call = stmt.children[0]
            if self.inlinable(call.attrs["name"]):
                hoisted, _ = self.expand_call(call, want_result=False)
                return hoisted
            hoisted, new_call = self.rewrite_expr(call)
            return hoisted + [stmt.with_children((new_call,))]
        if kind == "Assign":
            target, value = stmt.children
            hoisted, new_value = self.rewrite_expr(value)
            h2, new_target = self.rewrite_expr(target)
            return hoisted + h2 + [stmt.with_children((new_target, new_value))]
        if kind == "If":
            cond = stmt.children[0]
            hoisted, new_cond = self.rewrite_expr(cond)
            then_block = self.process_block(stmt.children[1])
            children = [new_cond, then_block]
            if len(stmt.children) == 3:
                children.append(self.process_block(stmt.children[2]))
            return hoisted + [stmt.with_children(tuple(children))]
        if kind == "While":
            cond, body = stmt.children
            if any(
                n.kind == "Call" and self.inlinable(n.attrs["name"]) for n in iter_nodes(cond)
            ):
                self.sink.warning(
                    "cannot inline call inside WHILE condition; call left in place", stmt.span
                )
            return [stmt.with_children((cond, self.process_block(body)))]
        if kind == "FromLoop":
            lo, hi, body = stmt.children
            h1, new_lo = self.rewrite_expr(lo)
            h2, new_hi = self.rewrite_expr(hi)
            return h1 + h2 + [stmt.with_children((new_lo, new_hi, self.process_block(body)))]
        if kind in ("Reaction", "Conserve", "Equation"):
            hoisted: list[Node] = []
            new_children: list[Node] = []
            for child in stmt.children:
                h, new_child = self.rewrite_expr(child)
                hoisted.extend(h)
                new_children.append(new_child)
            return hoisted + [stmt.with_children(tuple(new_children))]
        return [stmt]

    def rewrite_expr(self, expr: Node) -> tuple[list[Node], Node]:
        """Replace user-function calls inside an expression, hoisting bodies."""
        hoisted: list[Node] = []

        def walk(node: Node) -> Node:
            new_children = tuple(walk(c) for c in node.children)
            node = node.with_children(new_children)
            if node.kind == "Call" and self.inlinable(node.attrs["name"]):
                callee = self.callables[node.attrs["name"]]
                if callee.kind != "FunctionBlock":
                    # procedure call in expression position: no value; leave it
                    return node
                stmts, result = self.expand_call(node, want_result=True)
                hoisted.extend(stmts)
                return result
            return node

        return hoisted, walk(expr)

    def expand_call(self, call: Node, want_result: bool) -> tuple[list[Node], Node]:
        callee = self.callables[call.attrs["name"]]
        n = self.counter
        self.counter += 1
        self.report.nodes_changed += 1
        if call.attrs["name"] not in self.report.symbols_affected:
            self.report.symbols_affected.append(call.attrs["name"])

        formals = [c for c in callee.children if c.kind == "FormalArg"]
        body = callee.children[-1]
        assigned_names = {
            t.attrs["name"]
            for s in iter_nodes(body)
            if s.kind == "Assign" and (t := s.children[0]).kind == "Identifier"
        }
        local_names = {
            name
            for s in iter_nodes(body)
            if s.kind == "LocalDecl"
            for name in s.attrs["names"]
        }
        loop_vars = {s.attrs["name"] for s in iter_nodes(body) if s.kind == "FromLoop"}

        rename: dict[str, Node] = {}
        pre: list[Node] = []
        decl_names: list[str] = []
        for formal, actual in zip(formals, call.children):
            simple = actual.kind in ("Number", "Identifier")
            if simple and formal.attrs["name"] not in assigned_names:
                rename[formal.attrs["name"]] = actual
            else:
                fresh = f"{formal.attrs['name']}_in_{n}"
                rename[formal.attrs["name"]] = mk("Identifier", (), name=fresh)
                decl_names.append(fresh)
                pre.append(mk("Assign", (mk("Identifier", (), name=fresh), actual)))
        for name in sorted(local_names | loop_vars):
            rename[name] = mk("Identifier", (), name=f"{name}_in_{n}")

        result_expr: Node = call
        if callee.kind == "FunctionBlock":
            fresh = f"{callee.attrs['name']}_in_{n}"
            rename[callee.attrs["name"]] = mk("Identifier", (), name=fresh)
            decl_names.append(fresh)
            result_expr = mk("Identifier", (), name=fresh)

        def sub(node: Node) -> Node | None:
            if node.kind == "Identifier" and node.attrs["name"] in rename:
                return rewrite(rename[node.attrs["name"]], lambda _n: None)
            if node.kind == "LocalDecl":
                return node.with_attrs(
                    names=tuple(
                        rename[x].attrs["name"] if x in rename else x for x in node.attrs["names"]
                    )
                )
            if node.kind == "FromLoop" and node.attrs["name"] in rename:
                return node.with_attrs(name=rename[node.attrs["name"]].attrs["name"])
            return None

        new_body = rewrite(body, sub)
        stmts: list[Node] = []
        if decl_names:
            stmts.append(mk("LocalDecl", (), names=tuple(decl_names)))
        stmts.extend(pre)
        stmts.extend(new_body.children)

        # recursively inline calls remaining inside the expanded body
        expanded: list[Node] = []
        for s in stmts:
            expanded.extend(self.process_statement(s))
        return expanded, result_expr


def inline_calls(program: Node, sink: DiagnosticSink) -> tuple[Node, PassReport]:
    """Inline user PROCEDURE/FUNCTION bodies at their call sites in kernels."""
    report = PassReport("inline")
    if has_verbatim(program):
        sink.warning("mechanism contains VERBATIM; inlining disabled")
        out = rewrite(program, lambda n: None)
        build_symbol_tables(out, sink.filename)
        return out, report
    inliner = _Inliner(program, sink, report)

    blocks: list[Node] = []
    for block in program.children:
        if block.kind in KERNEL_BLOCK_KINDS:
            body = block.children[-1]
            new_body = inliner.process_block(body)
            blocks.append(block.with_children((*block.children[:-1], new_body)))
        else:
            blocks.append(rewrite(block, lambda n: None))

    # drop user callables that no longer have any call site (transitively)
    callable_names = set(inliner.callables)
    referenced = {
        n.attrs["name"]
        for b in blocks
        if b.kind not in ("ProcedureBlock", "FunctionBlock")
        for n in iter_nodes(b)
        if n.kind == "Call" and n.attrs["name"] in callable_names
    }
    work = sorted(referenced)
    while work:
        block = inliner.callables[work.pop()]
        for n in iter_nodes(block):
            name = n.attrs.get("name")
            if n.kind == "Call" and name in callable_names and name not in referenced:
                referenced.add(name)
                work.append(name)
    blocks = [
        b
        for b in blocks
        if not (b.kind in ("ProcedureBlock", "FunctionBlock") and b.attrs["name"] not in referenced)
    ]
    out = program.with_children(tuple(blocks))
    build_symbol_tables(out, sink.filename)
    return out, report


# ---------------------------------------------------------------------------
# Definition-use analysis

UNSEEN = "unseen"
DEF = "def"
USED_FIRST = "used_first"


@dataclass
class DuEvent:
    kind: str  # "Def" | "Use"
    stmt_index: int
    block_id: str
    path: tuple[str, ...] = ()


@dataclass
class DuChain:
    symbol: str
    events: list[DuEvent] = field(default_factory=list)


@dataclass
class KernelUsage:
    """Per-kernel dataflow verdicts for one symbol."""

    occurs: bool = False
    read_before_def: bool = False  # on at least one path
    state: str = UNSEEN  # verdict at kernel exit (all-paths)


class _UsageWalker:
    def __init__(self, program: Node, sink: DiagnosticSink):
        self.program = program
        self.sink = sink
        self.callables = _user_callables(program)
        self.chains: dict[str, DuChain] = {}
        # kernel id -> symbol -> KernelUsage
        self.kernels: dict[str, dict[str, KernelUsage]] = {}
        self.globals = global_symbols(program)
        self.counter = 0

    def chain(self, name: str) -> DuChain:
        if name not in self.chains:
            self.chains[name] = DuChain(name)
        return self.chains[name]

    def run(self) -> None:
        for block in self.program.children:
            if block.kind not in KERNEL_BLOCK_KINDS:
                continue
            block_id = block.attrs.get("name") or block.kind
            usage: dict[str, KernelUsage] = {}
            self.kernels[block_id] = usage
            state: dict[str, str] = {}
            self.counter = 0
            self._walk_block(block.children[-1], state, usage, block_id, (), block.scope)
            for name, st in state.items():
                u = usage.setdefault(name, KernelUsage())
                u.state = st

    def _tracked(self, name: str, scope) -> bool:
        sym = scope.lookup(name) if scope else self.globals.get(name)
        if sym is None:
            return False
        return not sym.has(P_FUNCTION, P_PROCEDURE)

    def _use(self, name: str, state, usage, block_id, path) -> None:
        u = usage.setdefault(name, KernelUsage())
        u.occurs = True
        self.chain(name).events.append(DuEvent("Use", self.counter, block_id, path))
        if state.get(name, UNSEEN) == UNSEEN:
            state[name] = USED_FIRST
            u.read_before_def = True
        sym = self.globals.get(name)
        if sym is not None:
            sym.read_count += 1

    def _def(self, name: str, state, usage, block_id, path) -> None:
        u = usage.setdefault(name, KernelUsage())
        u.occurs = True
        self.chain(name).events.append(DuEvent("Def", self.counter, block_id, path))
        if state.get(name, UNSEEN) == UNSEEN:
            state[name] = DEF
        sym = self.globals.get(name)
        if sym is not None:
            sym.write_count += 1

    def _reads_in_expr(self, expr: Node, scope) -> list[str]:
        out = []
        for n in iter_nodes(expr):
            if n.kind in ("Identifier", "IndexedName") and self._tracked(n.attrs["name"], scope):
                out.append(n.attrs["name"])
        return out

    def _walk_block(self, stmt_block: Node, state, usage, block_id, path, scope) -> None:
        for stmt in stmt_block.children:
            self.counter += 1
            self._walk_statement(stmt, state, usage, block_id, path, scope)

    def _walk_statement(self, stmt, state, usage, block_id, path, scope) -> None:
        kind = stmt.kind
        if kind == "Assign":
            target, value = stmt.children
            for name in self._reads_in_expr(value, scope):
                self._use(name, state, usage, block_id, path)
            if target.kind == "IndexedName":
                for name in self._reads_in_expr(target.children[0], scope):
                    self._use(name, state, usage, block_id, path)
            base = target
            if base.kind == "DerivVar":
                base = base.children[0]
            self._def(base.attrs["name"], state, usage, block_id, path)
            self._handle_calls(value, state, usage, block_id, path, scope)
        elif kind == "ExprStatement":
            call = stmt.children[0]
            for name in self._reads_in_expr(call, scope):
                self._use(name, state, usage, block_id, path)
            self._handle_calls(call, state, usage, block_id, path, scope)
        elif kind == "If":
            cond = stmt.children[0]
            for name in self._reads_in_expr(cond, scope):
                self._use(name, state, usage, block_id, path)
            self._handle_calls(cond, state, usage, block_id, path, scope)
            then_state = dict(state)
            self._walk_block(stmt.children[1], then_state, usage, block_id, path + ("then",), scope)
            else_state = dict(state)
            if len(stmt.children) == 3:
                self._walk_block(stmt.children[2], else_state, usage, block_id, path + ("else",), scope)
            for name in set(then_state) | set(else_state):
                a = then_state.get(name, UNSEEN)
                b = else_state.get(name, UNSEEN)
                if a == b:
                    merged = a
                elif USED_FIRST in (a, b):
                    merged = USED_FIRST
                    usage.setdefault(name, KernelUsage()).read_before_def = True
                else:
                    merged = state.get(name, UNSEEN)  # defined on one path only
                state[name] = merged
        elif kind in ("While", "FromLoop"):
            exprs = stmt.children[:-1]
            for e in exprs:
                for name in self._reads_in_expr(e, scope):
                    self._use(name, state, usage, block_id, path)
                self._handle_calls(e, state, usage, block_id, path, scope)
            body_state = dict(state)
            self._walk_block(stmt.children[-1], body_state, usage, block_id, path + ("loop",), scope)
            for name, st in body_state.items():
                if st == USED_FIRST and state.get(name, UNSEEN) == UNSEEN:
                    state[name] = USED_FIRST
                    usage.setdefault(name, KernelUsage()).read_before_def = True
                # defs inside the body do not count: zero-iteration path
        elif kind in ("Reaction", "Conserve", "Equation"):
            for child in stmt.children:
                for name in self._reads_in_expr(child, scope):
                    self._use(name, state, usage, block_id, path)
        elif kind == "ConductanceStmt":
            self._use(stmt.attrs["var"], state, usage, block_id, path)
        elif kind == "Verbatim":
            # opaque code: treat as reading everything currently unseen
            for name, sym in self.globals.items():
                if not sym.has(P_FUNCTION, P_PROCEDURE):
                    self._use(name, state, usage, block_id, path)

    def _handle_calls(self, expr, state, usage, block_id, path, scope) -> None:
        """Conservative effect of un-inlined calls: every non-local symbol the
        callee touches (transitively) counts as used at the call point."""
        for n in iter_nodes(expr):
            if n.kind != "Call" or n.attrs["name"] not in self.callables:
                continue
            for name in self._callee_touched(n.attrs["name"], frozenset()):
                self._use(name, state, usage, block_id, path)

    def _callee_touched(self, name: str, seen: frozenset[str]) -> set[str]:
        if name in seen:
            return set()
        block = self.callables[name]
        scope = block.scope
        touched: set[str] = set()
        for n in iter_nodes(block.children[-1]):
            if n.kind in ("Identifier", "IndexedName"):
                sym = scope.lookup(n.attrs["name"]) if scope else None
                if sym is not None and not sym.has(
                    P_LOCAL, P_ARGUMENT, P_FUNCTION, P_PROCEDURE
                ):
                    touched.add(n.attrs["name"])
            elif n.kind == "Assign" and n.children[0].kind == "Identifier":
                tname = n.children[0].attrs["name"]
                sym = scope.lookup(tname) if scope else None
                if sym is not None and not sym.has(P_LOCAL, P_ARGUMENT, P_FUNCTION, P_PROCEDURE):
                    touched.add(tname)
            elif n.kind == "Call" and n.attrs["name"] in self.callables:
                touched |= self._callee_touched(n.attrs["name"], seen | {name})
        return touched


def usage_analysis(program: Node, sink: DiagnosticSink | None = None) -> "UsageResult":
    sink = sink if sink is not None else DiagnosticSink()
    build_symbol_tables(program, sink.filename)
    walker = _UsageWalker(program, sink)
    walker.run()
    return UsageResult(walker.chains, walker.kernels)


@dataclass
class UsageResult:
    chains: dict[str, DuChain]
    kernels: dict[str, dict[str, KernelUsage]]

    def defined_on_all_paths_before_use(self, name: str) -> bool:
        """True iff every kernel occurrence of `name` defines it before any
        use on every path (the localization criterion)."""
        occurs_somewhere = False
        for usage in self.kernels.values():
            u = usage.get(name)
            if u is None or not u.occurs:
                continue
            occurs_somewhere = True
            if u.read_before_def:
                return False
        return occurs_somewhere


# ---------------------------------------------------------------------------
# Localization


def _shadowed_in_some_block(program: Node, name: str) -> bool:
    for block in program.children:
        scope = getattr(block, "scope", None)
        if scope is not None and scope.lookup_local(name) is not None:
            return True
    return False


def _referenced_in_callables(program: Node, name: str) -> bool:
    for block in program.children:
        if block.kind not in ("ProcedureBlock", "FunctionBlock"):
            continue
        for n in iter_nodes(block.children[-1]):
            if n.kind in ("Identifier", "IndexedName") and n.attrs["name"] == name:
                return True
    return False


def localize(
    program: Node,
    sink: DiagnosticSink,
    du: UsageResult | None = None,
    observe: tuple[str, ...] = (),
) -> tuple[Node, PassReport]:
    """Convert RANGE/ASSIGNED variables that are always written before read
    into per-kernel LOCALs, dropping their instance-array slots."""
    report = PassReport("localize")
    if has_verbatim(program):
        sink.warning("mechanism contains VERBATIM; localization disabled")
        out = rewrite(program, lambda n: None)
        build_symbol_tables(out, sink.filename)
        return out, report
    build_symbol_tables(program, sink.filename)
    if du is None:
        du = usage_analysis(program, sink)

    symbols = global_symbols(program)
    candidates: list[str] = []
    for name, sym in symbols.items():
        if sym.builtin or name in observe:
            continue
        if not sym.has(P_RANGE, P_ASSIGNED):
            continue
        if sym.has(P_STATE, P_ION, P_GLOBAL, P_PARAMETER, P_LOCAL, P_ARGUMENT):
            continue
        if sym.array_size is not None:
            continue  # array slots stay addressable
        if _shadowed_in_some_block(program, name):
            continue  # usage analysis tracks names, not symbols
        if _referenced_in_callables(program, name):
            continue  # a retained PROCEDURE/FUNCTION body still needs the slot
        if du.defined_on_all_paths_before_use(name):
            candidates.append(name)

    if not candidates:
        out = rewrite(program, lambda n: None)
        build_symbol_tables(out, sink.filename)
        return out, report
    chosen = set(candidates)
    report.symbols_affected = sorted(chosen)

    def strip_decls(node: Node) -> Node | list[Node] | None:
        if node.kind == "RangeDecl":
            names = tuple(n for n in node.attrs["names"] if n not in chosen)
            if names == node.attrs["names"]:
                return None
            report.nodes_changed += 1
            return [] if not names else [node.with_attrs(names=names)]
        if node.kind == "VarDecl" and node.attrs["name"] in chosen:
            report.nodes_changed += 1
            return []
        return None

    stripped = rewrite(program, strip_decls)

    def drop_empty(node: Node) -> Node | list[Node] | None:
        if node.kind in ("AssignedBlock", "NeuronBlock") and not node.children:
            return []
        return None

    stripped = rewrite(stripped, drop_empty)

    blocks: list[Node] = []
    for block in stripped.children:
        if block.kind in KERNEL_BLOCK_KINDS:
            block_id = block.attrs.get("name") or block.kind
            used_here = sorted(
                name
                for name in chosen
                if (u := du.kernels.get(block_id, {}).get(name)) is not None and u.occurs
            )
            if used_here:
                body = block.children[-1]
                decl = mk("LocalDecl", (), names=tuple(used_here))
                new_body = body.with_children((decl, *body.children))
                block = block.with_children((*block.children[:-1], new_body))
                report.nodes_changed += 1
        blocks.append(block)
    out = stripped.with_children(tuple(blocks))
    build_symbol_tables(out, sink.filename)
    return out, report
