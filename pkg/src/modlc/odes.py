"""Solver lowering: KINETIC to DERIVATIVE conversion, ODE classification and
the three integration strategies.

cnexp rewrites each independent linear ODE in place as a closed-form update
(optionally with the (2+x)/(2-x) rational stand-in for exp). sparse applies
implicit Euler and solves the resulting linear system symbolically up to
three unknowns, falling back to a runtime LU node beyond that. derivimplicit
builds the implicit-Euler residuals plus their exact Jacobian and leaves a
Newton iteration node for the runtime.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ast_nodes import Node, iter_nodes, mk, number, rewrite
from .diagnostics import Diagnostic, DiagnosticSink, SolverError
from .symbolic import (
    Constant,
    LinearSystem,
    SymExpr,
    SymError,
    Variable,
    add,
    call,
    cse,
    differentiate,
    div,
    from_ast,
    is_free_of,
    mul,
    pow_,
    simplify,
    solve_linear_symbolic,
    sub,
    substitute,
    to_ast,
)
from .symtab import find_block_named, written_currents

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50
PADE_POLE_GUARD = 1e-9
SYMBOLIC_SOLVE_LIMIT = 3  # larger linear systems go to runtime LU
CONDUCTANCE_PERTURBATION = 0.001  # two-point fallback step in mV


@dataclass
class OdeSystem:
    """Normal form y_i' = f_i(X) extracted from a DERIVATIVE block."""

    states: list[str]
    derivs: dict[str, SymExpr]
    conserve: list[tuple[dict[str, float], SymExpr]] = field(default_factory=list)

    def __post_init__(self):
        if set(self.states) != set(self.derivs):
            raise SolverError([Diagnostic("error", "state list and derivative map disagree")])


def _deriv_target_name(target: Node) -> str:
    base = target.children[0]
    if base.kind == "Identifier":
        return base.attrs["name"]
    index = base.children[0]
    if index.kind != "Number":
        raise SolverError(
            [Diagnostic("error", "array state derivative needs a literal index (unroll first)", target.span)]
        )
    return f"{base.attrs['name']}[{int(index.attrs['value'])}]"


# ---------------------------------------------------------------------------
# KINETIC -> DERIVATIVE


def kinetic_to_derivative(kinetic: Node, sink: DiagnosticSink, atoms: "CallAtoms | None" = None) -> Node:
    """Mass-action lowering of reaction statements to an equivalent ODE block."""
    derivs: dict[str, SymExpr] = {}
    order: list[str] = []
    retained: list[Node] = []
    conserves: list[Node] = []
    to_sym = (lambda e: from_ast(atoms.extract(e))) if atoms is not None else from_ast

    def species_name(term: Node) -> str:
        node = term.children[0]
        if node.kind == "Identifier":
            return node.attrs["name"]
        index = node.children[0]
        if index.kind != "Number" or index.attrs["value"] != int(index.attrs["value"]):
            raise SolverError(
                [Diagnostic("error", "reaction species index must be a literal", term.span)]
            )
        return f"{node.attrs['name']}[{int(index.attrs['value'])}]"

    def bump(name: str, amount: SymExpr) -> None:
        if name not in derivs:
            derivs[name] = amount
            order.append(name)
        else:
            derivs[name] = add(derivs[name], amount)

    for stmt in kinetic.children[-1].children:
        if stmt.kind == "Reaction":
            lhs, rhs, kf, kb = stmt.children
            reactants = [(species_name(t), t.attrs["coeff"]) for t in lhs.children]
            products = [(species_name(t), t.attrs["coeff"]) for t in rhs.children]
            fwd = mul(to_sym(kf), *(pow_(Variable(s), Constant(c)) for s, c in reactants))
            bwd = mul(to_sym(kb), *(pow_(Variable(s), Constant(c)) for s, c in products))
            flux = sub(fwd, bwd)
            for s, c in reactants:
                bump(s, mul(Constant(-float(c)), flux))
            for s, c in products:
                bump(s, mul(Constant(float(c)), flux))
        elif stmt.kind == "Conserve":
            conserves.append(stmt)
        else:
            retained.append(stmt)

    ode_stmts = [
        mk("Assign", (mk("DerivVar", (_name_node(s),)), to_ast(simplify(derivs[s]))))
        for s in order
    ]
    body = mk("StatementBlock", (*retained, *conserves, *ode_stmts))
    return mk("DerivativeBlock", (body,), kinetic.span, name=kinetic.attrs["name"])


def _name_node(name: str) -> Node:
    if name.endswith("]") and "[" in name:
        base, _, idx = name[:-1].partition("[")
        return mk("IndexedName", (number(float(idx)),), name=base)
    return mk("Identifier", (), name=name)


# ---------------------------------------------------------------------------
# Opaque call atoms
#
# A call to a user FUNCTION inside a solved equation blocks symbolic work.
# When neither the call nor the callee body (transitively) touches a state
# of the system, the call's value is a step constant: it is replaced by a
# synthetic variable for the algebra and restored in the lowered output.


class CallAtoms:
    def __init__(self, functions: dict[str, Node], states: set[str]):
        self.functions = functions
        self.states = states
        self.state_bases = {s.split("[")[0] for s in states} | states
        self.by_key: dict[str, str] = {}
        self.exprs: dict[str, Node] = {}

    def _touches_state(self, node: Node, seen: frozenset[str] = frozenset()) -> bool:
        for n in iter_nodes(node):
            if n.kind in ("Identifier", "IndexedName") and n.attrs["name"] in self.state_bases:
                return True
            if n.kind == "Verbatim":
                return True
            if n.kind == "Call":
                callee = n.attrs["name"]
                if callee in self.functions and callee not in seen:
                    if self._touches_state(
                        self.functions[callee].children[-1], seen | {callee}
                    ):
                        return True
        return False

    def extract(self, expr: Node) -> Node:
        """Replace state-free user calls with atom identifiers, bottom-up."""

        def sub(node: Node) -> Node | None:
            if node.kind != "Call" or node.attrs["name"] not in self.functions:
                return None
            if self._touches_state(node):
                raise SolverError(
                    [
                        Diagnostic(
                            "error",
                            f"call to {node.attrs['name']!r} inside a solved equation "
                            "depends on a state variable; inline it first",
                            node.span,
                        )
                    ]
                )
            from .printer import expr_text

            key = expr_text(node)
            name = self.by_key.get(key)
            if name is None:
                name = f"step_const_{len(self.by_key)}"
                self.by_key[key] = name
                self.exprs[name] = node
            return mk("Identifier", (), node.span, name=name)

        return rewrite(expr, sub)

    def restore(self, node: Node) -> Node:
        if not self.exprs:
            return node

        def sub(n: Node) -> Node | None:
            if n.kind == "Identifier" and n.attrs["name"] in self.exprs:
                return rewrite(self.exprs[n.attrs["name"]], lambda _x: None)
            return None

        return rewrite(node, sub)


# ---------------------------------------------------------------------------
# Internal loop expansion
#
# Solving needs every ODE statement explicit. When the user-facing unroll
# pass has not run, FROM loops inside a solved block are expanded here, with
# PARAMETER defaults substituted into the bounds to fix the iteration space.


def _expand_loops_in_block(block: Node, params: dict[str, float]) -> Node:
    def bound_value(expr: Node) -> int:
        sym = substitute(from_ast(expr), {k: Constant(v) for k, v in params.items()})
        folded = simplify(sym)
        if not isinstance(folded, Constant) or folded.value != int(folded.value):
            raise SolverError(
                [
                    Diagnostic(
                        "error",
                        "cannot make ODE statements explicit: loop bound is not a "
                        "compile-time integer",
                        expr.span,
                    )
                ]
            )
        return int(folded.value)

    def subst_var(body: Node, var: str, value: int) -> Node:
        def sub(node: Node) -> Node | None:
            if node.kind == "Identifier" and node.attrs["name"] == var:
                return number(float(value))
            if node.kind == "IndexedName":
                idx = node.children[0]
                if idx.kind != "Number":
                    try:
                        folded = simplify(from_ast(idx))
                    except SymError:
                        return None
                    if isinstance(folded, Constant) and folded.value == int(folded.value):
                        return node.with_children((number(folded.value),))
            return None

        return rewrite(body, sub)

    def expand(node: Node) -> Node | list[Node] | None:
        if node.kind != "FromLoop":
            return None
        lo = bound_value(node.children[0])
        hi = bound_value(node.children[1])
        out: list[Node] = []
        for k in range(lo, hi + 1):
            out.extend(subst_var(node.children[2], node.attrs["name"], k).children)
        return out

    has_loop = any(n.kind == "FromLoop" for n in iter_nodes(block))
    if not has_loop:
        return block
    return rewrite(block, expand)


def _param_defaults(program: Node) -> dict[str, float]:
    out: dict[str, float] = {}
    for block in program.children:
        if block.kind == "ParamBlock":
            for decl in block.children:
                if decl.children:
                    out[decl.attrs["name"]] = decl.children[0].attrs["value"]
    return out


# ---------------------------------------------------------------------------
# ODE extraction and classification


def extract_odes(block: Node, atoms: "CallAtoms | None" = None) -> tuple[OdeSystem, list[Node], list[int]]:
    """Split a DERIVATIVE body into (system, retained statements, ode positions)."""
    to_sym = (lambda e: from_ast(atoms.extract(e))) if atoms is not None else from_ast
    states: list[str] = []
    derivs: dict[str, SymExpr] = {}
    conserve: list[tuple[dict[str, float], SymExpr]] = []
    retained: list[Node] = []
    positions: list[int] = []
    for i, stmt in enumerate(block.children[-1].children):
        if stmt.kind == "Assign" and stmt.children[0].kind == "DerivVar":
            name = _deriv_target_name(stmt.children[0])
            if name in derivs:
                raise SolverError(
                    [Diagnostic("error", f"duplicate derivative statement for {name!r}", stmt.span)]
                )
            states.append(name)
            derivs[name] = to_sym(stmt.children[1])
            positions.append(i)
        elif stmt.kind == "Conserve":
            weights = _conserve_weights(stmt.children[0])
            conserve.append((weights, to_sym(stmt.children[1])))
        else:
            retained.append(stmt)
    return OdeSystem(states, derivs, conserve), retained, positions


def _conserve_weights(lhs: Node) -> dict[str, float]:
    expr = simplify(from_ast(lhs))
    weights: dict[str, float] = {}

    def accumulate(term: SymExpr) -> None:
        if isinstance(term, Variable):
            weights[term.name] = weights.get(term.name, 0.0) + 1.0
            return
        coeff = 1.0
        name = None
        factors = term.factors if hasattr(term, "factors") else ()
        for f in factors:
            if isinstance(f, Constant):
                coeff *= f.value
            elif isinstance(f, Variable) and name is None:
                name = f.name
            else:
                raise SolverError(
                    [Diagnostic("error", "CONSERVE left side must be a weighted sum of states")]
                )
        if name is None:
            raise SolverError(
                [Diagnostic("error", "CONSERVE left side must be a weighted sum of states")]
            )
        weights[name] = weights.get(name, 0.0) + coeff

    if hasattr(expr, "terms"):
        for term in expr.terms:
            accumulate(term)
    else:
        accumulate(expr)
    return weights


def classify(ode: OdeSystem, method: str) -> str:
    """Check the system shape against the requested SOLVE method."""
    if method == "cnexp":
        for y in ode.states:
            expr = ode.derivs[y]
            others = [x for x in ode.states if x != y]
            if any(not is_free_of(expr, x) for x in others):
                raise SolverError(
                    [
                        Diagnostic(
                            "error",
                            f"cnexp requires independent equations but {y}' is coupled; "
                            "use METHOD derivimplicit or sparse",
                        )
                    ]
                )
            slope = differentiate(expr, y)
            if not is_free_of(slope, y):
                raise SolverError(
                    [
                        Diagnostic(
                            "error",
                            f"cnexp requires {y}' linear in {y}; use METHOD derivimplicit",
                        )
                    ]
                )
        return "cnexp"
    if method == "sparse":
        for y in ode.states:
            for x in ode.states:
                entry = differentiate(ode.derivs[y], x)
                if any(not is_free_of(entry, s) for s in ode.states):
                    raise SolverError(
                        [
                            Diagnostic(
                                "error",
                                "sparse requires a linear system; use METHOD derivimplicit",
                            )
                        ]
                    )
        return "sparse"
    if method == "derivimplicit":
        return "derivimplicit"
    raise SolverError([Diagnostic("error", f"unknown SOLVE method {method!r}")])


# ---------------------------------------------------------------------------
# cnexp


def split_linear(expr: SymExpr, y: str) -> tuple[SymExpr, SymExpr]:
    """Decompose expr = a + b*y (expr linear in y) into (a, b)."""
    b = simplify(differentiate(expr, y))
    a = simplify(substitute(expr, {y: Constant(0.0)}))
    return a, b


def solve_cnexp(state: str, expr: SymExpr, pade: bool = False) -> list[Node]:
    """Closed-form per-step update statements for the independent linear ODE."""
    a, b = split_linear(expr, state)
    y = Variable(state)
    dt = Variable("dt")
    target = _name_node(state)
    if b == Constant(0.0):
        update = simplify(add(y, mul(dt, a)))
        return [mk("Assign", (target, to_ast(update)))]

    x = mul(b, dt)  # exponent argument
    a_over_b = div(a, b)
    exact = simplify(add(mul(Constant(-1.0), a_over_b), mul(add(y, a_over_b), call("exp", x))))
    exact_stmt = mk("Assign", (target, to_ast(exact)))
    if not pade:
        return [exact_stmt]

    rational = div(add(Constant(2.0), x), sub(Constant(2.0), x))
    approx = simplify(add(mul(Constant(-1.0), a_over_b), mul(add(y, a_over_b), rational)))
    # rational form has a pole at x = 2; fall back to exp when too close
    guard = mk(
        "Binary",
        (
            mk("Call", (to_ast(simplify(sub(Constant(2.0), x))),), name="fabs"),
            number(PADE_POLE_GUARD),
        ),
        op="<",
    )
    return [
        mk(
            "If",
            (
                guard,
                mk("StatementBlock", (exact_stmt,)),
                mk("StatementBlock", (mk("Assign", (target, to_ast(approx))),)),
            ),
        )
    ]


# ---------------------------------------------------------------------------
# Implicit Euler and the algebraic lowerings


def new_name(state: str) -> str:
    return f"{state.replace('[', '_').replace(']', '')}_new"


def implicit_euler_system(ode: OdeSystem) -> tuple[list[str], list[SymExpr]]:
    """Residuals F_i = X_new_i - X_old_i - dt*f_i(X_new), conservation applied."""
    rename = {s: Variable(new_name(s)) for s in ode.states}
    unknowns = [new_name(s) for s in ode.states]
    dt = Variable("dt")
    residuals: list[SymExpr] = []
    for s in ode.states:
        f_new = substitute(ode.derivs[s], rename)
        residuals.append(simplify(sub(sub(Variable(new_name(s)), Variable(s)), mul(dt, f_new))))
    for weights, total in ode.conserve:
        involved = [s for s in ode.states if weights.get(s, 0.0) != 0.0]
        if not involved:
            raise SolverError(
                [Diagnostic("error", "CONSERVE statement names no state of this system")]
            )
        victim = involved[-1]  # replace the last involved state's residual
        acc: SymExpr = Constant(0.0)
        for s, w in weights.items():
            if s not in ode.derivs:
                raise SolverError(
                    [Diagnostic("error", f"CONSERVE references {s!r} which has no ODE here")]
                )
            acc = add(acc, mul(Constant(w), Variable(new_name(s))))
        residuals[ode.states.index(victim)] = simplify(sub(acc, total))
    return unknowns, residuals


def linear_system_from_residuals(unknowns: list[str], residuals: list[SymExpr]) -> LinearSystem:
    """Interpret residuals F = A*x - b as a linear system (F linear in x)."""
    n = len(unknowns)
    a = [[simplify(differentiate(residuals[i], unknowns[j])) for j in range(n)] for i in range(n)]
    zeros = {u: Constant(0.0) for u in unknowns}
    b = [simplify(mul(Constant(-1.0), substitute(residuals[i], zeros))) for i in range(n)]
    for row in a:
        for entry in row:
            for u in unknowns:
                if not is_free_of(entry, u):
                    raise SolverError(
                        [Diagnostic("error", "system is not linear in its unknowns")]
                    )
    return LinearSystem(a, b, list(unknowns))


def lower_sparse(
    ode: OdeSystem, use_cse: bool = True, states: list[str] | None = None
) -> list[Node]:
    """Statements updating the states by one implicit-Euler step."""
    states = states if states is not None else ode.states
    unknowns, residuals = implicit_euler_system(ode)
    system = linear_system_from_residuals(unknowns, residuals)
    if len(unknowns) <= SYMBOLIC_SOLVE_LIMIT:
        solutions = solve_linear_symbolic(system, max_unknowns=SYMBOLIC_SOLVE_LIMIT)
        bindings: list[tuple[str, SymExpr]] = []
        if use_cse:
            bindings, solutions = cse(solutions)
        local_names = [name for name, _ in bindings] + list(unknowns)
        stmts: list[Node] = [mk("LocalDecl", (), names=tuple(local_names))]
        for name, expr in bindings:
            stmts.append(mk("Assign", (mk("Identifier", (), name=name), to_ast(expr))))
        for u, sol in zip(unknowns, solutions):
            stmts.append(mk("Assign", (mk("Identifier", (), name=u), to_ast(sol))))
        for s, u in zip(states, unknowns):
            stmts.append(mk("Assign", (_name_node(s), mk("Identifier", (), name=u))))
        return stmts
    children = [to_ast(e) for row in system.a for e in row]
    children += [to_ast(e) for e in system.b]
    node = mk(
        "LinearSolveNode",
        children,
        n=len(unknowns),
        unknowns=tuple(unknowns),
        states=tuple(states),
    )
    return [node]


def lower_derivimplicit(ode: OdeSystem) -> list[Node]:
    """Newton-iteration node with the exact Jacobian of the residuals."""
    unknowns, residuals = implicit_euler_system(ode)
    return [_newton_node(unknowns, residuals, ode.states)]


def _newton_node(unknowns: list[str], residuals: list[SymExpr], states: list[str]) -> Node:
    n = len(unknowns)
    jac = [
        [simplify(differentiate(residuals[i], unknowns[j])) for j in range(n)] for i in range(n)
    ]
    children = [to_ast(e) for e in residuals]
    children += [to_ast(e) for row in jac for e in row]
    return mk(
        "NewtonSolveNode",
        children,
        n=n,
        unknowns=tuple(unknowns),
        states=tuple(states),
        tol=NEWTON_TOL,
        max_iter=NEWTON_MAX_ITER,
    )


def newton_parts(node: Node) -> tuple[list[Node], list[list[Node]]]:
    """Residual and Jacobian expression children of a NewtonSolveNode."""
    n = node.attrs["n"]
    residuals = list(node.children[:n])
    jac_flat = node.children[n : n + n * n]
    jac = [list(jac_flat[i * n : (i + 1) * n]) for i in range(n)]
    return residuals, jac


def linear_parts(node: Node) -> tuple[list[list[Node]], list[Node]]:
    """Matrix and right-hand-side children of a LinearSolveNode."""
    n = node.attrs["n"]
    flat = node.children[: n * n]
    a = [list(flat[i * n : (i + 1) * n]) for i in range(n)]
    b = list(node.children[n * n : n * n + n])
    return a, b


# ---------------------------------------------------------------------------
# Algebraic blocks (LINEAR / NONLINEAR)


def _algebraic_system(block: Node, state_names: set[str], atoms: "CallAtoms | None" = None) -> tuple[list[str], list[SymExpr], list[Node]]:
    to_sym = (lambda e: from_ast(atoms.extract(e))) if atoms is not None else from_ast
    residuals: list[SymExpr] = []
    retained: list[Node] = []
    involved: list[str] = []
    for stmt in block.children[-1].children:
        if stmt.kind == "Equation":
            lhs, rhs = stmt.children
            residuals.append(simplify(sub(to_sym(lhs), to_sym(rhs))))
        else:
            retained.append(stmt)
    seen = set()
    for expr in residuals:
        for name in sorted(_free_states(expr, state_names)):
            if name not in seen:
                seen.add(name)
                involved.append(name)
    if len(residuals) != len(involved):
        raise SolverError(
            [
                Diagnostic(
                    "error",
                    f"algebraic block {block.attrs.get('name')!r} has {len(residuals)} equations "
                    f"for {len(involved)} unknown states",
                )
            ]
        )
    return involved, residuals, retained


def _free_states(expr: SymExpr, state_names: set[str]) -> set[str]:
    from .symbolic import free_variables

    return free_variables(expr) & state_names


def lower_linear_block(block: Node, state_names: set[str], use_cse: bool, atoms: "CallAtoms | None" = None) -> list[Node]:
    involved, residuals, retained = _algebraic_system(block, state_names, atoms)
    rename = {s: Variable(new_name(s)) for s in involved}
    unknowns = [new_name(s) for s in involved]
    residuals = [simplify(substitute(r, rename)) for r in residuals]
    system = linear_system_from_residuals(unknowns, residuals)
    if len(unknowns) <= SYMBOLIC_SOLVE_LIMIT:
        solutions = solve_linear_symbolic(system, max_unknowns=SYMBOLIC_SOLVE_LIMIT)
        bindings: list[tuple[str, SymExpr]] = []
        if use_cse:
            bindings, solutions = cse(solutions)
        stmts: list[Node] = list(retained)
        local_names = [name for name, _ in bindings] + list(unknowns)
        stmts.append(mk("LocalDecl", (), names=tuple(local_names)))
        for name, expr in bindings:
            stmts.append(mk("Assign", (mk("Identifier", (), name=name), to_ast(expr))))
        for u, sol in zip(unknowns, solutions):
            stmts.append(mk("Assign", (mk("Identifier", (), name=u), to_ast(sol))))
        for s, u in zip(involved, unknowns):
            stmts.append(mk("Assign", (_name_node(s), mk("Identifier", (), name=u))))
        return stmts
    children = [to_ast(e) for row in system.a for e in row]
    children += [to_ast(e) for e in system.b]
    return list(retained) + [
        mk(
            "LinearSolveNode",
            children,
            n=len(unknowns),
            unknowns=tuple(unknowns),
            states=tuple(involved),
        )
    ]


def lower_nonlinear_block(block: Node, state_names: set[str], atoms: "CallAtoms | None" = None) -> list[Node]:
    involved, residuals, retained = _algebraic_system(block, state_names, atoms)
    rename = {s: Variable(new_name(s)) for s in involved}
    unknowns = [new_name(s) for s in involved]
    residuals = [simplify(substitute(r, rename)) for r in residuals]
    return list(retained) + [_newton_node(unknowns, residuals, involved)]


# ---------------------------------------------------------------------------
# Automatic conductance derivation


def derive_conductance(program: Node, sink: DiagnosticSink) -> Node:
    """Insert a local analytic dI/dv and CONDUCTANCE hint for ohmic currents."""
    currents = written_currents(program)
    if not currents:
        return program

    blocks: list[Node] = []
    for block in program.children:
        if block.kind != "BreakpointBlock":
            blocks.append(block)
            continue
        body = block.children[-1]
        covered = {
            s.attrs["ion"] or s.attrs["var"]
            for s in body.children
            if s.kind == "ConductanceStmt"
        }
        assigns: dict[str, list[Node]] = {}
        assigned_names: set[str] = set()
        for stmt in body.children:
            if stmt.kind == "Assign" and stmt.children[0].kind == "Identifier":
                assigns.setdefault(stmt.children[0].attrs["name"], []).append(stmt)
                assigned_names.add(stmt.children[0].attrs["name"])

        inserts: list[tuple[Node, list[Node]]] = []  # (before stmt, new stmts)
        decls: list[str] = []
        for current_var, ion in currents:
            key = ion or current_var
            if key in covered:
                continue
            stmts = assigns.get(current_var, [])
            if len(stmts) != 1:
                continue
            stmt = stmts[0]
            expr = stmt.children[1]
            try:
                sym = from_ast(expr)
                slope = simplify(differentiate(sym, "v"))
            except SymError:
                continue
            if not is_free_of(slope, "v"):
                continue  # non-ohmic: runtime falls back to a numeric derivative
            deps = _free_states(sym, assigned_names - {current_var})
            if deps:
                continue  # feeds on values computed in this kernel; stay conservative
            g_name = f"g_{key}_auto"
            decls.append(g_name)
            inserts.append(
                (
                    stmt,
                    [
                        mk("Assign", (mk("Identifier", (), name=g_name), to_ast(slope))),
                        mk("ConductanceStmt", (), var=g_name, ion=ion or None),
                    ],
                )
            )

        if not inserts:
            blocks.append(block)
            continue
        new_stmts: list[Node] = [mk("LocalDecl", (), names=tuple(decls))]
        for stmt in body.children:
            for anchor, extra in inserts:
                if stmt is anchor:
                    new_stmts.extend(extra)
            new_stmts.append(stmt)
        new_body = body.with_children(tuple(new_stmts))
        blocks.append(block.with_children((*block.children[:-1], new_body)))
    return program.with_children(tuple(blocks))


# ---------------------------------------------------------------------------
# Whole-program lowering


def lower_program(
    program: Node,
    sink: DiagnosticSink,
    use_cse: bool = True,
    pade: bool = False,
    conductance: bool = True,
) -> Node:
    """Resolve every SOLVE statement into executable update statements."""
    program = rewrite(program, lambda n: None)
    if conductance:
        program = derive_conductance(program, sink)

    state_names = _declared_states(program)
    solves = _collect_solves(program, sink)

    params = _param_defaults(program)
    functions = {
        b.attrs["name"]: b
        for b in program.children
        if b.kind in ("ProcedureBlock", "FunctionBlock")
    }
    replaced: dict[str, Node] = {}  # target block name -> lowered block
    for solve, host_kind in solves:
        target_name = solve.attrs["target"]
        method = solve.attrs["method"]
        target = find_block_named(program, target_name)
        if target is None:
            raise SolverError(
                [Diagnostic("error", f"SOLVE target {target_name!r} not found", solve.span)]
            )
        target = _expand_loops_in_block(target, params)
        replaced[target_name] = _lower_target(
            target, method, state_names, sink, use_cse, pade, functions
        )

    blocks: list[Node] = []
    for block in program.children:
        name = block.attrs.get("name")
        if name in replaced:
            blocks.append(replaced[name])
            continue
        if block.kind == "BreakpointBlock":
            blocks.append(_strip_solves(block, annotate=True))
        elif block.kind == "InitialBlock":
            blocks.append(_inline_solves(block, replaced, sink))
        else:
            blocks.append(block)
    return program.with_children(tuple(blocks))


def _declared_states(program: Node) -> set[str]:
    out: set[str] = set()
    for block in program.children:
        if block.kind == "StateBlock":
            for decl in block.children:
                if decl.attrs["size"] is None:
                    out.add(decl.attrs["name"])
                else:
                    for k in range(decl.attrs["size"]):
                        out.add(f"{decl.attrs['name']}[{k}]")
    return out


def _collect_solves(program: Node, sink: DiagnosticSink) -> list[tuple[Node, str]]:
    out: list[tuple[Node, str]] = []
    for block in program.children:
        if block.kind in ("BreakpointBlock", "InitialBlock"):
            for stmt in block.children[-1].children:
                if stmt.kind == "Solve":
                    out.append((stmt, block.kind))
    seen: set[str] = set()
    for solve, _ in out:
        name = solve.attrs["target"]
        if name in seen:
            raise SolverError(
                [Diagnostic("error", f"block {name!r} is solved more than once", solve.span)]
            )
        seen.add(name)
    return out


def _lower_target(
    target: Node,
    method: str | None,
    state_names: set[str],
    sink: DiagnosticSink,
    use_cse: bool,
    pade: bool,
    functions: dict[str, Node] | None = None,
) -> Node:
    atoms = CallAtoms(functions or {}, state_names)
    if target.kind == "KineticBlock":
        if method not in ("sparse", "derivimplicit"):
            raise SolverError(
                [
                    Diagnostic(
                        "error",
                        f"KINETIC block {target.attrs['name']!r} needs METHOD sparse or derivimplicit",
                    )
                ]
            )
        target = kinetic_to_derivative(target, sink, atoms)

    if target.kind == "DerivativeBlock":
        if method is None:
            raise SolverError(
                [Diagnostic("error", f"SOLVE of {target.attrs['name']!r} needs a METHOD")]
            )
        ode, retained, positions = extract_odes(target, atoms)
        classify(ode, method)
        body_stmts = list(target.children[-1].children)
        if method == "cnexp":
            out: list[Node] = []
            for stmt in body_stmts:
                if stmt.kind == "Assign" and stmt.children[0].kind == "DerivVar":
                    name = _deriv_target_name(stmt.children[0])
                    out.extend(solve_cnexp(name, ode.derivs[name], pade=pade))
                elif stmt.kind == "Conserve":
                    pass
                else:
                    out.append(stmt)
        else:
            lower = lower_sparse(ode, use_cse=use_cse) if method == "sparse" else lower_derivimplicit(ode)
            out = list(retained) + lower
        out = [atoms.restore(s) for s in out]
        body = mk("StatementBlock", tuple(out))
        return mk("DerivativeBlock", (body,), target.span, name=target.attrs["name"], lowered=True)

    if target.kind == "LinearBlock":
        stmts = [atoms.restore(s) for s in lower_linear_block(target, state_names, use_cse, atoms)]
        body = mk("StatementBlock", tuple(stmts))
        return mk("LinearBlock", (body,), target.span, name=target.attrs["name"], lowered=True)

    if target.kind == "NonlinearBlock":
        stmts = [atoms.restore(s) for s in lower_nonlinear_block(target, state_names, atoms)]
        body = mk("StatementBlock", tuple(stmts))
        return mk("NonlinearBlock", (body,), target.span, name=target.attrs["name"], lowered=True)

    raise SolverError(
        [Diagnostic("error", f"cannot SOLVE block of kind {target.kind}", target.span)]
    )


def _strip_solves(block: Node, annotate: bool) -> Node:
    body = block.children[-1]
    solves = [s for s in body.children if s.kind == "Solve"]
    rest = tuple(s for s in body.children if s.kind != "Solve")
    new_block = block.with_children((*block.children[:-1], body.with_children(rest)))
    if annotate and solves:
        new_block = new_block.with_attrs(
            solve_targets=tuple((s.attrs["target"], s.attrs["method"]) for s in solves)
        )
    return new_block


def _inline_solves(block: Node, replaced: dict[str, Node], sink: DiagnosticSink) -> Node:
    body = block.children[-1]
    out: list[Node] = []
    for stmt in body.children:
        if stmt.kind == "Solve":
            lowered = replaced.get(stmt.attrs["target"])
            if lowered is None:
                raise SolverError(
                    [Diagnostic("error", f"SOLVE target {stmt.attrs['target']!r} not found", stmt.span)]
                )
            out.extend(lowered.children[-1].children)
        else:
            out.append(stmt)
    return block.with_children((*block.children[:-1], body.with_children(tuple(out))))
