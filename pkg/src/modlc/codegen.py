"""Target code emission: scalar C-like kernels and the SPMD variant.

Both backends share one kernel emitter; they differ only in the loop
construct, kernel export markers, atomic-accumulate markers and the header
boilerplate (a normalizing diff over the two texts is empty). Emitted text
is self-contained and deterministic; semantic correctness is certified by
the reference interpreter, not by compiling the output.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

from .ast_nodes import Node, format_double, iter_nodes, number_text
from .diagnostics import DiagnosticSink
from .layout import Kernel, MechanismLayout
from .odes import CONDUCTANCE_PERTURBATION, linear_parts, newton_parts
from .symtab import BUILTIN_FUNCTIONS

KERNEL_ORDER = ("initialize", "state_update", "current_update")


@dataclass(frozen=True)
class EmittedUnit:
    backend: str  # scalar | simd | nmodl
    filename: str
    text: str


def mangle(name: str) -> str:
    return name.replace("[", "_").replace("]", "")


_C_PREC = {
    "||": 1,
    "&&": 2,
    "==": 3,
    "!=": 3,
    "<": 4,
    "<=": 4,
    ">": 4,
    ">=": 4,
    "+": 5,
    "-": 5,
    "*": 6,
    "/": 6,
}
_C_UNARY = 7


class _Backend:
    name = "scalar"
    header_note = "scalar backend"

    def kernel_open(self, mech: str, kernel: str) -> list[str]:
        return [
            f"void {mech}_{kernel}({mech}_data *md) {{",
            "    /* independent iterations */",
            "    for (long id = 0; id < md->n; id++) {",
        ]

    def accumulate(self, target: str, value: str) -> str:
        return f"{target} += {value};"


class _SimdBackend(_Backend):
    name = "simd"
    header_note = "simd backend"

    def kernel_open(self, mech: str, kernel: str) -> list[str]:
        return [
            f"export void {mech}_{kernel}(uniform {mech}_data *md) {{",
            "    foreach (id = 0 ... md->n) {",
        ]

    def accumulate(self, target: str, value: str) -> str:
        return f"ATOMIC_ADD({target}, {value});"


class _Emitter:
    def __init__(self, layout: MechanismLayout, backend: _Backend):
        self.layout = layout
        self.backend = backend
        self.mech = layout.mechanism
        self.slots = set(layout.slot_names())
        self.scalars = set(layout.global_scalars)
        self.lines: list[str] = []
        self.depth = 0
        self.needs_lu = False
        self.dynamic_arrays: set[str] = set()
        self._scan_dynamic()

    def out(self, text: str = "") -> None:
        self.lines.append("    " * self.depth + text if text else "")

    def _scan_dynamic(self) -> None:
        for kernel in self.layout.kernels.values():
            for stmt in kernel.statements:
                for node in iter_nodes(stmt):
                    if node.kind == "IndexedName" and node.children[0].kind != "Number":
                        self.dynamic_arrays.add(node.attrs["name"])
                    elif node.kind == "LinearSolveNode":
                        self.needs_lu = True
                    elif node.kind == "NewtonSolveNode" and node.attrs["n"] > 4:
                        self.needs_lu = True

    # -- expressions -----------------------------------------------------

    def expr(self, node: Node, locals_: set[str], context: int = 0) -> str:
        kind = node.kind
        if kind == "Number":
            return number_text(node)
        if kind == "Identifier":
            return self.name_ref(node.attrs["name"], locals_)
        if kind == "IndexedName":
            index = node.children[0]
            if index.kind == "Number":
                return self.name_ref(
                    f"{node.attrs['name']}[{int(index.attrs['value'])}]", locals_
                )
            idx = self.expr(index, locals_)
            return f"{self.mech}_{mangle(node.attrs['name'])}_elem(md, (long)({idx}))[id]"
        if kind == "Binary":
            op = node.attrs["op"]
            if op == "^":
                left = self.expr(node.children[0], locals_)
                right = self.expr(node.children[1], locals_)
                return f"pow({left}, {right})"
            prec = _C_PREC[op]
            left = self.expr(node.children[0], locals_, prec)
            right = self.expr(node.children[1], locals_, prec + 1)
            text = f"{left} {op} {right}"
            return f"({text})" if prec < context else text
        if kind == "Unary":
            op = node.attrs["op"]
            inner = self.expr(node.children[0], locals_, _C_UNARY)
            text = f"{op}{inner}"
            return f"({text})" if _C_UNARY < context else text
        if kind == "Call":
            name = node.attrs["name"]
            args = [self.expr(a, locals_) for a in node.children]
            if name in BUILTIN_FUNCTIONS:
                return f"{name}({', '.join(args)})"
            return f"{self.mech}_{name}({', '.join(['md', 'id'] + args)})"
        raise ValueError(f"cannot emit expression node {kind}")

    def name_ref(self, name: str, locals_: set[str]) -> str:
        if name in locals_:
            return mangle(name)
        if name == "v":
            return "md->v[id]"
        if name in self.slots:
            return f"md->{mangle(name)}[id]"
        if name in self.scalars:
            return f"md->{name}"
        return mangle(name)  # kernel-local temporary

    # -- statements --------------------------------------------------------

    def statement(self, node: Node, locals_: set[str]) -> None:
        kind = node.kind
        if kind == "Assign":
            target, value = node.children
            if target.kind == "DerivVar":
                raise ValueError("raw derivative statement reached codegen; lower first")
            lhs = self.expr(target, locals_)
            self.out(f"{lhs} = {self.expr(value, locals_)};")
        elif kind == "LocalDecl":
            pass  # hoisted into the declaration line
        elif kind == "ExprStatement":
            self.out(f"{self.expr(node.children[0], locals_)};")
        elif kind == "ConductanceStmt":
            self.out(f"/* conductance hint: {node.attrs['var']} */")
        elif kind == "If":
            self.out(f"if ({self.expr(node.children[0], locals_)}) {{")
            self.depth += 1
            for stmt in node.children[1].children:
                self.statement(stmt, locals_)
            self.depth -= 1
            if len(node.children) == 3:
                self.out("} else {")
                self.depth += 1
                for stmt in node.children[2].children:
                    self.statement(stmt, locals_)
                self.depth -= 1
            self.out("}")
        elif kind == "While":
            self.out(f"while ({self.expr(node.children[0], locals_)}) {{")
            self.depth += 1
            for stmt in node.children[1].children:
                self.statement(stmt, locals_)
            self.depth -= 1
            self.out("}")
        elif kind == "FromLoop":
            var = mangle(node.attrs["name"])
            lo = self.expr(node.children[0], locals_)
            hi = self.expr(node.children[1], locals_)
            self.out(f"for ({var} = {lo}; {var} <= {hi}; {var} += 1) {{")
            self.depth += 1
            for stmt in node.children[2].children:
                self.statement(stmt, locals_)
            self.depth -= 1
            self.out("}")
        elif kind == "Verbatim":
            self.out("/* user-supplied verbatim block, pasted as written */")
            for line in node.attrs["text"].strip("\n").splitlines():
                self.out(line)
        elif kind == "NewtonSolveNode":
            self.newton(node, locals_)
        elif kind == "LinearSolveNode":
            self.linear(node, locals_)
        else:
            raise ValueError(f"cannot emit statement {kind}")

    # -- solver nodes ------------------------------------------------------

    def newton(self, node: Node, locals_: set[str]) -> None:
        residuals, jac = newton_parts(node)
        unknowns = [mangle(u) for u in node.attrs["unknowns"]]
        states = node.attrs["states"]
        k = node.attrs["n"]
        tol = format_double(node.attrs["tol"])
        max_iter = node.attrs["max_iter"]
        inner = locals_ | set(node.attrs["unknowns"])
        self.out("{")
        self.depth += 1
        self.out(f"double f_res[{k}], jac_m[{k}][{k}], dx[{k}];")
        self.out("long iter = 0;")
        for u, s in zip(unknowns, states):
            self.out(f"{u} = {self.name_ref(s, locals_)};")
        self.out("for (;;) {")
        self.depth += 1
        for i, res in enumerate(residuals):
            self.out(f"f_res[{i}] = {self.expr(res, inner)};")
        norm = " , ".join(f"fabs(f_res[{i}])" for i in range(k))
        self.out(f"double norm = {_fmax_chain([f'fabs(f_res[{i}])' for i in range(k)])};")
        self.out(f"if (norm <= {tol}) break;")
        self.out(f"if (iter >= {max_iter}) {{ md->solver_failures++; break; }}")
        for i in range(k):
            for j in range(k):
                self.out(f"jac_m[{i}][{j}] = {self.expr(jac[i][j], inner)};")
        if k <= 4:
            self.out(f"double det = {_det_text('jac_m', list(range(k)), list(range(k)))};")
            for j in range(k):
                self.out(f"dx[{j}] = ({_adjugate_row_text(k, j)}) / det;")
        else:
            self.needs_lu = True
            self.out(f"modlc_lu_solve(&jac_m[0][0], f_res, dx, {k});")
        for j, u in enumerate(unknowns):
            self.out(f"{u} -= dx[{j}];")
        self.out("iter++;")
        self.depth -= 1
        self.out("}")
        for u, s in zip(unknowns, states):
            self.out(f"{self.name_ref(s, locals_)} = {u};")
        self.depth -= 1
        self.out("}")

    def linear(self, node: Node, locals_: set[str]) -> None:
        a, b = linear_parts(node)
        unknowns = [mangle(u) for u in node.attrs["unknowns"]]
        states = node.attrs["states"]
        k = node.attrs["n"]
        self.needs_lu = True
        self.out("{")
        self.depth += 1
        self.out(f"double a_m[{k}][{k}], b_v[{k}], x_v[{k}];")
        for i in range(k):
            for j in range(k):
                self.out(f"a_m[{i}][{j}] = {self.expr(a[i][j], locals_)};")
        for i in range(k):
            self.out(f"b_v[{i}] = {self.expr(b[i], locals_)};")
        self.out(f"modlc_lu_solve(&a_m[0][0], b_v, x_v, {k});")
        for j, s in enumerate(states):
            self.out(f"{self.name_ref(s, locals_)} = x_v[{j}];")
        self.depth -= 1
        self.out("}")

    # -- kernels -----------------------------------------------------------

    def kernel_locals(self, kernel: Kernel) -> list[str]:
        names: list[str] = []

        def note(name: str) -> None:
            if name not in names and name not in self.slots and name not in self.scalars and name != "v":
                names.append(name)

        for stmt in kernel.statements:
            for node in iter_nodes(stmt):
                if node.kind == "LocalDecl":
                    for n in node.attrs["names"]:
                        note(n)
                elif node.kind == "FromLoop":
                    note(node.attrs["name"])
                elif node.kind in ("NewtonSolveNode", "LinearSolveNode"):
                    for n in node.attrs["unknowns"]:
                        note(n)
                elif node.kind == "Assign" and node.children[0].kind == "Identifier":
                    note(node.children[0].attrs["name"])
        return names

    def emit_kernel(self, kernel: Kernel) -> None:
        for line in self.backend.kernel_open(self.mech, kernel.name):
            self.out(line)
        self.depth += 2
        local_names = self.kernel_locals(kernel)
        locals_ = set(local_names)
        if local_names:
            self.out("double " + ", ".join(mangle(n) for n in local_names) + ";")
        if kernel.name == "current_update" and self.layout.currents:
            self.emit_current_body(kernel, locals_)
        else:
            for stmt in kernel.statements:
                self.statement(stmt, locals_)
        self.depth -= 2
        self.out("    }")
        self.out("}")

    def emit_current_body(self, kernel: Kernel, locals_: set[str]) -> None:
        currents = self.layout.currents
        if self.layout.analytic_conductance:
            for stmt in kernel.statements:
                self.statement(stmt, locals_)
            for var, _ion in currents:
                self.out(self.backend.accumulate("md->i_acc[id]", self.name_ref(var, locals_)))
            g_terms = " + ".join(
                self.name_ref(self.layout.conductance_hints[var], locals_)
                for var, _ion in currents
            )
            self.out(self.backend.accumulate("md->g_acc[id]", g_terms))
            return
        h = format_double(CONDUCTANCE_PERTURBATION)
        written = self._written_slots(kernel)
        self.out("/* two-point numeric conductance: evaluate at v+h, restore, evaluate at v */")
        self.out("double v_save = md->v[id];")
        for name in written:
            self.out(f"double save_{mangle(name)} = {self.name_ref(name, locals_)};")
        self.out(f"md->v[id] = v_save + {h};")
        for stmt in kernel.statements:
            self.statement(stmt, locals_)
        shifted = " + ".join(self.name_ref(var, locals_) for var, _ in currents)
        self.out(f"double i_shifted = {shifted};")
        self.out("md->v[id] = v_save;")
        for name in written:
            self.out(f"{self.name_ref(name, locals_)} = save_{mangle(name)};")
        for stmt in kernel.statements:
            self.statement(stmt, locals_)
        base = " + ".join(self.name_ref(var, locals_) for var, _ in currents)
        self.out(f"double i_base = {base};")
        self.out(self.backend.accumulate("md->i_acc[id]", "i_base"))
        self.out(self.backend.accumulate("md->g_acc[id]", f"(i_shifted - i_base) / {h}"))

    def _written_slots(self, kernel: Kernel) -> list[str]:
        written: list[str] = []
        for stmt in kernel.statements:
            for node in iter_nodes(stmt):
                if node.kind == "Assign":
                    target = node.children[0]
                    name = None
                    if target.kind == "Identifier":
                        name = target.attrs["name"]
                    elif target.kind == "IndexedName" and target.children[0].kind == "Number":
                        name = f"{target.attrs['name']}[{int(target.children[0].attrs['value'])}]"
                    if name in self.slots and name not in written:
                        written.append(name)
        return written

    # -- helper functions --------------------------------------------------

    def emit_function(self, name: str, block: Node) -> None:
        formals = [c.attrs["name"] for c in block.children if c.kind == "FormalArg"]
        args = "".join(f", double {mangle(f)}" for f in formals)
        self.out(f"static double {self.mech}_{name}({self.mech}_data *md, long id{args}) {{")
        self.depth += 1
        local_names: list[str] = []
        for node in iter_nodes(block.children[-1]):
            if node.kind == "LocalDecl":
                for n in node.attrs["names"]:
                    if n not in local_names:
                        local_names.append(n)
            elif node.kind == "FromLoop" and node.attrs["name"] not in local_names:
                local_names.append(node.attrs["name"])
        if block.kind == "FunctionBlock":
            local_names.insert(0, name)
        locals_ = set(local_names) | set(formals)
        if local_names:
            self.out("double " + ", ".join(mangle(n) for n in local_names) + ";")
        if block.kind == "FunctionBlock":
            self.out(f"{mangle(name)} = 0.0;")
        for stmt in block.children[-1].children:
            self.statement(stmt, locals_)
        self.out(f"return {mangle(name) if block.kind == 'FunctionBlock' else '0.0'};")
        self.depth -= 1
        self.out("}")
        self.out()

    def emit_elem_helpers(self) -> None:
        for base in sorted(self.dynamic_arrays):
            elems = sorted(
                (s for s in self.slots if s.startswith(base + "[")),
                key=lambda s: int(s[len(base) + 1 : -1]),
            )
            self.out(f"static double *{self.mech}_{mangle(base)}_elem({self.mech}_data *md, long k) {{")
            self.depth += 1
            self.out("switch (k) {")
            self.depth += 1
            for i, slot in enumerate(elems):
                self.out(f"case {i}: return md->{mangle(slot)};")
            self.out("default: return md->" + mangle(elems[-1]) + ";")
            self.depth -= 1
            self.out("}")
            self.depth -= 1
            self.out("}")
            self.out()

    # -- whole unit --------------------------------------------------------

    def emit_unit(self) -> str:
        mech = self.mech
        self.out(f"/* mechanism: {mech} ({self.backend.header_note}) */")
        self.out()
        self.out("#include <math.h>")
        self.out()
        self.out("typedef struct {")
        self.depth += 1
        self.out("long n;")
        self.out("long solver_failures;")
        for name in sorted(self.scalars):
            self.out(f"double {name};")
        self.out("double *v;")
        self.out("double *i_acc;")
        self.out("double *g_acc;")
        for slot in self.layout.slots:
            self.out(f"double *{mangle(slot.name)};  /* slot {slot.index}: {slot.role} */")
        self.depth -= 1
        self.out(f"}} {mech}_data;")
        self.out()
        for body in self.layout.verbatim_blocks:
            self.out("/* user-supplied verbatim block, pasted as written */")
            for line in body.strip("\n").splitlines():
                self.lines.append(line)
            self.out()
        if self.needs_lu:
            self._emit_lu_helper()
        self.emit_elem_helpers()
        referenced = self._referenced_functions()
        for name in referenced:
            self.emit_function(name, self.layout.functions[name])
        for kname in KERNEL_ORDER:
            kernel = self.layout.kernels.get(kname)
            if kernel is None:
                continue
            self.emit_kernel(kernel)
            self.out()
        return "\n".join(self.lines).rstrip() + "\n"

    def _referenced_functions(self) -> list[str]:
        order: list[str] = []
        work: list[Node] = []
        for kernel in self.layout.kernels.values():
            work.extend(kernel.statements)
        seen: set[str] = set()
        while work:
            stmt = work.pop(0)
            for node in iter_nodes(stmt):
                if node.kind == "Call" and node.attrs["name"] in self.layout.functions:
                    name = node.attrs["name"]
                    if name not in seen:
                        seen.add(name)
                        order.append(name)
                        work.extend(self.layout.functions[name].children[-1].children)
        # emit callees before callers so the C text needs no forward decls
        ordered: list[str] = []
        remaining = list(order)
        while remaining:
            progressed = False
            for name in list(remaining):
                callees = {
                    n.attrs["name"]
                    for n in iter_nodes(self.layout.functions[name].children[-1])
                    if n.kind == "Call" and n.attrs["name"] in self.layout.functions
                }
                if callees <= set(ordered) | {name}:
                    ordered.append(name)
                    remaining.remove(name)
                    progressed = True
            if not progressed:  # recursion; order alphabetically and bail
                ordered.extend(sorted(remaining))
                break
        return ordered

    def _emit_lu_helper(self) -> None:
        for line in _LU_HELPER.splitlines():
            self.out(line)
        self.out()


def _fmax_chain(terms: list[str]) -> str:
    text = terms[0]
    for t in terms[1:]:
        text = f"fmax({text}, {t})"
    return text


def _perm_sign(perm: tuple[int, ...]) -> int:
    sign = 1
    for i in range(len(perm)):
        for j in range(i + 1, len(perm)):
            if perm[i] > perm[j]:
                sign = -sign
    return sign


def _det_text(name: str, rows: list[int], cols: list[int]) -> str:
    k = len(rows)
    if k == 0:
        return "1.0"
    terms: list[str] = []
    for perm in permutations(range(k)):
        sign = _perm_sign(perm)
        prod = "*".join(f"{name}[{rows[i]}][{cols[perm[i]]}]" for i in range(k))
        terms.append(("+ " if sign > 0 else "- ") + prod)
    text = " ".join(terms)
    return text[2:] if text.startswith("+ ") else "-" + text[2:]


def _adjugate_row_text(k: int, j: int) -> str:
    terms: list[str] = []
    for i in range(k):
        rows = [r for r in range(k) if r != i]
        cols = [c for c in range(k) if c != j]
        minor = _det_text("jac_m", rows, cols)
        sign = "-" if (i + j) % 2 else "+"
        terms.append(f"{sign} ({minor})*f_res[{i}]")
    text = " ".join(terms)
    return text[2:] if text.startswith("+ ") else text


_LU_HELPER = """\
static void modlc_lu_solve(double *a, double *b, double *x, long k) {
    /* partial-pivot LU on a row-major k*k matrix; a and b are clobbered */
    for (long col = 0; col < k; col++) {
        long piv = col;
        for (long r = col + 1; r < k; r++) {
            if (fabs(a[r*k + col]) > fabs(a[piv*k + col])) piv = r;
        }
        if (piv != col) {
            for (long c = 0; c < k; c++) {
                double t = a[col*k + c]; a[col*k + c] = a[piv*k + c]; a[piv*k + c] = t;
            }
            double tb = b[col]; b[col] = b[piv]; b[piv] = tb;
        }
        for (long r = col + 1; r < k; r++) {
            double f = a[r*k + col] / a[col*k + col];
            for (long c = col; c < k; c++) a[r*k + c] -= f * a[col*k + c];
            b[r] -= f * b[col];
        }
    }
    for (long row = k - 1; row >= 0; row--) {
        double acc = b[row];
        for (long c = row + 1; c < k; c++) acc -= a[row*k + c] * x[c];
        x[row] = acc / a[row*k + row];
    }
}"""


def emit_scalar(layout: MechanismLayout) -> EmittedUnit:
    text = _Emitter(layout, _Backend()).emit_unit()
    return EmittedUnit("scalar", f"{layout.mechanism}.scalar.c-like", text)


def emit_simd(layout: MechanismLayout, sink: DiagnosticSink | None = None) -> EmittedUnit:
    """SPMD rendering; falls back to scalar text when VERBATIM is present."""
    has_verbatim = (
        bool(layout.verbatim_blocks)
        or any(
            node.kind == "Verbatim"
            for kernel in layout.kernels.values()
            for stmt in kernel.statements
            for node in iter_nodes(stmt)
        )
        or any(
            node.kind == "Verbatim"
            for fn in layout.functions.values()
            for node in iter_nodes(fn)
        )
    )
    if has_verbatim:
        if sink is not None:
            sink.warning(
                f"mechanism {layout.mechanism} contains VERBATIM; emitting scalar fallback"
            )
        scalar = emit_scalar(layout)
        text = "/* VERBATIM present: scalar fallback emitted instead of simd */\n" + scalar.text
        return EmittedUnit("scalar", f"{layout.mechanism}.simd.c-like", text)
    text = _Emitter(layout, _SimdBackend()).emit_unit()
    return EmittedUnit("simd", f"{layout.mechanism}.simd.c-like", text)


def emit_nmodl(program: Node, mechanism: str) -> EmittedUnit:
    from .printer import emit_nmodl_text

    return EmittedUnit("nmodl", f"{mechanism}.opt.mod", emit_nmodl_text(program))


def normalize_simd_text(text: str) -> str:
    """Rewrite the SPMD mechanics back to scalar form for the whitelist diff."""
    out: list[str] = []
    for line in text.splitlines():
        stripped = line.strip()
        if stripped.startswith("/* mechanism:"):
            line = line.replace("(simd backend)", "(scalar backend)")
        if "export void" in line:
            line = line.replace("export void", "void").replace("uniform ", "")
        if "foreach (id = 0 ... md->n)" in line:
            indent = line[: len(line) - len(line.lstrip())]
            out.append(f"{indent}/* independent iterations */")
            line = line.replace("foreach (id = 0 ... md->n)", "for (long id = 0; id < md->n; id++)")
        if "ATOMIC_ADD(" in line:
            indent = line[: len(line) - len(line.lstrip())]
            inner = stripped[len("ATOMIC_ADD(") : -2]
            target, value = inner.split(", ", 1)
            line = f"{indent}{target} += {value};"
        out.append(line)
    return "\n".join(out) + ("\n" if text.endswith("\n") else "")
