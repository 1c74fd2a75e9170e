"""Structure-of-arrays instance layout and kernel extraction.

After all passes and solver lowering, every surviving per-instance variable
(RANGE parameter, ASSIGNED, STATE, ion variable) gets one dense slot; each
slot becomes one contiguous array at runtime. Kernels are derived as
initialize <- INITIAL, state_update <- the solved DERIVATIVE/KINETIC blocks,
current_update <- BREAKPOINT minus its SOLVE statements.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ast_nodes import Node, iter_nodes
from .diagnostics import Diagnostic, SemanticError
from .symtab import (
    P_ASSIGNED,
    P_GLOBAL,
    P_ION,
    P_PARAMETER,
    P_RANGE,
    P_STATE,
    build_symbol_tables,
    find_blocks,
    global_symbols,
    is_point_process,
    mechanism_name,
    use_ion_statements,
    written_currents,
)

ROLE_PARAMETER = "parameter"
ROLE_ASSIGNED = "assigned"
ROLE_STATE = "state"
ROLE_ION = "ion"


@dataclass(frozen=True)
class Slot:
    name: str
    role: str
    index: int
    default: float | None = None
    ion_kind: str | None = None  # "reversal" | "current" | "conc" | None


@dataclass
class Kernel:
    name: str  # initialize | state_update | current_update
    statements: tuple[Node, ...]


@dataclass
class MechanismLayout:
    mechanism: str
    slots: list[Slot]
    global_scalars: dict[str, float]  # dt, celsius, non-range parameters, GLOBALs
    kernels: dict[str, Kernel]
    functions: dict[str, Node]  # retained FUNCTION/PROCEDURE blocks
    currents: list[tuple[str, str]]  # (current var, ion) accumulation targets
    conductance_hints: dict[str, str]  # current var -> conductance variable
    point_process: bool = False
    verbatim_blocks: tuple[str, ...] = ()  # file-scope VERBATIM bodies, in order

    def slot_names(self) -> list[str]:
        return [s.name for s in self.slots]

    def slot(self, name: str) -> Slot | None:
        for s in self.slots:
            if s.name == name:
                return s
        return None

    @property
    def analytic_conductance(self) -> bool:
        """All contributed currents have conductance hints; no numeric fallback."""
        return all(var in self.conductance_hints for var, _ in self.currents)


def _expand_decl(decl: Node) -> list[str]:
    size = decl.attrs.get("size")
    if size is None:
        return [decl.attrs["name"]]
    return [f"{decl.attrs['name']}[{k}]" for k in range(size)]


def build_layout(program: Node, filename: str = "<input>") -> MechanismLayout:
    """Derive the instance layout and kernels from a fully lowered program."""
    build_symbol_tables(program, filename)
    symbols = global_symbols(program)
    ion_kinds = _ion_kinds(program)

    slots: list[Slot] = []
    seen: set[str] = set()

    def add(name: str, role: str, default: float | None = None) -> None:
        if name in seen or name == "v":
            return
        seen.add(name)
        slots.append(Slot(name, role, len(slots), default, ion_kinds.get(name)))

    global_scalars: dict[str, float] = {"dt": 0.025, "celsius": 6.3}

    for block in find_blocks(program, "ParamBlock"):
        for decl in block.children:
            sym = symbols[decl.attrs["name"]]
            default = sym.default if sym.default is not None else 0.0
            if sym.has(P_RANGE):
                add(decl.attrs["name"], ROLE_PARAMETER, default)
            else:
                global_scalars[decl.attrs["name"]] = default
    for block in find_blocks(program, "AssignedBlock"):
        for decl in block.children:
            sym = symbols[decl.attrs["name"]]
            if sym.has(P_GLOBAL):
                global_scalars.setdefault(decl.attrs["name"], 0.0)
                continue
            for name in _expand_decl(decl):
                add(name, ROLE_ASSIGNED)
    for block in find_blocks(program, "StateBlock"):
        for decl in block.children:
            for name in _expand_decl(decl):
                add(name, ROLE_STATE)
    for stmt in use_ion_statements(program):
        for name in stmt.attrs["reads"] + stmt.attrs["writes"]:
            add(name, ROLE_ION)
    for var, _ion in written_currents(program):
        add(var, ROLE_ION)

    kernels: dict[str, Kernel] = {}
    functions: dict[str, Node] = {}
    solve_targets: tuple[str, ...] = ()

    for block in program.children:
        if block.kind == "InitialBlock":
            kernels["initialize"] = Kernel("initialize", block.children[-1].children)
        elif block.kind == "BreakpointBlock":
            solve_targets = block.attrs.get("solve_targets", ())
            stmts = tuple(s for s in block.children[-1].children if s.kind != "Solve")
            kernels["current_update"] = Kernel("current_update", stmts)
        elif block.kind in ("ProcedureBlock", "FunctionBlock"):
            functions[block.attrs["name"]] = block

    state_stmts: list[Node] = []
    for target, _method in solve_targets:
        for block in program.children:
            if block.attrs.get("name") == target and block.kind in (
                "DerivativeBlock",
                "KineticBlock",
                "LinearBlock",
                "NonlinearBlock",
            ):
                state_stmts.extend(block.children[-1].children)
    kernels.setdefault("initialize", Kernel("initialize", ()))
    kernels["state_update"] = Kernel("state_update", tuple(state_stmts))
    kernels.setdefault("current_update", Kernel("current_update", ()))

    currents = written_currents(program)
    hints = _conductance_hints(program, currents)
    verbatim = tuple(
        b.attrs["text"] for b in program.children if b.kind == "Verbatim"
    )

    layout = MechanismLayout(
        mechanism=mechanism_name(program),
        slots=slots,
        global_scalars=global_scalars,
        kernels=kernels,
        functions=functions,
        currents=currents,
        conductance_hints=hints,
        point_process=is_point_process(program),
        verbatim_blocks=verbatim,
    )
    _check_kernel_references(program, layout, filename)
    return layout


def _ion_kinds(program: Node) -> dict[str, str]:
    kinds: dict[str, str] = {}
    for stmt in use_ion_statements(program):
        ion = stmt.attrs["name"]
        for name in stmt.attrs["reads"] + stmt.attrs["writes"]:
            if name == "e" + ion:
                kinds[name] = "reversal"
            elif name == "i" + ion:
                kinds[name] = "current"
            elif name in (ion + "i", ion + "o"):
                kinds[name] = "conc"
    for block in find_blocks(program, "NeuronBlock"):
        for stmt in block.children:
            if stmt.kind == "NonspecificCurrent":
                for name in stmt.attrs["names"]:
                    kinds[name] = "current"
    return kinds


def _conductance_hints(program: Node, currents: list[tuple[str, str]]) -> dict[str, str]:
    hints: dict[str, str] = {}
    for block in find_blocks(program, "BreakpointBlock"):
        for stmt in block.children[-1].children:
            if stmt.kind != "ConductanceStmt":
                continue
            ion = stmt.attrs.get("ion")
            for var, cur_ion in currents:
                if ion is not None and cur_ion == ion:
                    hints[var] = stmt.attrs["var"]
                elif ion is None and cur_ion == "":
                    hints[var] = stmt.attrs["var"]
    return hints


def _check_kernel_references(program: Node, layout: MechanismLayout, filename: str) -> None:
    """Every kernel variable reference must resolve to a slot, LOCAL, global
    scalar or the voltage array."""
    known = set(layout.slot_names()) | set(layout.global_scalars) | {"v"}
    problems: list[Diagnostic] = []
    for kernel in layout.kernels.values():
        local: set[str] = set()
        for stmt in kernel.statements:
            for node in iter_nodes(stmt):
                if node.kind == "LocalDecl":
                    local.update(node.attrs["names"])
                elif node.kind == "FromLoop":
                    local.add(node.attrs["name"])
                elif node.kind in ("NewtonSolveNode", "LinearSolveNode"):
                    local.update(node.attrs["unknowns"])
                elif node.kind == "Assign":
                    target = node.children[0]
                    base = target.children[0] if target.kind == "DerivVar" else target
                    name = base.attrs.get("name")
                    if name is not None and name not in known and _plain_name(base) not in known:
                        local.add(name)  # kernel-local temporary
        for stmt in kernel.statements:
            for node in iter_nodes(stmt):
                if node.kind == "Identifier":
                    name = node.attrs["name"]
                    if name not in known and name not in local and name not in layout.functions:
                        from .symtab import BUILTIN_FUNCTIONS

                        if name not in BUILTIN_FUNCTIONS:
                            problems.append(
                                Diagnostic(
                                    "error",
                                    f"kernel {kernel.name} references unknown name {name!r}",
                                    node.span,
                                    filename,
                                )
                            )
                elif node.kind == "IndexedName":
                    idx = node.children[0]
                    if idx.kind == "Number":
                        full = f"{node.attrs['name']}[{int(idx.attrs['value'])}]"
                        if full not in known:
                            problems.append(
                                Diagnostic(
                                    "error",
                                    f"kernel {kernel.name} references unknown slot {full!r}",
                                    node.span,
                                    filename,
                                )
                            )
    if problems:
        raise SemanticError(problems)


def _plain_name(node: Node) -> str:
    if node.kind == "IndexedName" and node.children[0].kind == "Number":
        return f"{node.attrs['name']}[{int(node.children[0].attrs['value'])}]"
    return node.attrs.get("name", "")
