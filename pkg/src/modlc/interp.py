"""Reference interpreter over structure-of-arrays instance data.

Statements are compiled once per kernel into closures operating on whole
instance arrays; per-instance control flow (IF/WHILE) runs under boolean
lane masks. Arithmetic is IEEE double throughout with statement-order
evaluation and no re-association, so two pipelines producing algebraically
identical ASTs produce bitwise identical trajectories.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .ast_nodes import Node
from .layout import Kernel, MechanismLayout
from .odes import CONDUCTANCE_PERTURBATION, linear_parts, newton_parts
from .symtab import BUILTIN_FUNCTIONS

WHILE_CAP = 10_000
CALL_DEPTH_CAP = 100

V_RANGE = (-80.0, 40.0)
STATE_RANGE = (0.0, 1.0)
CONC_RANGE = (1e-9, 1e-3)
REVERSAL_RANGE = (-100.0, 100.0)
ASSIGNED_RANGE = (0.0, 1.0)


class InterpError(RuntimeError):
    pass


@dataclass
class InstanceData:
    n: int
    arrays: dict[str, np.ndarray]
    acc: dict[str, np.ndarray]
    scalars: dict[str, float]
    newton_iters: list[int] = field(default_factory=list)  # max iters per solve

    def copy(self) -> "InstanceData":
        return InstanceData(
            self.n,
            {k: v.copy() for k, v in self.arrays.items()},
            {k: v.copy() for k, v in self.acc.items()},
            dict(self.scalars),
            list(self.newton_iters),
        )


def _slot_rng(seed: int, name: str) -> np.random.Generator:
    # one named substream per slot so shared slots initialize identically
    # across layouts that differ in their localized variables
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init(layout: MechanismLayout, n: int, seed: int, dt: float = 0.025) -> InstanceData:
    """Seeded instance store: parameters at defaults, states/voltage random."""
    if n < 1:
        raise ValueError("need at least one instance")
    arrays: dict[str, np.ndarray] = {}
    for slot in layout.slots:
        rng = _slot_rng(seed, slot.name)
        if slot.role == "parameter":
            arrays[slot.name] = np.full(n, slot.default if slot.default is not None else 0.0)
        elif slot.ion_kind == "current":
            arrays[slot.name] = np.zeros(n)
        elif slot.ion_kind == "conc":
            arrays[slot.name] = rng.uniform(*CONC_RANGE, n)
        elif slot.ion_kind == "reversal":
            arrays[slot.name] = rng.uniform(*REVERSAL_RANGE, n)
        elif slot.role == "state":
            arrays[slot.name] = rng.uniform(*STATE_RANGE, n)
        else:
            arrays[slot.name] = rng.uniform(*ASSIGNED_RANGE, n)
    arrays["v"] = _slot_rng(seed, "v").uniform(*V_RANGE, n)
    acc = {"i_acc": np.zeros(n), "g_acc": np.zeros(n)}
    scalars = dict(layout.global_scalars)
    scalars["dt"] = dt
    return InstanceData(n, arrays, acc, scalars)


# ---------------------------------------------------------------------------
# Expression compilation

_NP_FNS = {"exp": np.exp, "log": np.log, "sqrt": np.sqrt, "fabs": np.abs, "pow": np.power}

_BINOPS = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": np.divide,
    "^": np.power,
    "<": np.less,
    "<=": np.less_equal,
    ">": np.greater,
    ">=": np.greater_equal,
    "==": np.equal,
    "!=": np.not_equal,
}


@dataclass
class Ctx:
    data: InstanceData
    locals: dict[str, object]
    mask: np.ndarray | None
    depth: int = 0


def _truthy(value, n: int) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype != bool:
        arr = arr != 0.0
    if arr.ndim == 0:
        arr = np.full(n, bool(arr))
    return arr


class Runner:
    """Compiles kernels of one mechanism layout and executes them."""

    def __init__(self, layout: MechanismLayout, jac_mode: str = "exact"):
        if jac_mode not in ("exact", "fd"):
            raise ValueError("jac_mode must be 'exact' or 'fd'")
        self.layout = layout
        self.jac_mode = jac_mode
        self._kernel_cache: dict[str, list] = {}
        self._fn_cache: dict[str, tuple[list[str], list]] = {}

    # -- name resolution --------------------------------------------------

    def compile_expr(self, node: Node):
        kind = node.kind
        if kind == "Number":
            value = node.attrs["value"]
            return lambda ctx: value
        if kind == "Identifier":
            name = node.attrs["name"]

            def load(ctx: Ctx):
                if name in ctx.locals:
                    return ctx.locals[name]
                arr = ctx.data.arrays.get(name)
                if arr is not None:
                    return arr
                try:
                    return ctx.data.scalars[name]
                except KeyError:
                    raise InterpError(f"unbound name {name!r}") from None

            return load
        if kind == "IndexedName":
            base = node.attrs["name"]
            index = node.children[0]
            if index.kind == "Number":
                slot = f"{base}[{int(index.attrs['value'])}]"
                return lambda ctx: ctx.data.arrays[slot]
            idx_fn = self.compile_expr(index)

            def load_dyn(ctx: Ctx):
                k = _scalar_int(idx_fn(ctx))
                return ctx.data.arrays[f"{base}[{k}]"]

            return load_dyn
        if kind == "Binary":
            op = node.attrs["op"]
            left = self.compile_expr(node.children[0])
            right = self.compile_expr(node.children[1])
            if op == "&&":
                n = None
                return lambda ctx: np.logical_and(
                    _truthy(left(ctx), ctx.data.n), _truthy(right(ctx), ctx.data.n)
                )
            if op == "||":
                return lambda ctx: np.logical_or(
                    _truthy(left(ctx), ctx.data.n), _truthy(right(ctx), ctx.data.n)
                )
            fn = _BINOPS[op]
            return lambda ctx: fn(left(ctx), right(ctx))
        if kind == "Unary":
            op = node.attrs["op"]
            operand = self.compile_expr(node.children[0])
            if op == "-":
                return lambda ctx: np.negative(operand(ctx))
            if op == "!":
                return lambda ctx: np.logical_not(_truthy(operand(ctx), ctx.data.n))
            raise InterpError(f"cannot execute unary {op!r}")
        if kind == "Call":
            name = node.attrs["name"]
            args = [self.compile_expr(a) for a in node.children]
            if name in _NP_FNS:
                fn = _NP_FNS[name]
                return lambda ctx: fn(*(a(ctx) for a in args))
            if name in self.layout.functions:
                return self._compile_user_call(name, args)
            raise InterpError(f"call to unknown function {name!r}")
        if kind == "String":
            raise InterpError("string literal in arithmetic context")
        raise InterpError(f"cannot execute expression node {kind}")

    def _compile_user_call(self, name: str, arg_fns: list):
        def invoke(ctx: Ctx):
            if ctx.depth > CALL_DEPTH_CAP:
                raise InterpError(f"call depth exceeded invoking {name!r}")
            formals, body = self._function_parts(name)
            sub = Ctx(ctx.data, {}, ctx.mask, ctx.depth + 1)
            for formal, fn in zip(formals, arg_fns):
                sub.locals[formal] = fn(ctx)
            for stmt in body:
                stmt(sub)
            return sub.locals.get(name, 0.0)

        return invoke

    def _function_parts(self, name: str):
        if name not in self._fn_cache:
            block = self.layout.functions[name]
            formals = [c.attrs["name"] for c in block.children if c.kind == "FormalArg"]
            body = [self.compile_stmt(s) for s in block.children[-1].children]
            self._fn_cache[name] = (formals, body)
        return self._fn_cache[name]

    # -- statements ---------------------------------------------------------

    def compile_kernel(self, kernel: Kernel) -> list:
        if kernel.name not in self._kernel_cache:
            self._kernel_cache[kernel.name] = [self.compile_stmt(s) for s in kernel.statements]
        return self._kernel_cache[kernel.name]

    def compile_stmt(self, node: Node):
        kind = node.kind
        if kind == "Assign":
            return self._compile_assign(node)
        if kind == "LocalDecl":
            names = node.attrs["names"]

            def declare(ctx: Ctx):
                for n in names:
                    ctx.locals.setdefault(n, 0.0)

            return declare
        if kind == "ExprStatement":
            fn = self.compile_expr(node.children[0])
            return lambda ctx: (fn(ctx), None)[1]
        if kind == "If":
            cond = self.compile_expr(node.children[0])
            then_body = [self.compile_stmt(s) for s in node.children[1].children]
            else_body = (
                [self.compile_stmt(s) for s in node.children[2].children]
                if len(node.children) == 3
                else []
            )

            def run_if(ctx: Ctx):
                c = _truthy(cond(ctx), ctx.data.n)
                base = ctx.mask if ctx.mask is not None else np.ones(ctx.data.n, bool)
                m_then = base & c
                if m_then.any():
                    sub = Ctx(ctx.data, ctx.locals, m_then, ctx.depth)
                    for stmt in then_body:
                        stmt(sub)
                if else_body:
                    m_else = base & ~c
                    if m_else.any():
                        sub = Ctx(ctx.data, ctx.locals, m_else, ctx.depth)
                        for stmt in else_body:
                            stmt(sub)

            return run_if
        if kind == "While":
            cond = self.compile_expr(node.children[0])
            body = [self.compile_stmt(s) for s in node.children[1].children]

            def run_while(ctx: Ctx):
                base = ctx.mask if ctx.mask is not None else np.ones(ctx.data.n, bool)
                active = base & _truthy(cond(ctx), ctx.data.n)
                count = 0
                while active.any():
                    count += 1
                    if count > WHILE_CAP:
                        raise InterpError(f"WHILE loop exceeded {WHILE_CAP} iterations")
                    sub = Ctx(ctx.data, ctx.locals, active, ctx.depth)
                    for stmt in body:
                        stmt(sub)
                    active = active & _truthy(cond(ctx), ctx.data.n)

            return run_while
        if kind == "FromLoop":
            var = node.attrs["name"]
            lo_fn = self.compile_expr(node.children[0])
            hi_fn = self.compile_expr(node.children[1])
            body = [self.compile_stmt(s) for s in node.children[2].children]

            def run_from(ctx: Ctx):
                lo = _scalar_int(lo_fn(ctx))
                hi = _scalar_int(hi_fn(ctx))
                for k in range(lo, hi + 1):
                    ctx.locals[var] = float(k)
                    for stmt in body:
                        stmt(ctx)

            return run_from
        if kind == "ConductanceStmt":
            return lambda ctx: None
        if kind == "Verbatim":
            def bail(ctx: Ctx):
                raise InterpError("cannot interpret VERBATIM inside a kernel")

            return bail
        if kind == "NewtonSolveNode":
            return self._compile_newton(node)
        if kind == "LinearSolveNode":
            return self._compile_linear_solve(node)
        if kind in ("Reaction", "Conserve", "Equation", "Solve"):
            def bail2(ctx: Ctx, kind=kind):
                raise InterpError(f"{kind} must be lowered before interpretation")

            return bail2
        raise InterpError(f"cannot execute statement kind {kind}")

    def _compile_assign(self, node: Node):
        target, value = node.children
        value_fn = self.compile_expr(value)
        if target.kind == "DerivVar":
            def bail(ctx: Ctx):
                raise InterpError("raw derivative statement; solver lowering required")

            return bail
        if target.kind == "IndexedName" and target.children[0].kind != "Number":
            base = target.attrs["name"]
            idx_fn = self.compile_expr(target.children[0])

            def store_dyn(ctx: Ctx):
                k = _scalar_int(idx_fn(ctx))
                _store_array(ctx, f"{base}[{k}]", value_fn(ctx))

            return store_dyn
        name = (
            f"{target.attrs['name']}[{int(target.children[0].attrs['value'])}]"
            if target.kind == "IndexedName"
            else target.attrs["name"]
        )

        def store(ctx: Ctx):
            val = value_fn(ctx)
            if name in ctx.locals or (
                name not in ctx.data.arrays and name not in ctx.data.scalars
            ):
                if ctx.mask is None:
                    ctx.locals[name] = val
                else:
                    old = ctx.locals.get(name, 0.0)
                    ctx.locals[name] = np.where(ctx.mask, val, old)
            elif name in ctx.data.arrays:
                _store_array(ctx, name, val)
            else:  # global scalar: last active lane wins (sequential semantics)
                arr = np.asarray(val)
                if arr.ndim == 0:
                    ctx.data.scalars[name] = float(arr)
                else:
                    idx = np.flatnonzero(ctx.mask) if ctx.mask is not None else None
                    ctx.data.scalars[name] = float(arr[idx[-1]] if idx is not None and len(idx) else arr[-1])

        return store

    # -- solver nodes --------------------------------------------------------

    def _compile_newton(self, node: Node):
        residual_nodes, jac_nodes = newton_parts(node)
        res_fns = [self.compile_expr(r) for r in residual_nodes]
        jac_fns = [[self.compile_expr(e) for e in row] for row in jac_nodes]
        unknowns = node.attrs["unknowns"]
        states = node.attrs["states"]
        tol = node.attrs["tol"]
        max_iter = node.attrs["max_iter"]
        k = node.attrs["n"]
        use_fd = self.jac_mode == "fd"

        def run_newton(ctx: Ctx):
            data = ctx.data
            n = data.n
            base = ctx.mask if ctx.mask is not None else np.ones(n, bool)
            x = np.stack([np.broadcast_to(data.arrays[s], (n,)).astype(float) for s in states])

            def residual_at(xm: np.ndarray) -> np.ndarray:
                sub = Ctx(data, dict(ctx.locals), ctx.mask, ctx.depth)
                for j, u in enumerate(unknowns):
                    sub.locals[u] = xm[j]
                return np.stack([np.broadcast_to(np.asarray(f(sub), float), (n,)) for f in res_fns])

            iters = np.zeros(n, dtype=int)
            converged = np.zeros(n, bool)
            with np.errstate(all="ignore"):
                for it in range(max_iter + 1):
                    f_val = residual_at(x)
                    resid = np.max(np.abs(f_val), axis=0)
                    converged = resid <= tol
                    active = base & ~converged
                    if not active.any():
                        break
                    if it == max_iter:
                        bad = int(np.flatnonzero(active)[0])
                        raise InterpError(
                            f"Newton failed to converge for instance {bad} "
                            f"(residual {resid[bad]:.3e} after {max_iter} iterations)"
                        )
                    if use_fd:
                        jac = _fd_jacobian(residual_at, x, k, n)
                    else:
                        sub = Ctx(data, dict(ctx.locals), ctx.mask, ctx.depth)
                        for j, u in enumerate(unknowns):
                            sub.locals[u] = x[j]
                        jac = np.empty((k, k, n))
                        for i in range(k):
                            for j in range(k):
                                jac[i, j] = np.broadcast_to(
                                    np.asarray(jac_fns[i][j](sub), float), (n,)
                                )
                    dx = _solve_kxk(jac, f_val, k)
                    x = np.where(active, x - dx, x)
                    iters += active
            data.newton_iters.append(int(iters[base].max()) if base.any() else 0)
            for j, s in enumerate(states):
                _store_array(ctx, s, x[j])

        return run_newton

    def _compile_linear_solve(self, node: Node):
        a_nodes, b_nodes = linear_parts(node)
        a_fns = [[self.compile_expr(e) for e in row] for row in a_nodes]
        b_fns = [self.compile_expr(e) for e in b_nodes]
        states = node.attrs["states"]
        k = node.attrs["n"]

        def run_solve(ctx: Ctx):
            n = ctx.data.n
            a = np.empty((n, k, k))
            b = np.empty((n, k))
            for i in range(k):
                b[:, i] = np.broadcast_to(np.asarray(b_fns[i](ctx), float), (n,))
                for j in range(k):
                    a[:, i, j] = np.broadcast_to(np.asarray(a_fns[i][j](ctx), float), (n,))
            x = lu_solve_batched(a, b)
            for j, s in enumerate(states):
                _store_array(ctx, s, x[:, j])

        return run_solve

    # -- kernel execution ------------------------------------------------

    def run_kernel(self, data: InstanceData, kernel_name: str, steps: int = 1) -> InstanceData:
        kernel = self.layout.kernels[kernel_name]
        stmts = self.compile_kernel(kernel)
        is_current = kernel_name == "current_update"
        # lanes outside a branch mask may divide by zero or overflow; only
        # non-finite values that land in slots abort (checked below)
        with np.errstate(all="ignore"):
            for _ in range(steps):
                ctx = Ctx(data, {}, None)
                if is_current:
                    self._run_current_kernel(ctx, stmts)
                else:
                    for stmt in stmts:
                        stmt(ctx)
                _check_finite(data, kernel_name)
        return data

    def _run_current_kernel(self, ctx: Ctx, stmts: list) -> None:
        data = ctx.data
        data.acc["i_acc"].fill(0.0)
        data.acc["g_acc"].fill(0.0)
        currents = self.layout.currents
        if not currents:
            for stmt in stmts:
                stmt(ctx)
            return
        if self.layout.analytic_conductance:
            for stmt in stmts:
                stmt(ctx)
            total_g = np.zeros(data.n)
            for var, _ion in currents:
                data.acc["i_acc"] += data.arrays[var]
                g_name = self.layout.conductance_hints[var]
                g_val = ctx.locals.get(g_name)
                if g_val is None:
                    g_val = data.arrays.get(g_name, 0.0)
                total_g = total_g + np.broadcast_to(np.asarray(g_val, float), (data.n,))
            data.acc["g_acc"] += total_g
            return
        # numeric two-point conductance: run body at v+h, then at v
        h = CONDUCTANCE_PERTURBATION
        v = data.arrays["v"]
        saved = {name: data.arrays[name].copy() for name in data.arrays}
        data.arrays["v"] = v + h
        ctx_shift = Ctx(data, {}, None)
        for stmt in stmts:
            stmt(ctx_shift)
        i_shifted = np.zeros(data.n)
        for var, _ion in currents:
            i_shifted += data.arrays[var]
        for name, arr in saved.items():
            data.arrays[name] = arr
        for stmt in stmts:
            stmt(ctx)
        i_base = np.zeros(data.n)
        for var, _ion in currents:
            i_base += data.arrays[var]
        data.acc["i_acc"] += i_base
        data.acc["g_acc"] += (i_shifted - i_base) / h


def _store_array(ctx: Ctx, name: str, value) -> None:
    arr = ctx.data.arrays[name]
    if ctx.mask is None:
        arr[:] = value
    else:
        arr[:] = np.where(ctx.mask, value, arr)


def _scalar_int(value) -> int:
    arr = np.asarray(value)
    if arr.ndim > 0:
        first = arr.flat[0]
        if not np.all(arr == first):
            raise InterpError("loop bound or index varies across instances; unsupported")
        value = first
    f = float(value)
    if f != int(f):
        raise InterpError(f"expected an integer-valued bound/index, got {f!r}")
    return int(f)


def _check_finite(data: InstanceData, kernel_name: str) -> None:
    for name, arr in data.arrays.items():
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise InterpError(
                f"non-finite value in {name!r} at instance {idx} after kernel {kernel_name}"
            )


def _fd_jacobian(residual_at, x: np.ndarray, k: int, n: int) -> np.ndarray:
    jac = np.empty((k, k, n))
    for j in range(k):
        h = 1e-6 * np.maximum(1.0, np.abs(x[j]))
        xp = x.copy()
        xp[j] = x[j] + h
        xm = x.copy()
        xm[j] = x[j] - h
        diff = (residual_at(xp) - residual_at(xm)) / (2.0 * h)
        jac[:, j, :] = diff
    return jac


# ---------------------------------------------------------------------------
# Small dense solves


def _perm_det(a: np.ndarray, rows: list[int], cols: list[int]) -> np.ndarray:
    """Determinant of the submatrix a[rows, cols, :] by permutation expansion."""
    k = len(rows)
    out = np.zeros(a.shape[2])
    for perm in permutations(range(k)):
        sign = 1.0
        seen = list(perm)
        for i in range(k):  # parity by counting inversions
            for j in range(i + 1, k):
                if seen[i] > seen[j]:
                    sign = -sign
        term = np.ones(a.shape[2])
        for i, p in enumerate(perm):
            term = term * a[rows[i], cols[p], :]
        out += sign * term
    return out


def _solve_kxk(jac: np.ndarray, rhs: np.ndarray, k: int) -> np.ndarray:
    """Solve jac @ dx = rhs per instance; closed-form adjugate for k <= 4."""
    if k <= 4:
        det = _perm_det(jac, list(range(k)), list(range(k)))
        dx = np.zeros_like(rhs)
        for j in range(k):
            acc = np.zeros(jac.shape[2])
            for i in range(k):
                rows = [r for r in range(k) if r != i]
                cols = [c for c in range(k) if c != j]
                minor = _perm_det(jac, rows, cols) if k > 1 else np.ones(jac.shape[2])
                sign = -1.0 if (i + j) % 2 else 1.0
                acc += sign * minor * rhs[i]
            dx[j] = acc / det
        return dx
    a = np.moveaxis(jac, 2, 0)  # (n, k, k)
    b = np.moveaxis(rhs, 1, 0)  # (n, k)
    return np.moveaxis(lu_solve_batched(a, b), 0, 1)


def lu_solve_batched(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Partial-pivot LU solve of a[n, k, k] x = b[n, k] per instance."""
    a = a.copy()
    b = b.copy()
    n, k, _ = a.shape
    rows = np.arange(n)
    for col in range(k):
        piv = np.argmax(np.abs(a[:, col:, col]), axis=1) + col
        swap = piv != col
        if swap.any():
            tmp = a[rows, col].copy()
            a[rows, col] = a[rows, piv]
            a[rows, piv] = tmp
            tb = b[rows, col].copy()
            b[rows, col] = b[rows, piv]
            b[rows, piv] = tb
        pivval = a[:, col, col]
        if np.any(pivval == 0.0):
            bad = int(np.flatnonzero(pivval == 0.0)[0])
            raise InterpError(f"singular matrix in runtime linear solve (instance {bad})")
        for r in range(col + 1, k):
            f = a[:, r, col] / pivval
            a[:, r, col:] -= f[:, None] * a[:, col, col:]
            b[:, r] -= f * b[:, col]
    x = np.zeros_like(b)
    for row in range(k - 1, -1, -1):
        acc = b[:, row].copy()
        for c in range(row + 1, k):
            acc -= a[:, row, c] * x[:, c]
        x[:, row] = acc / a[:, row, row]
    return x


# ---------------------------------------------------------------------------
# Simulation drivers and trajectory comparison


def simulate(
    layout: MechanismLayout,
    data: InstanceData,
    steps: int,
    jac_mode: str = "exact",
    on_step=None,
) -> InstanceData:
    """initialize once, then `steps` iterations of state and current updates."""
    runner = Runner(layout, jac_mode=jac_mode)
    runner.run_kernel(data, "initialize", 1)
    for step in range(steps):
        runner.run_kernel(data, "state_update", 1)
        runner.run_kernel(data, "current_update", 1)
        if on_step is not None:
            on_step(step, data)
    return data


def diff_trajectories(a: InstanceData, b: InstanceData, slots: list[str] | None = None) -> float:
    """Max relative deviation between two instance stores."""
    if a.n != b.n:
        raise InterpError("instance counts differ")
    if slots is None:
        if set(a.arrays) != set(b.arrays):
            raise InterpError("layout mismatch: slot sets differ")
        slots = sorted(a.arrays)
    worst = 0.0
    for name in slots:
        xa = a.acc[name] if name in a.acc else a.arrays[name]
        xb = b.acc[name] if name in b.acc else b.arrays[name]
        denom = np.maximum(np.maximum(np.abs(xa), np.abs(xb)), 1e-30)
        worst = max(worst, float(np.max(np.abs(xa - xb) / denom)))
    return worst


def compare_pipelines(
    layout_a: MechanismLayout,
    layout_b: MechanismLayout,
    n: int,
    seed: int,
    steps: int,
    dt: float = 0.025,
) -> float:
    """Differential run: step both layouts in lockstep, compare shared
    semantic outputs (states, ion variables, accumulators, voltage)."""
    data_a = init(layout_a, n, seed, dt)
    data_b = init(layout_b, n, seed, dt)
    compare = sorted(
        {s.name for s in layout_a.slots if s.role in ("state", "ion")}
        & {s.name for s in layout_b.slots if s.role in ("state", "ion")}
    ) + ["i_acc", "g_acc"]

    runner_a = Runner(layout_a)
    runner_b = Runner(layout_b)
    runner_a.run_kernel(data_a, "initialize", 1)
    runner_b.run_kernel(data_b, "initialize", 1)
    worst = diff_trajectories(data_a, data_b, [c for c in compare if c not in ("i_acc", "g_acc")])
    for _ in range(steps):
        runner_a.run_kernel(data_a, "state_update", 1)
        runner_b.run_kernel(data_b, "state_update", 1)
        runner_a.run_kernel(data_a, "current_update", 1)
        runner_b.run_kernel(data_b, "current_update", 1)
        worst = max(worst, diff_trajectories(data_a, data_b, compare))
    return worst


def permutation_invariant(layout: MechanismLayout, n: int, seed: int, steps: int) -> float:
    """Permute instances, run, un-permute; deviation from the direct run."""
    rng = np.random.default_rng(seed + 999)
    perm = rng.permutation(n)
    inverse = np.argsort(perm)

    base = init(layout, n, seed)
    direct = simulate(layout, base.copy(), steps)

    shuffled = base.copy()
    for name in shuffled.arrays:
        shuffled.arrays[name] = shuffled.arrays[name][perm]
    permuted = simulate(layout, shuffled, steps)
    for name in permuted.arrays:
        permuted.arrays[name] = permuted.arrays[name][inverse]
    for name in permuted.acc:
        permuted.acc[name] = permuted.acc[name][inverse]
    return diff_trajectories(direct, permuted)
