import math

import numpy as np
import pytest

from modlc.ast_nodes import iter_nodes, structurally_equal
from modlc.diagnostics import DiagnosticSink, SolverError
from modlc.odes import (
    OdeSystem,
    classify,
    derive_conductance,
    extract_odes,
    implicit_euler_system,
    kinetic_to_derivative,
    linear_system_from_residuals,
    lower_derivimplicit,
    lower_program,
    lower_sparse,
    newton_parts,
    solve_cnexp,
    split_linear,
)
from modlc.parser import parse_source
from modlc.symbolic import (
    Constant,
    Variable,
    add,
    differentiate,
    evaluate,
    from_ast,
    mul,
    pow_,
    simplify,
    sub,
)
from modlc.symtab import build_symbol_tables

# frozen reference values computed with 50-digit arithmetic
CNEXP_ONE_STEP_TRUE = 0.024690087971667333  # 1 - exp(-0.025)
PADE_ONE_STEP_TRUE = 0.024691358024691357  # 1 - (2 - 0.025)/(2 + 0.025)
NEWTON_QUAD_ROOT = 0.9160797830996161  # positive root of y - 1 + 0.1*y^2 (bisection)


def kinetic_block(src):
    ast = build_symbol_tables(parse_source(src))
    return next(b for b in ast.children if b.kind == "KineticBlock")


def mass_action_by_hand_two_state(kf, kb, A, B):
    flux = kf * A - kb * B
    return {"A": -flux, "B": flux}


def test_kinetic_lowering_simple_reversible():
    block = kinetic_block("PARAMETER { kf = 2 kb = 1 }\nSTATE { A B }\nKINETIC s { ~ A <-> B (kf, kb) }")
    deriv = kinetic_to_derivative(block, DiagnosticSink())
    assert deriv.kind == "DerivativeBlock"
    ode, retained, _ = extract_odes(deriv)
    assert ode.states == ["A", "B"]
    rng = np.random.default_rng(3)
    for _ in range(50):
        env = {k: float(rng.uniform(0.1, 2.0)) for k in ("kf", "kb", "A", "B")}
        oracle = mass_action_by_hand_two_state(env["kf"], env["kb"], env["A"], env["B"])
        for s in ("A", "B"):
            got = evaluate(ode.derivs[s], env)
            assert abs(got - oracle[s]) <= 1e-14 * max(1.0, abs(oracle[s]))


def test_kinetic_lowering_with_stoichiometry():
    block = kinetic_block("PARAMETER { kf = 2 kb = 1 }\nSTATE { A B }\nKINETIC s { ~ 2 A <-> B (kf, kb) }")
    ode, _, _ = extract_odes(kinetic_to_derivative(block, DiagnosticSink()))
    rng = np.random.default_rng(4)
    for _ in range(50):
        env = {k: float(rng.uniform(0.1, 2.0)) for k in ("kf", "kb", "A", "B")}
        flux = env["kf"] * env["A"] ** 2 - env["kb"] * env["B"]
        assert abs(evaluate(ode.derivs["A"], env) - (-2 * flux)) <= 1e-13 * max(1.0, abs(flux))
        assert abs(evaluate(ode.derivs["B"], env) - flux) <= 1e-13 * max(1.0, abs(flux))


def test_empty_kinetic_block():
    block = kinetic_block("KINETIC s { }")
    deriv = kinetic_to_derivative(block, DiagnosticSink())
    assert deriv.kind == "DerivativeBlock"
    assert deriv.children[-1].children == ()


def test_conserve_recorded():
    block = kinetic_block(
        "PARAMETER { kf = 2 kb = 1 }\nSTATE { A B }\nKINETIC s { ~ A <-> B (kf, kb)\n CONSERVE A + B = 1 }"
    )
    ode, _, _ = extract_odes(kinetic_to_derivative(block, DiagnosticSink()))
    assert len(ode.conserve) == 1
    weights, total = ode.conserve[0]
    assert weights == {"A": 1.0, "B": 1.0}
    assert total == Constant(1.0)


# -- classification ------------------------------------------------------------


def gate_system():
    minf, mtau, m = Variable("minf"), Variable("mtau"), Variable("m")
    expr = mul(sub(minf, m), pow_(mtau, -1))
    return OdeSystem(["m"], {"m": expr})


def test_classify_cnexp_extracts_coefficients():
    ode = gate_system()
    assert classify(ode, "cnexp") == "cnexp"
    a, b = split_linear(ode.derivs["m"], "m")
    env = {"minf": 0.3, "mtau": 2.0}
    assert abs(evaluate(a, env) - 0.15) < 1e-15  # minf/mtau
    assert abs(evaluate(b, env) + 0.5) < 1e-15  # -1/mtau


def two_state_system():
    kf, kb = Variable("kf"), Variable("kb")
    A, B = Variable("A"), Variable("B")
    flux = sub(mul(kf, A), mul(kb, B))
    return OdeSystem(["A", "B"], {"A": mul(-1, flux), "B": flux})


def test_classify_sparse_for_linear_coupled():
    assert classify(two_state_system(), "sparse") == "sparse"


def test_classify_rejects_nonlinear_cnexp():
    y = Variable("y")
    ode = OdeSystem(["y"], {"y": mul(-1, pow_(y, 2))})
    with pytest.raises(SolverError) as err:
        classify(ode, "cnexp")
    assert "derivimplicit" in err.value.diagnostics[0].message


def test_classify_rejects_coupled_cnexp():
    with pytest.raises(SolverError):
        classify(two_state_system(), "cnexp")


# -- cnexp ---------------------------------------------------------------------


def run_update_statements(stmts, env):
    """Tiny statement evaluator for AnalyticUpdate-style assignments."""
    env = dict(env)
    for stmt in stmts:
        if stmt.kind == "Assign":
            env[stmt.children[0].attrs["name"]] = evaluate(from_ast(stmt.children[1]), env)
        elif stmt.kind == "If":
            cond = stmt.children[0]
            guard = evaluate(from_ast(cond.children[0]), env) < cond.children[1].attrs["value"]
            branch = stmt.children[1] if guard else stmt.children[2]
            env = run_update_statements(branch.children, env)
        else:
            raise AssertionError(f"unexpected statement {stmt.kind}")
    return env


def test_cnexp_exact_one_step():
    y = Variable("y")
    expr = sub(Constant(1.0), y)  # y' = (1 - y)/1
    stmts = solve_cnexp("y", expr, pade=False)
    env = run_update_statements(stmts, {"y": 0.0, "dt": 0.025})
    # oracle: the closed form evaluated independently in double precision
    closed = 1.0 + (0.0 - 1.0) * math.exp(-0.025)
    assert abs(env["y"] - closed) <= 4 * math.ulp(closed)
    # and the double result sits on the 50-digit value up to the exp rounding
    assert env["y"] == pytest.approx(CNEXP_ONE_STEP_TRUE, rel=1e-14)


def test_cnexp_pade_one_step():
    y = Variable("y")
    expr = sub(Constant(1.0), y)
    stmts = solve_cnexp("y", expr, pade=True)
    env = run_update_statements(stmts, {"y": 0.0, "dt": 0.025})
    closed = 1.0 + (0.0 - 1.0) * ((2.0 - 0.025) / (2.0 + 0.025))
    assert abs(env["y"] - closed) <= 4 * math.ulp(max(abs(closed), 1.0))
    assert env["y"] == pytest.approx(PADE_ONE_STEP_TRUE, rel=1e-13)


def test_cnexp_pure_increment_when_slope_zero():
    y = Variable("y")
    stmts = solve_cnexp("y", Constant(2.0))
    env = run_update_statements(stmts, {"y": 1.0, "dt": 0.1})
    assert env["y"] == pytest.approx(1.2, abs=1e-15)


# -- implicit Euler -------------------------------------------------------------


def test_implicit_euler_residual_shape():
    k, y = Variable("k"), Variable("y")
    ode = OdeSystem(["y"], {"y": mul(-1, k, y)})
    unknowns, residuals = implicit_euler_system(ode)
    assert unknowns == ["y_new"]
    env = {"y": 0.8, "y_new": 0.7, "dt": 0.025, "k": 2.0}
    expected = env["y_new"] - env["y"] + env["dt"] * env["k"] * env["y_new"]
    assert evaluate(residuals[0], env) == pytest.approx(expected, rel=1e-15)
    jac = differentiate(residuals[0], "y_new")
    assert evaluate(jac, env) == pytest.approx(1 + env["dt"] * env["k"], rel=1e-15)


def test_conserve_replaces_last_involved_residual():
    ode = two_state_system()
    ode.conserve.append(({"A": 1.0, "B": 1.0}, Constant(1.0)))
    unknowns, residuals = implicit_euler_system(ode)
    conservation = residuals[1]  # B is last in declaration order
    env = {"A_new": 0.25, "B_new": 0.75, "A": 0.0, "B": 0.0, "dt": 0.1}
    assert evaluate(conservation, env) == pytest.approx(0.0, abs=1e-15)
    env["B_new"] = 0.80
    assert evaluate(conservation, env) == pytest.approx(0.05, rel=1e-12)


def test_uncoupled_system_has_structurally_zero_off_diagonal():
    y0, y1 = Variable("y0"), Variable("y1")
    ode = OdeSystem(["y0", "y1"], {"y0": mul(-1, y0), "y1": mul(-2, y1)})
    unknowns, residuals = implicit_euler_system(ode)
    system = linear_system_from_residuals(unknowns, residuals)
    assert system.a[0][1] == Constant(0.0)
    assert system.a[1][0] == Constant(0.0)


# -- sparse lowering -------------------------------------------------------------


def test_sparse_two_state_closed_form_matches_lu():
    from modlc.interp import lu_solve_batched

    ode = two_state_system()
    stmts = lower_sparse(ode, use_cse=False)
    assign_new = {
        s.children[0].attrs["name"]: from_ast(s.children[1])
        for s in stmts
        if s.kind == "Assign" and s.children[0].attrs["name"].endswith("_new")
    }
    rng = np.random.default_rng(17)
    for _ in range(100):
        env = {
            "kf": float(rng.uniform(0.1, 4.0)),
            "kb": float(rng.uniform(0.1, 4.0)),
            "dt": float(rng.uniform(0.001, 0.1)),
            "A": float(rng.uniform(0.0, 1.0)),
            "B": float(rng.uniform(0.0, 1.0)),
        }
        a = np.array(
            [
                [
                    [1 + env["dt"] * env["kf"], -env["dt"] * env["kb"]],
                    [-env["dt"] * env["kf"], 1 + env["dt"] * env["kb"]],
                ]
            ]
        )
        b = np.array([[env["A"], env["B"]]])
        lu = lu_solve_batched(a, b)[0]
        for j, name in enumerate(("A_new", "B_new")):
            sym = evaluate(assign_new[name], env)
            assert abs(sym - lu[j]) / max(abs(sym), 1e-30) <= 1e-10


def test_sparse_four_state_goes_to_runtime_lu():
    r = Variable("r")
    s0, s1, s2, s3 = (Variable(f"s{i}") for i in range(4))
    ode = OdeSystem(
        ["s0", "s1", "s2", "s3"],
        {
            "s0": mul(-1, r, s0),
            "s1": sub(mul(r, s0), mul(r, s1)),
            "s2": sub(mul(r, s1), mul(r, s2)),
            "s3": mul(r, s2),
        },
    )
    (node,) = lower_sparse(ode)
    assert node.kind == "LinearSolveNode"
    assert node.attrs["n"] == 4


def test_sparse_cse_shares_denominator():
    ode = two_state_system()
    stmts = lower_sparse(ode, use_cse=True)
    decls = [s for s in stmts if s.kind == "LocalDecl"]
    assert decls and any(n.startswith("tmp_") for n in decls[0].attrs["names"])
    with_cse = {
        s.children[0].attrs["name"]: s for s in stmts if s.kind == "Assign"
    }
    # evaluating the CSE'd chain must reproduce the direct solution
    plain = lower_sparse(ode, use_cse=False)
    direct = {
        s.children[0].attrs["name"]: from_ast(s.children[1])
        for s in plain
        if s.kind == "Assign" and s.children[0].attrs["name"].endswith("_new")
    }
    rng = np.random.default_rng(23)
    for _ in range(50):
        env = {
            "kf": float(rng.uniform(0.1, 4.0)),
            "kb": float(rng.uniform(0.1, 4.0)),
            "dt": float(rng.uniform(0.001, 0.1)),
            "A": float(rng.uniform(0.0, 1.0)),
            "B": float(rng.uniform(0.0, 1.0)),
        }
        scratch = dict(env)
        for s in stmts:
            if s.kind == "Assign":
                scratch[s.children[0].attrs["name"]] = evaluate(
                    from_ast(s.children[1]), scratch
                )
        for name in ("A_new", "B_new"):
            lhs = scratch[name]
            rhs = evaluate(direct[name], env)
            assert abs(lhs - rhs) <= 4 * math.ulp(max(abs(lhs), abs(rhs), 1e-30))


# -- derivimplicit ----------------------------------------------------------------


def bisection_root(f, lo, hi, iters=200):
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(lo) * f(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def test_newton_quadratic_matches_bisection():
    y = Variable("y")
    ode = OdeSystem(["y"], {"y": mul(-1, pow_(y, 2))})
    (node,) = lower_derivimplicit(ode)
    assert node.kind == "NewtonSolveNode"
    residuals, jac = newton_parts(node)
    env = {"y": 1.0, "dt": 0.1}

    def F(val):
        return evaluate(from_ast(residuals[0]), {**env, "y_new": val})

    oracle = bisection_root(F, 0.0, 1.0)
    assert oracle == pytest.approx(NEWTON_QUAD_ROOT, abs=1e-12)
    # run the Newton iteration exactly as the runtime would
    val = env["y"]
    for _ in range(50):
        f = F(val)
        if abs(f) <= node.attrs["tol"]:
            break
        j = evaluate(from_ast(jac[0][0]), {**env, "y_new": val})
        val -= f / j
    assert val == pytest.approx(NEWTON_QUAD_ROOT, abs=1e-12)


def test_newton_on_affine_system_converges_in_one_iteration():
    k, y = Variable("k"), Variable("y")
    ode = OdeSystem(["y"], {"y": mul(-1, k, y)})
    (node,) = lower_derivimplicit(ode)
    residuals, jac = newton_parts(node)
    env = {"y": 0.9, "k": 1.7, "dt": 0.025}
    val = env["y"]
    iters = 0
    for _ in range(50):
        f = evaluate(from_ast(residuals[0]), {**env, "y_new": val})
        if abs(f) <= node.attrs["tol"]:
            break
        j = evaluate(from_ast(jac[0][0]), {**env, "y_new": val})
        val -= f / j
        iters += 1
    assert iters == 1


def test_newton_jacobian_entry_for_linear_decay():
    k, y = Variable("k"), Variable("y")
    ode = OdeSystem(["y"], {"y": mul(-1, k, y)})
    (node,) = lower_derivimplicit(ode)
    _, jac = newton_parts(node)
    expected = simplify(add(Constant(1.0), mul(Variable("dt"), k)))
    assert from_ast(jac[0][0]) == expected


# -- conductance ------------------------------------------------------------------


def lowered(src, conductance=True):
    ast = build_symbol_tables(parse_source(src))
    return lower_program(ast, DiagnosticSink(), conductance=conductance)


def test_ohmic_current_gets_auto_conductance():
    src = (
        "NEURON { SUFFIX t\n USEION ca READ eca WRITE ica\n RANGE gca }\n"
        "PARAMETER { gca = 0.001 }\n"
        "ASSIGNED { v ica }\n"
        "BREAKPOINT { ica = gca*(v - eca) }"
    )
    out = lowered(src)
    bp = next(b for b in out.children if b.kind == "BreakpointBlock")
    stmts = bp.children[-1].children
    hints = [s for s in stmts if s.kind == "ConductanceStmt"]
    assert len(hints) == 1 and hints[0].attrs["var"] == "g_ca_auto"
    g_assign = next(
        s
        for s in stmts
        if s.kind == "Assign" and s.children[0].attrs.get("name") == "g_ca_auto"
    )
    assert g_assign.children[1].attrs["name"] == "gca"  # d(ica)/dv = gca


def test_nonohmic_current_falls_back():
    src = (
        "NEURON { SUFFIX t\n USEION ca READ eca WRITE ica\n RANGE gca }\n"
        "PARAMETER { gca = 0.001 }\n"
        "ASSIGNED { v ica }\n"
        "BREAKPOINT { ica = gca*(v - eca)^2 }"
    )
    out = lowered(src)
    bp = next(b for b in out.children if b.kind == "BreakpointBlock")
    assert all(s.kind != "ConductanceStmt" for s in bp.children[-1].children)


def test_user_conductance_untouched(corpus):
    path = next(p for p in corpus if p.name == "conduct.mod")
    out = lowered(path.read_text())
    bp = next(b for b in out.children if b.kind == "BreakpointBlock")
    hints = [s for s in bp.children[-1].children if s.kind == "ConductanceStmt"]
    assert len(hints) == 1 and hints[0].attrs["var"] == "gk"  # no g_k_auto added


def test_classification_failure_aborts_compilation():
    src = (
        "NEURON { SUFFIX t }\nSTATE { y }\n"
        "BREAKPOINT { SOLVE d METHOD cnexp }\n"
        "INITIAL { y = 1 }\n"
        "DERIVATIVE d { y' = -y^2 }"
    )
    with pytest.raises(SolverError):
        lowered(src)
