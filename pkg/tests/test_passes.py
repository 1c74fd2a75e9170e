import pytest

from modlc.ast_nodes import iter_nodes, structurally_equal
from modlc.diagnostics import DiagnosticSink
from modlc.parser import parse_source
from modlc.passes import (
    constant_fold,
    inline_calls,
    localize,
    run_passes,
    unroll_loops,
    usage_analysis,
)
from modlc.printer import emit_nmodl_text
from modlc.symtab import build_symbol_tables, global_symbols


def prep(src):
    return build_symbol_tables(parse_source(src))


def fold(src):
    sink = DiagnosticSink()
    out, report = constant_fold(prep(src), sink)
    return out, report, sink


# -- constant folding ---------------------------------------------------------


def test_fold_literal_subtree():
    out, report, _ = fold("ASSIGNED { q }\nINITIAL { q = 2 + 3*4 }")
    assign = out.children[-1].children[-1].children[0]
    assert assign.children[1].kind == "Number"
    assert assign.children[1].attrs["value"] == 14.0
    assert report.nodes_changed == 2  # the mul and the add


def test_fold_substitutes_parameters_in_loop_bounds_only():
    src = (
        "PARAMETER { N = 3 }\nASSIGNED { q }\nSTATE { x[3] }\n"
        "INITIAL { q = N\n FROM i = 0 TO N - 1 { x[i] = 0 } }"
    )
    out, report, _ = fold(src)
    body = out.children[-1].children[-1]
    q_assign, loop = body.children
    assert q_assign.children[1].kind == "Identifier"  # N outside bounds untouched
    assert loop.children[1].kind == "Number" and loop.children[1].attrs["value"] == 2.0
    assert "N" in report.symbols_affected


def test_fold_keeps_algebraic_identities_for_symalg():
    out, _, _ = fold("ASSIGNED { q x y }\nINITIAL { q = x + 0*y }")
    value = out.children[-1].children[-1].children[0].children[1]
    assert value.kind == "Binary" and value.attrs["op"] == "+"  # not rewritten to x


def test_fold_division_by_literal_zero_diagnostic():
    out, _, sink = fold("ASSIGNED { q }\nINITIAL { q = 1/0 }")
    assert any("division by literal zero" in d.message for d in sink.items)
    value = out.children[-1].children[-1].children[0].children[1]
    assert value.kind == "Binary"  # left unfolded


# -- loop unrolling ------------------------------------------------------------


def unroll(src):
    sink = DiagnosticSink()
    folded, _ = constant_fold(prep(src), sink)
    out, report = unroll_loops(folded, sink)
    return out, report, sink


def test_unroll_two_iterations():
    src = "STATE { x[2] }\nDERIVATIVE d { FROM i = 0 TO 1 { x[i]' = -x[i] } }"
    out, _, _ = unroll(src)
    stmts = out.children[-1].children[-1].children
    assert len(stmts) == 2
    for k, stmt in enumerate(stmts):
        target = stmt.children[0].children[0]
        assert target.kind == "IndexedName"
        assert target.children[0].attrs["value"] == float(k)


def test_unroll_degenerate_single_iteration():
    src = "STATE { x[3] }\nINITIAL { FROM i = 2 TO 2 { x[i] = 1 } }"
    out, _, _ = unroll(src)
    stmts = out.children[-1].children[-1].children
    assert len(stmts) == 1
    assert stmts[0].children[0].children[0].attrs["value"] == 2.0


def test_unroll_runtime_bound_diagnosed_and_untouched():
    src = "ASSIGNED { n }\nSTATE { x[3] }\nINITIAL { n = 2\n FROM i = 0 TO n { x[i] = 1 } }"
    out, _, sink = unroll(src)
    assert any("cannot unroll" in d.message for d in sink.items)
    kinds = [s.kind for s in out.children[-1].children[-1].children]
    assert "FromLoop" in kinds


# -- inlining ------------------------------------------------------------------


def test_inline_procedure_body_appears_at_call_site(cat_path):
    sink = DiagnosticSink()
    out, report = inline_calls(prep(cat_path.read_text()), sink)
    deriv = next(b for b in out.children if b.kind == "DerivativeBlock")
    stmts = deriv.children[-1].children
    assert all(
        not (s.kind == "ExprStatement" and s.children[0].attrs.get("name") == "rates")
        for s in stmts
    )
    targets = [
        s.children[0].attrs.get("name")
        for s in stmts
        if s.kind == "Assign" and s.children[0].kind == "Identifier"
    ]
    assert "minf" in targets and "mtau" in targets  # rates body inlined before ODEs
    assert report.nodes_changed >= 2  # both call sites


def test_inline_function_with_return_local():
    src = (
        "ASSIGNED { y }\n"
        "FUNCTION f(x) { f = x*2 }\n"
        "INITIAL { y = f(3) + 1 }"
    )
    sink = DiagnosticSink()
    out, _ = inline_calls(prep(src), sink)
    stmts = out.children[-1].children[-1].children
    assert stmts[0].kind == "LocalDecl" and stmts[0].attrs["names"] == ("f_in_0",)
    f_assign = stmts[1]
    assert f_assign.children[0].attrs["name"] == "f_in_0"
    assert emit_nmodl_text(out).count("f_in_0 = 3*2") == 1
    final = stmts[2]
    assert final.children[1].children[0].attrs["name"] == "f_in_0"


def test_builtin_calls_left_alone():
    src = "ASSIGNED { y v }\nINITIAL { y = exp(v) }"
    sink = DiagnosticSink()
    out, report = inline_calls(prep(src), sink)
    value = out.children[-1].children[-1].children[0].children[1]
    assert value.kind == "Call" and value.attrs["name"] == "exp"
    assert report.nodes_changed == 0


def test_recursive_cycle_skipped_with_diagnostic():
    src = (
        "ASSIGNED { y }\n"
        "FUNCTION f(x) { f = g(x) }\n"
        "FUNCTION g(x) { g = f(x) }\n"
        "INITIAL { y = f(1) }"
    )
    sink = DiagnosticSink()
    out, _ = inline_calls(prep(src), sink)
    assert any("recursive" in d.message for d in sink.items)
    value = out.children[-1].children[-1].children[0].children[1]
    assert value.kind == "Call"  # left in place


def test_verbatim_disables_inlining():
    src = (
        "VERBATIM int x; ENDVERBATIM\n"
        "ASSIGNED { y }\n"
        "FUNCTION f(x) { f = x }\n"
        "INITIAL { y = f(1) }"
    )
    sink = DiagnosticSink()
    out, report = inline_calls(prep(src), sink)
    assert any("VERBATIM" in d.message for d in sink.items)
    assert report.nodes_changed == 0


def test_nested_function_calls_fully_inlined(corpus):
    path = next(p for p in corpus if p.name == "funcchain.mod")
    sink = DiagnosticSink()
    out, _ = inline_calls(prep(path.read_text()), sink)
    for block in out.children:
        if block.kind in ("DerivativeBlock", "InitialBlock"):
            for node in iter_nodes(block):
                assert not (
                    node.kind == "Call" and node.attrs["name"] in ("scale", "shape")
                )


# -- usage analysis -------------------------------------------------------------


def test_def_then_use_chain():
    src = (
        "ASSIGNED { minf mtau }\nSTATE { m }\n"
        "DERIVATIVE d { minf = 0.5\n mtau = 2\n m' = (minf - m)/mtau }"
    )
    result = usage_analysis(prep(src))
    events = result.chains["minf"].events
    assert [e.kind for e in events] == ["Def", "Use"]
    assert result.defined_on_all_paths_before_use("minf")


def test_defined_on_both_branches_counts():
    src = (
        "ASSIGNED { x y cnd }\n"
        "INITIAL { IF (cnd > 0) { x = 1 } ELSE { x = 2 }\n y = x }"
    )
    result = usage_analysis(prep(src))
    assert result.defined_on_all_paths_before_use("x")


def test_single_branch_definition_is_not_all_paths():
    src = "ASSIGNED { x y cnd }\nINITIAL { IF (cnd > 0) { x = 1 }\n y = x }"
    result = usage_analysis(prep(src))
    assert not result.defined_on_all_paths_before_use("x")


def test_read_and_write_counts_filled():
    src = "ASSIGNED { w }\nINITIAL { w = 1\n w = w + 1 }"
    ast = prep(src)
    usage_analysis(ast)
    sym = global_symbols(ast)["w"]
    assert sym.write_count == 2 and sym.read_count == 1


# -- localization ---------------------------------------------------------------


def test_localize_converts_rate_variables_after_inline(cat_path):
    sink = DiagnosticSink()
    out, reports = run_passes(prep(cat_path.read_text()), ("inline", "localize"), sink)
    localized = reports[-1].symbols_affected
    assert set(localized) == {"minf", "mtau", "hinf", "htau"}
    syms = global_symbols(out)
    assert "minf" not in syms  # declaration removed
    deriv = next(b for b in out.children if b.kind == "DerivativeBlock")
    first = deriv.children[-1].children[0]
    assert first.kind == "LocalDecl" and "minf" in first.attrs["names"]


def test_states_never_localized(corpus):
    for path in corpus[:6]:
        sink = DiagnosticSink()
        src_ast = prep(path.read_text())
        before_states = {
            n for n, s in global_symbols(src_ast).items() if s.has("State")
        }
        out, reports = run_passes(src_ast, ("inline", "localize"), sink)
        after = global_symbols(out)
        after_states = {n for n, s in after.items() if s.has("State")}
        assert before_states == after_states
        assert not (set(reports[-1].symbols_affected) & before_states)


def test_cross_kernel_variable_retained():
    src = (
        "NEURON { SUFFIX t\n RANGE g }\n"
        "ASSIGNED { g v }\n"
        "STATE { s }\n"
        "INITIAL { g = 2 }\n"
        "BREAKPOINT { SOLVE d METHOD cnexp }\n"
        "DERIVATIVE d { s' = -g*s }"
    )
    sink = DiagnosticSink()
    out, report = localize(prep(src), sink)
    assert report.symbols_affected == []
    assert "g" in global_symbols(out)


def test_observe_list_blocks_localization(cat_path):
    sink = DiagnosticSink()
    out, reports = run_passes(
        prep(cat_path.read_text()), ("inline", "localize"), sink, observe=("minf",)
    )
    assert "minf" not in reports[-1].symbols_affected
    assert "mtau" in reports[-1].symbols_affected


def test_localize_without_inline_is_subset(corpus):
    for path in corpus:
        sink = DiagnosticSink()
        _, rep_without = run_passes(prep(path.read_text()), ("localize",), sink)
        _, rep_with = run_passes(
            prep(path.read_text()), ("inline", "localize"), DiagnosticSink()
        )
        without = set(rep_without[-1].symbols_affected)
        with_inline = set(rep_with[-1].symbols_affected)
        assert without <= with_inline, path.name


# -- idempotence and reports -------------------------------------------------------


@pytest.mark.parametrize("passes", [("fold",), ("unroll",), ("inline",), ("localize",)])
def test_each_pass_idempotent_on_corpus(passes, corpus):
    for path in corpus[:10]:
        once, _ = run_passes(prep(path.read_text()), passes, DiagnosticSink())
        twice, _ = run_passes(once, passes, DiagnosticSink())
        assert structurally_equal(once, twice), (path.name, passes)


def test_reports_have_exact_counts(cat_path):
    sink = DiagnosticSink()
    _, reports = run_passes(
        prep(cat_path.read_text()), ("fold", "unroll", "inline", "localize"), sink
    )
    names = [r.name for r in reports]
    assert names == ["fold", "unroll", "inline", "localize"]
    inline_report = reports[2]
    assert inline_report.nodes_changed == 2  # rates() in INITIAL and DERIVATIVE
