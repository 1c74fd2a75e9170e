import pytest

from modlc.ast_nodes import (
    copy_tree,
    count_nodes,
    iter_nodes,
    number,
    rewrite,
    structurally_equal,
    visit,
)
from modlc.diagnostics import SemanticError
from modlc.parser import parse_source
from modlc.symtab import build_symbol_tables, global_symbols


def resolved(src):
    return build_symbol_tables(parse_source(src))


def test_symbol_properties_for_cat_model(cat_path):
    ast = resolved(cat_path.read_text())
    syms = global_symbols(ast)
    assert syms["gcatbar"].has("Parameter") and syms["gcatbar"].has("Range")
    assert syms["m"].has("State") and syms["h"].has("State")
    assert syms["minf"].has("Assigned") and syms["minf"].has("Range")
    assert syms["eca"].has("Ion") and syms["ica"].has("Ion")
    rates = next(b for b in ast.children if b.kind == "ProcedureBlock")
    local_table = rates.scope
    assert local_table.lookup_local("am").has("Local")
    assert local_table.lookup_local("vm").has("Argument")
    # inner scope resolves through the parent chain
    assert local_table.lookup("gcatbar") is syms["gcatbar"]


def test_program_with_no_declarations_has_empty_global_table():
    ast = resolved("NEURON { SUFFIX nil }")
    user_syms = {n: s for n, s in global_symbols(ast).items() if not s.builtin}
    assert user_syms == {}


def test_local_in_sibling_procedures_are_distinct_symbols():
    ast = resolved(
        "PROCEDURE p1() { LOCAL x\n x = 1 }\nPROCEDURE p2() { LOCAL x\n x = 2 }"
    )
    p1, p2 = [b for b in ast.children if b.kind == "ProcedureBlock"]
    s1 = p1.scope.lookup_local("x")
    s2 = p2.scope.lookup_local("x")
    assert s1 is not None and s2 is not None and s1 is not s2


def test_undeclared_identifier_diagnostic():
    with pytest.raises(SemanticError) as err:
        resolved("ASSIGNED { y }\nPROCEDURE p() { y = nothere }")
    assert "undeclared identifier 'nothere'" in err.value.diagnostics[0].message


def test_redeclaration_diagnostic():
    with pytest.raises(SemanticError) as err:
        resolved("PARAMETER { a = 1 }\nSTATE { a }")
    assert "redeclaration" in err.value.diagnostics[0].message


def test_symbol_tables_idempotent(cat_path):
    src = cat_path.read_text()
    ast = resolved(src)
    first = {n: id(s) for n, s in global_symbols(ast).items()}
    build_symbol_tables(ast)
    again = set(global_symbols(ast))
    assert set(first) == again


def test_count_nodes_equals_child_sum_plus_one(cat_path):
    ast = parse_source(cat_path.read_text())
    assert count_nodes(ast) == 1 + sum(count_nodes(c) for c in ast.children)
    assert count_nodes(ast) > 0


def test_visit_fires_once_per_node(cat_path):
    ast = parse_source(cat_path.read_text())
    seen = {"n": 0}
    visit(ast, {k: (lambda node: seen.__setitem__("n", seen["n"] + 1)) for k in ("Identifier",)})
    idents = sum(1 for n in iter_nodes(ast) if n.kind == "Identifier")
    assert seen["n"] == idents


def test_binary_operator_census_visitor(cat_path):
    ast = parse_source(cat_path.read_text())
    counts: dict[str, int] = {}

    def tally(node):
        counts[node.attrs["op"]] = counts.get(node.attrs["op"], 0) + 1

    visit(ast, {"Binary": tally})
    assert counts["*"] >= 4 and counts["/"] >= 4 and counts["+"] >= 3


def test_identity_rewrite_preserves_structure(cat_path):
    ast = parse_source(cat_path.read_text())
    again = rewrite(ast, lambda n: None)
    assert structurally_equal(ast, again)


def test_rewrite_never_aliases_nodes(cat_path):
    ast = parse_source(cat_path.read_text())
    out = copy_tree(ast)
    original_ids = {id(n) for n in iter_nodes(ast)}
    assert all(id(n) not in original_ids for n in iter_nodes(out))


def test_rewriting_visitor_mapping_number_to_itself():
    ast = parse_source("PROCEDURE p() { y = 1 + 2 }")
    out = rewrite(ast, lambda n: number(n.attrs["value"]) if n.kind == "Number" else None)
    assert structurally_equal(ast, out)


def test_structural_equality_reflexive(cat_path):
    ast = parse_source(cat_path.read_text())
    assert structurally_equal(ast, ast)


def test_numeric_attrs_compare_by_value():
    a = parse_source("PARAMETER { g = 0.003 }")
    b = parse_source("PARAMETER { g = 3e-3 }")
    assert structurally_equal(a, b)


def test_operand_order_matters():
    a = parse_source("PROCEDURE p() { z = x + y }")
    b = parse_source("PROCEDURE p() { z = y + x }")
    assert not structurally_equal(a, b)
