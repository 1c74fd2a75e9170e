import pytest

from modlc.ast_nodes import check_span_soundness, dump_text, structurally_equal
from modlc.diagnostics import ParseError
from modlc.parser import parse_source


def test_minimal_neuron_block():
    ast = parse_source("NEURON { SUFFIX cat }")
    assert ast.kind == "Program"
    assert [c.kind for c in ast.children] == ["NeuronBlock"]
    (suffix,) = ast.children[0].children
    assert suffix.kind == "Suffix" and suffix.attrs["name"] == "cat"


def test_cat_corpus_block_inventory(cat_path):
    ast = parse_source(cat_path.read_text(), str(cat_path))
    kinds = [c.kind for c in ast.children]
    for expected in (
        "NeuronBlock",
        "ParamBlock",
        "AssignedBlock",
        "StateBlock",
        "BreakpointBlock",
        "DerivativeBlock",
        "ProcedureBlock",
    ):
        assert expected in kinds


def test_missing_identifier_is_a_syntax_error():
    with pytest.raises(ParseError) as err:
        parse_source("NEURON { SUFFIX }")
    diag = err.value.diagnostics[0]
    assert diag.severity == "error"
    assert diag.span is not None


def test_corpus_parses_without_diagnostics(corpus):
    for path in corpus:
        parse_source(path.read_text(), str(path))


def test_span_soundness_on_corpus(corpus):
    for path in corpus:
        ast = parse_source(path.read_text(), str(path))
        assert check_span_soundness(ast), f"span soundness violated in {path.name}"


def test_determinism(corpus):
    for path in corpus[:5]:
        src = path.read_text()
        assert structurally_equal(parse_source(src), parse_source(src))


def test_power_binds_tighter_than_unary_minus():
    ast = parse_source("PROCEDURE p() { y = -x^2 }")
    assign = ast.children[0].children[-1].children[0]
    value = assign.children[1]
    assert value.kind == "Unary" and value.attrs["op"] == "-"
    assert value.children[0].kind == "Binary" and value.children[0].attrs["op"] == "^"


def test_power_right_associative():
    ast = parse_source("PROCEDURE p() { y = a^b^c }")
    value = ast.children[0].children[-1].children[0].children[1]
    assert value.attrs["op"] == "^"
    assert value.children[1].attrs["op"] == "^"  # a^(b^c)


def test_else_if_wraps_nested_if():
    ast = parse_source(
        "PROCEDURE p() { IF (a > 0) { x = 1 } ELSE IF (a < 0) { x = 2 } ELSE { x = 3 } }"
    )
    if_stmt = ast.children[0].children[-1].children[0]
    assert if_stmt.kind == "If" and len(if_stmt.children) == 3
    nested = if_stmt.children[2].children[0]
    assert nested.kind == "If" and len(nested.children) == 3


def test_reaction_statement_structure():
    ast = parse_source("KINETIC s { ~ A + 2 B <-> C (kf, kb) }")
    reaction = ast.children[0].children[-1].children[0]
    assert reaction.kind == "Reaction"
    lhs, rhs, kf, kb = reaction.children
    assert [t.attrs["coeff"] for t in lhs.children] == [1, 2]
    assert rhs.children[0].children[0].attrs["name"] == "C"
    assert kf.attrs["name"] == "kf" and kb.attrs["name"] == "kb"


def test_conserve_statement():
    ast = parse_source("KINETIC s { ~ A <-> B (kf, kb)\n CONSERVE A + B = 1 }")
    conserve = ast.children[0].children[-1].children[1]
    assert conserve.kind == "Conserve"


def test_equation_in_linear_block():
    ast = parse_source("LINEAR seq { ~ 2*x + y = 1 }")
    eq = ast.children[0].children[-1].children[0]
    assert eq.kind == "Equation"


def test_unsupported_construct_reports_cleanly():
    with pytest.raises(ParseError) as err:
        parse_source("NEURON { SUFFIX x }\nTABLE foo FROM 0 TO 1 WITH 10")
    assert "unsupported construct" in err.value.diagnostics[0].message


def test_derivative_target_forms():
    ast = parse_source("DERIVATIVE d { m' = -m\n x[0]' = -x[0] }")
    stmts = ast.children[0].children[-1].children
    assert stmts[0].children[0].kind == "DerivVar"
    assert stmts[1].children[0].children[0].kind == "IndexedName"


def test_solve_with_and_without_method():
    ast = parse_source("BREAKPOINT { SOLVE a METHOD cnexp }\nINITIAL { SOLVE b }")
    solve_a = ast.children[0].children[-1].children[0]
    solve_b = ast.children[1].children[-1].children[0]
    assert solve_a.attrs["method"] == "cnexp"
    assert solve_b.attrs["method"] is None


def test_units_block_retained_verbatim():
    ast = parse_source("UNITS {\n (mV) = (millivolt)\n FARADAY = (faraday) (coulomb)\n}")
    defs = [d.attrs["text"] for d in ast.children[0].children]
    assert len(defs) == 2
    assert "millivolt" in defs[0] and "faraday" in defs[1]


def test_dump_text_mentions_kinds():
    ast = parse_source("NEURON { SUFFIX cat }")
    text = dump_text(ast)
    assert "Program" in text and "Suffix" in text
