import pytest

from modlc.diagnostics import LexError
from modlc.lexer import Token, reconstruct, tokenize


def kinds_and_texts(source):
    return [(t.kind, t.text) for t in tokenize(source) if t.kind != "eof"]


def test_simple_assignment_lexemes():
    assert kinds_and_texts("gcatbar = 0.003") == [
        ("identifier", "gcatbar"),
        ("operator", "="),
        ("number", "0.003"),
    ]


def test_empty_input():
    toks = tokenize("")
    assert [t.kind for t in toks] == ["eof"]
    assert reconstruct(toks) == ""


def manual_verbatim_segmentation(source):
    # independent oracle: find the region between the two keywords by hand
    start = source.index("VERBATIM") + len("VERBATIM")
    end = source.index("ENDVERBATIM")
    return source[start:end]


def test_verbatim_captured_as_single_opaque_token():
    src = "VERBATIM x++; ENDVERBATIM"
    toks = [t for t in tokenize(src) if t.kind != "eof"]
    assert len(toks) == 1
    assert toks[0].kind == "verbatim"
    assert toks[0].text == manual_verbatim_segmentation(src)
    assert toks[0].text == " x++; "


@pytest.mark.parametrize(
    "src",
    [
        "NEURON { SUFFIX cat }\n",
        ": comment line\nx = 1 ? trailing comment\n",
        "COMMENT\nanything ENDCOMMENT x=2",
        'TITLE some title text\ns = "quoted"\n',
        "a = 3e-3 + .5^2\n~ A <-> B (kf, kb)\n",
        "VERBATIM\nraw c code\nENDVERBATIM\nafter = 1\n",
        "FROM i = 0 TO 5 { x[i] = i }\n",
    ],
)
def test_byte_reconstruction(src):
    assert reconstruct(tokenize(src)) == src


def test_byte_reconstruction_on_corpus(corpus):
    for path in corpus:
        src = path.read_text()
        assert reconstruct(tokenize(src, str(path))) == src


def test_number_tokens_parse_finite(corpus):
    for path in corpus:
        for tok in tokenize(path.read_text()):
            if tok.kind == "number":
                value = float(tok.text)
                assert value == value and abs(value) != float("inf")


def test_determinism():
    src = "PARAMETER { a = 1.5 (mV) }\n"
    assert tokenize(src) == tokenize(src)


def test_unknown_character_has_span():
    with pytest.raises(LexError) as err:
        tokenize("a = 1 @ 2")
    diag = err.value.diagnostics[0]
    assert "unknown character" in diag.message
    assert diag.span is not None and diag.span.line == 1


def test_unterminated_verbatim():
    with pytest.raises(LexError) as err:
        tokenize("VERBATIM never closed")
    assert "unterminated VERBATIM" in err.value.diagnostics[0].message


def test_unterminated_string():
    with pytest.raises(LexError) as err:
        tokenize('s = "no closing quote')
    assert "unterminated string" in err.value.diagnostics[0].message


def test_line_and_column_tracking():
    toks = tokenize("a = 1\n  b = 2\n")
    b = next(t for t in toks if t.text == "b")
    assert (b.span.line, b.span.col) == (2, 3)


def test_comments_are_skipped_but_preserved_in_trivia():
    toks = tokenize("x : note\ny")
    names = [t.text for t in toks if t.kind == "identifier"]
    assert names == ["x", "y"]


def test_keywords_vs_identifiers():
    toks = kinds_and_texts("NEURON SUFFIX foo TABLE")
    assert toks[0] == ("keyword", "NEURON")
    assert toks[1] == ("keyword", "SUFFIX")
    assert toks[2] == ("identifier", "foo")
    assert toks[3] == ("keyword", "TABLE")  # recognized so the parser can reject it
