"""Tokenizer for the supported NMODL subset.

Tokens carry the trivia (whitespace and comments) that precedes them so the
exact input bytes can be reconstructed from the token stream; `COMMENT ...
ENDCOMMENT` blocks and `:` / `?` line comments are folded into that trivia.
`VERBATIM ... ENDVERBATIM` is captured as a single opaque token whose text is
the body between the two keywords.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .diagnostics import Diagnostic, LexError, Span

KEYWORDS = frozenset(
    {
        "NEURON",
        "SUFFIX",
        "POINT_PROCESS",
        "USEION",
        "READ",
        "WRITE",
        "VALENCE",
        "RANGE",
        "GLOBAL",
        "NONSPECIFIC_CURRENT",
        "UNITS",
        "PARAMETER",
        "ASSIGNED",
        "STATE",
        "BREAKPOINT",
        "SOLVE",
        "METHOD",
        "CONDUCTANCE",
        "INITIAL",
        "DERIVATIVE",
        "KINETIC",
        "CONSERVE",
        "LINEAR",
        "NONLINEAR",
        "PROCEDURE",
        "FUNCTION",
        "LOCAL",
        "IF",
        "ELSE",
        "WHILE",
        "FROM",
        "TO",
        "TITLE",
        "VERBATIM",
        "ENDVERBATIM",
        "COMMENT",
        "ENDCOMMENT",
    }
)

# Constructs that exist in full NMODL but are outside the supported subset.
# They lex as keywords so the parser can report "unsupported construct"
# instead of a generic syntax error.
UNSUPPORTED_KEYWORDS = frozenset(
    {
        "TABLE",
        "NET_RECEIVE",
        "POINTER",
        "BBCOREPOINTER",
        "DEPEND",
        "WATCH",
        "FOR_NETCONS",
        "PROTECT",
        "MUTEXLOCK",
        "MUTEXUNLOCK",
        "INDEPENDENT",
        "DISCRETE",
        "BEFORE",
        "AFTER",
        "NETRECEIVE",
        "ELECTRODE_CURRENT",
        "CONSTANT",
        "INCLUDE",
        "EXTERNAL",
        "THREADSAFE",
        "UNITSON",
        "UNITSOFF",
        "LAG",
        "BY",
    }
)

_MULTI_OPS = ("<->", "->", "<=", ">=", "==", "!=", "&&", "||")
_SINGLE_OPS = "+-*/^=<>!'~"
_PUNCT = "(){}[],"


@dataclass(frozen=True)
class Token:
    kind: str  # keyword | identifier | number | string | operator | punctuation | verbatim | eof
    text: str
    span: Span
    prefix: str = ""  # trivia (whitespace/comments) preceding this token
    raw: str | None = None  # full source slice when text is not verbatim bytes

    @property
    def source_text(self) -> str:
        return self.raw if self.raw is not None else self.text

    def __repr__(self) -> str:  # compact, useful in pytest output
        return f"{self.kind}({self.text!r})"


def reconstruct(tokens: list[Token]) -> str:
    """Inverse of tokenize: concatenation of trivia and token bytes."""
    return "".join(t.prefix + t.source_text for t in tokens)


class _Scanner:
    def __init__(self, source: str, filename: str):
        self.src = source
        self.filename = filename
        self.pos = 0
        self.line = 1
        self.col = 1

    def at_end(self) -> bool:
        return self.pos >= len(self.src)

    def peek(self, ahead: int = 0) -> str:
        i = self.pos + ahead
        return self.src[i] if i < len(self.src) else ""

    def advance(self, n: int = 1) -> str:
        taken = self.src[self.pos : self.pos + n]
        for ch in taken:
            if ch == "\n":
                self.line += 1
                self.col = 1
            else:
                self.col += 1
        self.pos += n
        return taken

    def here(self) -> tuple[int, int, int]:
        return self.line, self.col, self.pos

    def span_from(self, start: tuple[int, int, int]) -> Span:
        line, col, offset = start
        return Span(line, col, offset, self.pos - offset)

    def error(self, message: str, start: tuple[int, int, int] | None = None) -> LexError:
        start = start or self.here()
        span = Span(start[0], start[1], start[2], max(1, self.pos - start[2]))
        return LexError([Diagnostic("error", message, span, self.filename)])


def _is_ident_start(ch: str) -> bool:
    return ch.isalpha() or ch == "_"


def _is_ident_char(ch: str) -> bool:
    return ch.isalnum() or ch == "_"


def tokenize(source: str, filename: str = "<input>") -> list[Token]:
    """Lex NMODL source into tokens; raises LexError on malformed input.

    The returned list always ends with an `eof` token whose prefix holds any
    trailing trivia, so `reconstruct(tokens) == source`.
    """
    sc = _Scanner(source, filename)
    tokens: list[Token] = []

    while True:
        prefix = _skip_trivia(sc)
        if sc.at_end():
            tokens.append(Token("eof", "", Span(sc.line, sc.col, sc.pos, 0), prefix))
            return tokens
        start = sc.here()
        ch = sc.peek()

        if _is_ident_start(ch):
            word = _scan_word(sc)
            span = sc.span_from(start)
            if word == "VERBATIM":
                tokens.append(_scan_verbatim(sc, start, prefix))
            elif word == "TITLE":
                tokens.append(Token("keyword", word, span, prefix))
                tokens.append(_scan_line_remainder(sc))
            elif word in KEYWORDS or word in UNSUPPORTED_KEYWORDS:
                tokens.append(Token("keyword", word, span, prefix))
            else:
                tokens.append(Token("identifier", word, span, prefix))
        elif ch.isdigit() or (ch == "." and sc.peek(1).isdigit()):
            text = _scan_number(sc)
            span = sc.span_from(start)
            value = float(text)
            if not math.isfinite(value):
                raise sc.error(f"number literal {text!r} is not finite", start)
            tokens.append(Token("number", text, span, prefix))
        elif ch == '"':
            text = _scan_string(sc)
            tokens.append(Token("string", text, sc.span_from(start), prefix))
        else:
            for op in _MULTI_OPS:
                if sc.src.startswith(op, sc.pos):
                    sc.advance(len(op))
                    tokens.append(Token("operator", op, sc.span_from(start), prefix))
                    break
            else:
                if ch in _SINGLE_OPS:
                    sc.advance()
                    tokens.append(Token("operator", ch, sc.span_from(start), prefix))
                elif ch in _PUNCT:
                    sc.advance()
                    tokens.append(Token("punctuation", ch, sc.span_from(start), prefix))
                else:
                    sc.advance()
                    raise sc.error(f"unknown character {ch!r}", start)


def _skip_trivia(sc: _Scanner) -> str:
    start = sc.pos
    while not sc.at_end():
        ch = sc.peek()
        if ch in " \t\r\n":
            sc.advance()
        elif ch in ":?":
            while not sc.at_end() and sc.peek() != "\n":
                sc.advance()
        elif ch == "C" and _word_at(sc) == "COMMENT":
            kw_start = sc.here()
            sc.advance(len("COMMENT"))
            _scan_until_keyword(sc, "ENDCOMMENT", kw_start, "unterminated COMMENT block")
        else:
            break
    return sc.src[start : sc.pos]


def _word_at(sc: _Scanner) -> str:
    i = sc.pos
    if not _is_ident_start(sc.peek()):
        return ""
    while i < len(sc.src) and _is_ident_char(sc.src[i]):
        i += 1
    return sc.src[sc.pos : i]


def _scan_word(sc: _Scanner) -> str:
    start = sc.pos
    while not sc.at_end() and _is_ident_char(sc.peek()):
        sc.advance()
    return sc.src[start : sc.pos]


def _scan_number(sc: _Scanner) -> str:
    start = sc.pos
    while sc.peek().isdigit():
        sc.advance()
    if sc.peek() == ".":
        sc.advance()
        while sc.peek().isdigit():
            sc.advance()
    if sc.peek() in "eE":
        save = sc.pos, sc.line, sc.col
        sc.advance()
        if sc.peek() in "+-":
            sc.advance()
        if sc.peek().isdigit():
            while sc.peek().isdigit():
                sc.advance()
        else:  # not an exponent after all (e.g. "2e" followed by an identifier)
            sc.pos, sc.line, sc.col = save
    return sc.src[start : sc.pos]


def _scan_string(sc: _Scanner) -> str:
    start = sc.here()
    sc.advance()  # opening quote
    while not sc.at_end() and sc.peek() not in '"\n':
        sc.advance()
    if sc.peek() != '"':
        raise sc.error("unterminated string literal", start)
    sc.advance()
    return sc.src[start[2] : sc.pos]


def _scan_line_remainder(sc: _Scanner) -> Token:
    start = sc.here()
    while not sc.at_end() and sc.peek() != "\n":
        sc.advance()
    text = sc.src[start[2] : sc.pos]
    return Token("string", text, sc.span_from(start), "")


def _scan_until_keyword(
    sc: _Scanner, end_kw: str, start: tuple[int, int, int], err: str
) -> str:
    body_start = sc.pos
    idx = sc.src.find(end_kw, sc.pos)
    if idx < 0:
        sc.pos = len(sc.src)
        raise sc.error(err, start)
    body = sc.src[body_start:idx]
    sc.advance(idx - sc.pos + len(end_kw))
    return body


def _scan_verbatim(sc: _Scanner, start: tuple[int, int, int], prefix: str) -> Token:
    body = _scan_until_keyword(sc, "ENDVERBATIM", start, "unterminated VERBATIM block")
    span = sc.span_from(start)
    raw = "VERBATIM" + body + "ENDVERBATIM"
    return Token("verbatim", body, span, prefix, raw)
