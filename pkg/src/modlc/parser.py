"""Recursive-descent parser building the AST from the token stream.

The first syntax error aborts the file with a ParseError (no recovery).
Expression nodes keep their full source structure; nothing is rewritten or
folded while parsing.
"""

from __future__ import annotations

from .ast_nodes import Node, mk, number, validate
from .diagnostics import Diagnostic, ParseError, Span
from .lexer import KEYWORDS, UNSUPPORTED_KEYWORDS, Token, tokenize

_COMPARE_OPS = ("<", "<=", ">", ">=", "==", "!=")

_TOP_BLOCK_STARTERS = {
    "NEURON": "neuron",
    "UNITS": "units",
    "PARAMETER": "parameter",
    "ASSIGNED": "assigned",
    "STATE": "state",
    "BREAKPOINT": "breakpoint",
    "INITIAL": "initial",
    "DERIVATIVE": "derivative",
    "KINETIC": "kinetic",
    "LINEAR": "linear",
    "NONLINEAR": "nonlinear",
    "PROCEDURE": "procedure",
    "FUNCTION": "function",
    "TITLE": "title",
}


class Parser:
    def __init__(self, tokens: list[Token], filename: str = "<input>"):
        self.tokens = tokens
        self.filename = filename
        self.pos = 0

    # -- token plumbing ------------------------------------------------

    def peek(self, ahead: int = 0) -> Token:
        i = min(self.pos + ahead, len(self.tokens) - 1)
        return self.tokens[i]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def at(self, kind: str, text: str | None = None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (text is None or tok.text == text)

    def expect(self, kind: str, text: str | None = None) -> Token:
        if not self.at(kind, text):
            want = text if text is not None else kind
            raise self.fail(f"expected {want!r}, found {self.peek().text or self.peek().kind!r}")
        return self.advance()

    def fail(self, message: str, tok: Token | None = None) -> ParseError:
        tok = tok or self.peek()
        return ParseError([Diagnostic("error", message, tok.span, self.filename)])

    def span_from(self, start: Token) -> Span:
        last = self.tokens[max(self.pos - 1, 0)]
        return Span.merge(start.span, last.span)

    # -- program -------------------------------------------------------

    def parse_program(self) -> Node:
        blocks: list[Node] = []
        first = self.peek()
        while not self.at("eof"):
            blocks.append(self.parse_top_block())
        span = Span.merge(first.span, self.peek().span) if blocks else self.peek().span
        return mk("Program", blocks, span)

    def parse_top_block(self) -> Node:
        tok = self.peek()
        if tok.kind == "verbatim":
            self.advance()
            return mk("Verbatim", (), tok.span, text=tok.text)
        if tok.kind != "keyword":
            raise self.fail(f"expected a block keyword, found {tok.text!r}")
        if tok.text in UNSUPPORTED_KEYWORDS:
            raise self.fail(f"unsupported construct {tok.text!r}")
        handler = _TOP_BLOCK_STARTERS.get(tok.text)
        if handler is None:
            raise self.fail(f"unexpected keyword {tok.text!r} at top level")
        return getattr(self, f"parse_{handler}")()

    def parse_title(self) -> Node:
        start = self.expect("keyword", "TITLE")
        text_tok = self.expect("string")
        return mk("Title", (), self.span_from(start), text=text_tok.text.strip())

    # -- NEURON block ----------------------------------------------------

    def parse_neuron(self) -> Node:
        start = self.expect("keyword", "NEURON")
        self.expect("punctuation", "{")
        stmts: list[Node] = []
        while not self.at("punctuation", "}"):
            stmts.append(self.parse_neuron_stmt())
        self.expect("punctuation", "}")
        return mk("NeuronBlock", stmts, self.span_from(start))

    def parse_neuron_stmt(self) -> Node:
        tok = self.peek()
        if tok.kind != "keyword":
            raise self.fail(f"expected a NEURON-block statement, found {tok.text!r}")
        if tok.text == "SUFFIX":
            start = self.advance()
            name = self.expect("identifier")
            return mk("Suffix", (), self.span_from(start), name=name.text)
        if tok.text == "POINT_PROCESS":
            start = self.advance()
            name = self.expect("identifier")
            return mk("PointProcess", (), self.span_from(start), name=name.text)
        if tok.text == "USEION":
            start = self.advance()
            ion = self.expect("identifier").text
            reads: tuple[str, ...] = ()
            writes: tuple[str, ...] = ()
            valence = None
            if self.at("keyword", "READ"):
                self.advance()
                reads = self.parse_namelist()
            if self.at("keyword", "WRITE"):
                self.advance()
                writes = self.parse_namelist()
            if self.at("keyword", "VALENCE"):
                self.advance()
                valence = self.parse_signed_number_value()
            return mk(
                "UseIon", (), self.span_from(start), name=ion, reads=reads, writes=writes, valence=valence
            )
        if tok.text in ("RANGE", "GLOBAL", "NONSPECIFIC_CURRENT"):
            start = self.advance()
            names = self.parse_namelist()
            kind = {"RANGE": "RangeDecl", "GLOBAL": "GlobalDecl", "NONSPECIFIC_CURRENT": "NonspecificCurrent"}[
                tok.text
            ]
            return mk(kind, (), self.span_from(start), names=names)
        if tok.text in UNSUPPORTED_KEYWORDS:
            raise self.fail(f"unsupported construct {tok.text!r}")
        raise self.fail(f"unexpected keyword {tok.text!r} in NEURON block")

    def parse_namelist(self) -> tuple[str, ...]:
        names = [self.expect("identifier").text]
        while self.at("punctuation", ","):
            self.advance()
            names.append(self.expect("identifier").text)
        return tuple(names)

    # -- declaration blocks ----------------------------------------------

    def parse_units(self) -> Node:
        start = self.expect("keyword", "UNITS")
        self.expect("punctuation", "{")
        defs: list[Node] = []
        line_toks: list[Token] = []
        line_no = None
        while not self.at("punctuation", "}"):
            tok = self.advance()
            if tok.kind == "eof":
                raise self.fail("unterminated UNITS block", tok)
            if line_no is not None and tok.span.line != line_no and line_toks:
                defs.append(_unit_def(line_toks))
                line_toks = []
            line_no = tok.span.line
            line_toks.append(tok)
        if line_toks:
            defs.append(_unit_def(line_toks))
        self.expect("punctuation", "}")
        return mk("UnitsBlock", defs, self.span_from(start))

    def parse_parameter(self) -> Node:
        start = self.expect("keyword", "PARAMETER")
        self.expect("punctuation", "{")
        decls: list[Node] = []
        while not self.at("punctuation", "}"):
            decls.append(self.parse_param_decl())
        self.expect("punctuation", "}")
        return mk("ParamBlock", decls, self.span_from(start))

    def parse_param_decl(self) -> Node:
        name_tok = self.expect("identifier")
        children: list[Node] = []
        unit = None
        lo = hi = None
        if self.at("operator", "="):
            self.advance()
            children.append(self.parse_signed_number())
        if self.at("punctuation", "("):
            unit = self.parse_unit_annotation()
        if self.at("operator", "<"):
            self.advance()
            lo = self.parse_signed_number_value()
            self.expect("punctuation", ",")
            hi = self.parse_signed_number_value()
            self.expect("operator", ">")
        return mk(
            "ParamDecl",
            children,
            self.span_from(name_tok),
            name=name_tok.text,
            unit=unit,
            lo=lo,
            hi=hi,
        )

    def parse_signed_number(self) -> Node:
        start = self.peek()
        sign = 1.0
        text_sign = ""
        if self.at("operator", "-"):
            self.advance()
            sign, text_sign = -1.0, "-"
        tok = self.expect("number")
        return number(sign * float(tok.text), text_sign + tok.text, self.span_from(start))

    def parse_signed_number_value(self) -> float:
        return self.parse_signed_number().attrs["value"]

    def parse_unit_annotation(self) -> str:
        self.expect("punctuation", "(")
        toks: list[Token] = []
        depth = 1
        while depth > 0:
            tok = self.advance()
            if tok.kind == "eof":
                raise self.fail("unterminated unit annotation", tok)
            if tok.kind == "punctuation" and tok.text == "(":
                depth += 1
            elif tok.kind == "punctuation" and tok.text == ")":
                depth -= 1
                if depth == 0:
                    break
            toks.append(tok)
        return join_unit_tokens([t.text for t in toks])

    def parse_assigned(self) -> Node:
        return self._parse_var_block("ASSIGNED", "AssignedBlock")

    def parse_state(self) -> Node:
        return self._parse_var_block("STATE", "StateBlock")

    def _parse_var_block(self, kw: str, kind: str) -> Node:
        start = self.expect("keyword", kw)
        self.expect("punctuation", "{")
        decls: list[Node] = []
        while not self.at("punctuation", "}"):
            decls.append(self.parse_var_decl())
        self.expect("punctuation", "}")
        return mk(kind, decls, self.span_from(start))

    def parse_var_decl(self) -> Node:
        name_tok = self.expect("identifier")
        size = None
        if self.at("punctuation", "["):
            self.advance()
            size_tok = self.expect("number")
            size = int(float(size_tok.text))
            if size < 1 or size != float(size_tok.text):
                raise self.fail("array size must be a positive integer", size_tok)
            self.expect("punctuation", "]")
        unit = None
        if self.at("punctuation", "("):
            unit = self.parse_unit_annotation()
        return mk("VarDecl", (), self.span_from(name_tok), name=name_tok.text, size=size, unit=unit)

    # -- kernel / callable blocks -----------------------------------------

    def parse_breakpoint(self) -> Node:
        start = self.expect("keyword", "BREAKPOINT")
        body = self.parse_statement_block("breakpoint")
        return mk("BreakpointBlock", (body,), self.span_from(start))

    def parse_initial(self) -> Node:
        start = self.expect("keyword", "INITIAL")
        body = self.parse_statement_block("initial")
        return mk("InitialBlock", (body,), self.span_from(start))

    def parse_derivative(self) -> Node:
        start = self.expect("keyword", "DERIVATIVE")
        name = self.expect("identifier").text
        body = self.parse_statement_block("derivative")
        return mk("DerivativeBlock", (body,), self.span_from(start), name=name)

    def parse_kinetic(self) -> Node:
        start = self.expect("keyword", "KINETIC")
        name = self.expect("identifier").text
        body = self.parse_statement_block("kinetic")
        return mk("KineticBlock", (body,), self.span_from(start), name=name)

    def parse_linear(self) -> Node:
        start = self.expect("keyword", "LINEAR")
        name = self.expect("identifier").text
        body = self.parse_statement_block("linear")
        return mk("LinearBlock", (body,), self.span_from(start), name=name)

    def parse_nonlinear(self) -> Node:
        start = self.expect("keyword", "NONLINEAR")
        name = self.expect("identifier").text
        body = self.parse_statement_block("nonlinear")
        return mk("NonlinearBlock", (body,), self.span_from(start), name=name)

    def parse_procedure(self) -> Node:
        return self._parse_callable("PROCEDURE", "ProcedureBlock")

    def parse_function(self) -> Node:
        return self._parse_callable("FUNCTION", "FunctionBlock")

    def _parse_callable(self, kw: str, kind: str) -> Node:
        start = self.expect("keyword", kw)
        name = self.expect("identifier").text
        self.expect("punctuation", "(")
        formals: list[Node] = []
        while not self.at("punctuation", ")"):
            if formals:
                self.expect("punctuation", ",")
            arg_tok = self.expect("identifier")
            unit = None
            if self.at("punctuation", "("):
                unit = self.parse_unit_annotation()
            formals.append(mk("FormalArg", (), arg_tok.span, name=arg_tok.text, unit=unit))
        self.expect("punctuation", ")")
        ret_unit = None
        if self.at("punctuation", "("):
            ret_unit = self.parse_unit_annotation()
        body = self.parse_statement_block("procedure")
        return mk(kind, (*formals, body), self.span_from(start), name=name, unit=ret_unit)

    # -- statements --------------------------------------------------------

    def parse_statement_block(self, context: str) -> Node:
        start = self.expect("punctuation", "{")
        stmts: list[Node] = []
        while not self.at("punctuation", "}"):
            stmts.append(self.parse_statement(context))
        self.expect("punctuation", "}")
        return mk("StatementBlock", stmts, self.span_from(start))

    def parse_statement(self, context: str) -> Node:
        tok = self.peek()
        if tok.kind == "verbatim":
            self.advance()
            return mk("Verbatim", (), tok.span, text=tok.text)
        if tok.kind == "keyword":
            if tok.text == "LOCAL":
                start = self.advance()
                names = self.parse_namelist()
                return mk("LocalDecl", (), self.span_from(start), names=names)
            if tok.text == "SOLVE":
                start = self.advance()
                target = self.expect("identifier").text
                method = None
                if self.at("keyword", "METHOD"):
                    self.advance()
                    method = self.expect("identifier").text
                return mk("Solve", (), self.span_from(start), target=target, method=method)
            if tok.text == "CONDUCTANCE":
                start = self.advance()
                var = self.expect("identifier").text
                ion = None
                if self.at("keyword", "USEION"):
                    self.advance()
                    ion = self.expect("identifier").text
                return mk("ConductanceStmt", (), self.span_from(start), var=var, ion=ion)
            if tok.text == "IF":
                return self.parse_if(context)
            if tok.text == "WHILE":
                start = self.advance()
                self.expect("punctuation", "(")
                cond = self.parse_expression()
                self.expect("punctuation", ")")
                body = self.parse_statement_block(context)
                return mk("While", (cond, body), self.span_from(start))
            if tok.text == "FROM":
                start = self.advance()
                var = self.expect("identifier").text
                self.expect("operator", "=")
                lo = self.parse_expression()
                self.expect("keyword", "TO")
                hi = self.parse_expression()
                body = self.parse_statement_block(context)
                return mk("FromLoop", (lo, hi, body), self.span_from(start), name=var)
            if tok.text == "CONSERVE":
                start = self.advance()
                lhs = self.parse_expression()
                self.expect("operator", "=")
                rhs = self.parse_expression()
                return mk("Conserve", (lhs, rhs), self.span_from(start))
            if tok.text in UNSUPPORTED_KEYWORDS:
                raise self.fail(f"unsupported construct {tok.text!r}")
            raise self.fail(f"unexpected keyword {tok.text!r} in statement position")
        if tok.kind == "operator" and tok.text == "~":
            if context == "kinetic":
                return self.parse_reaction()
            return self.parse_equation()
        if tok.kind == "identifier":
            return self.parse_assign_or_call()
        raise self.fail(f"expected a statement, found {tok.text or tok.kind!r}")

    def parse_if(self, context: str) -> Node:
        start = self.expect("keyword", "IF")
        self.expect("punctuation", "(")
        cond = self.parse_expression()
        self.expect("punctuation", ")")
        then_block = self.parse_statement_block(context)
        children = [cond, then_block]
        if self.at("keyword", "ELSE"):
            self.advance()
            if self.at("keyword", "IF"):
                nested = self.parse_if(context)
                children.append(mk("StatementBlock", (nested,), nested.span))
            else:
                children.append(self.parse_statement_block(context))
        return mk("If", children, self.span_from(start))

    def parse_assign_or_call(self) -> Node:
        start = self.peek()
        target = self.parse_name_ref()
        if self.at("operator", "'"):
            self.advance()
            target = mk("DerivVar", (target,), self.span_from(start))
        if self.at("operator", "="):
            self.advance()
            value = self.parse_expression()
            return mk("Assign", (target, value), self.span_from(start))
        if target.kind == "Call":
            return mk("ExprStatement", (target,), self.span_from(start))
        if target.kind == "DerivVar":
            raise self.fail("derivative target must be assigned")
        raise self.fail(f"expected '=' or a call after {start.text!r}", start)

    def parse_name_ref(self) -> Node:
        name_tok = self.expect("identifier")
        if self.at("punctuation", "("):
            self.advance()
            args: list[Node] = []
            while not self.at("punctuation", ")"):
                if args:
                    self.expect("punctuation", ",")
                args.append(self.parse_expression())
            self.expect("punctuation", ")")
            return mk("Call", args, self.span_from(name_tok), name=name_tok.text)
        if self.at("punctuation", "["):
            self.advance()
            index = self.parse_expression()
            self.expect("punctuation", "]")
            return mk("IndexedName", (index,), self.span_from(name_tok), name=name_tok.text)
        return mk("Identifier", (), name_tok.span, name=name_tok.text)

    def parse_reaction(self) -> Node:
        start = self.expect("operator", "~")
        lhs = self.parse_reaction_side()
        self.expect("operator", "<->")
        rhs = self.parse_reaction_side()
        self.expect("punctuation", "(")
        kf = self.parse_expression()
        self.expect("punctuation", ",")
        kb = self.parse_expression()
        self.expect("punctuation", ")")
        return mk("Reaction", (lhs, rhs, kf, kb), self.span_from(start))

    def parse_reaction_side(self) -> Node:
        start = self.peek()
        terms = [self.parse_reaction_term()]
        while self.at("operator", "+"):
            self.advance()
            terms.append(self.parse_reaction_term())
        return mk("ReactionSide", terms, self.span_from(start))

    def parse_reaction_term(self) -> Node:
        start = self.peek()
        coeff = 1
        if self.at("number"):
            tok = self.advance()
            coeff = int(float(tok.text))
            if coeff < 1 or coeff != float(tok.text):
                raise self.fail("stoichiometric coefficient must be a positive integer", tok)
        name_tok = self.expect("identifier")
        if self.at("punctuation", "["):
            self.advance()
            index = self.parse_expression()
            self.expect("punctuation", "]")
            species = mk("IndexedName", (index,), self.span_from(name_tok), name=name_tok.text)
        else:
            species = mk("Identifier", (), name_tok.span, name=name_tok.text)
        return mk("ReactionTerm", (species,), self.span_from(start), coeff=coeff)

    def parse_equation(self) -> Node:
        start = self.expect("operator", "~")
        lhs = self.parse_expression()
        self.expect("operator", "=")
        rhs = self.parse_expression()
        return mk("Equation", (lhs, rhs), self.span_from(start))

    # -- expressions -------------------------------------------------------

    def parse_expression(self) -> Node:
        return self.parse_or()

    def _parse_binop_chain(self, sub, ops: tuple[str, ...]) -> Node:
        node = sub()
        while self.peek().kind == "operator" and self.peek().text in ops:
            op = self.advance().text
            right = sub()
            span = Span.merge(node.span, right.span) if node.span and right.span else None
            node = Node("Binary", (node, right), {"op": op}, span)
        return node

    def parse_or(self) -> Node:
        return self._parse_binop_chain(self.parse_and, ("||",))

    def parse_and(self) -> Node:
        return self._parse_binop_chain(self.parse_comparison, ("&&",))

    def parse_comparison(self) -> Node:
        return self._parse_binop_chain(self.parse_additive, _COMPARE_OPS)

    def parse_additive(self) -> Node:
        return self._parse_binop_chain(self.parse_multiplicative, ("+", "-"))

    def parse_multiplicative(self) -> Node:
        return self._parse_binop_chain(self.parse_unary, ("*", "/"))

    def parse_unary(self) -> Node:
        tok = self.peek()
        if tok.kind == "operator" and tok.text in ("-", "+", "!"):
            self.advance()
            operand = self.parse_unary()
            span = Span.merge(tok.span, operand.span) if operand.span else tok.span
            if tok.text == "+":
                return operand
            return mk("Unary", (operand,), span, op=tok.text)
        return self.parse_power()

    def parse_power(self) -> Node:
        base = self.parse_primary()
        if self.at("operator", "^"):
            self.advance()
            exponent = self.parse_unary()  # right-assoc, allows x^-2
            span = Span.merge(base.span, exponent.span) if base.span and exponent.span else None
            return Node("Binary", (base, exponent), {"op": "^"}, span)
        return base

    def parse_primary(self) -> Node:
        tok = self.peek()
        if tok.kind == "number":
            self.advance()
            return number(float(tok.text), tok.text, tok.span)
        if tok.kind == "string":
            self.advance()
            return mk("String", (), tok.span, text=tok.text)
        if tok.kind == "punctuation" and tok.text == "(":
            self.advance()
            inner = self.parse_expression()
            self.expect("punctuation", ")")
            return inner
        if tok.kind == "identifier":
            return self.parse_name_ref()
        raise self.fail(f"expected an expression, found {tok.text or tok.kind!r}")


def _unit_def(tokens: list[Token]) -> Node:
    span = Span.merge(tokens[0].span, tokens[-1].span)
    return mk("UnitDef", (), span, text=join_unit_tokens([t.text for t in tokens]))


def join_unit_tokens(texts: list[str]) -> str:
    """Deterministic canonical spacing for unit definition token runs."""
    out: list[str] = []
    tight = set("/-^*")
    for i, text in enumerate(texts):
        if i > 0:
            prev = texts[i - 1]
            if prev == "(" or text in (")", ","):
                sep = ""
            elif text in tight or prev in tight:
                sep = ""
            else:
                sep = " "
            out.append(sep)
        out.append(text)
    return "".join(out)


def parse(tokens: list[Token], filename: str = "<input>") -> Node:
    """Parse a token list into a validated Program node."""
    program = Parser(tokens, filename).parse_program()
    validate(program, filename)
    return program


def parse_source(source: str, filename: str = "<input>") -> Node:
    return parse(tokenize(source, filename), filename)
