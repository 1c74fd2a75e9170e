"""Small symbolic expression engine.

Expressions are immutable trees in a canonical form: sums and products are
flattened, sorted by a fixed total order (constants first, then variables by
name, then composites by recursive comparison) and never have fewer than two
elements. Division is Power(d, -1) inside a Product; subtraction is a Sum
term with factor -1. The engine provides exactly what solver lowering needs:
simplification, exact differentiation, symbolic Gaussian elimination and
common-subexpression elimination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

from .ast_nodes import Node, mk, number
from .diagnostics import Diagnostic, SolverError

BUILTINS = ("exp", "log", "pow", "sqrt", "fabs")

MAX_NODES = 100_000  # guard against pathological expression blowup


class SymError(SolverError):
    def __init__(self, message: str):
        super().__init__([Diagnostic("error", message)])
        self.message = message


@dataclass(frozen=True)
class SymExpr:
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __pow__(self, other):
        return pow_(self, _coerce(other))

    def __neg__(self):
        return mul(Constant(-1.0), self)


@dataclass(frozen=True)
class Constant(SymExpr):
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise SymError(f"non-finite constant {self.value!r}")
        object.__setattr__(self, "value", float(self.value))

    def __repr__(self):
        return f"{self.value:g}"


@dataclass(frozen=True)
class Variable(SymExpr):
    name: str

    def __repr__(self):
        return self.name


@dataclass(frozen=True)
class Sum(SymExpr):
    terms: tuple[SymExpr, ...]

    def __repr__(self):
        return "(" + " + ".join(map(repr, self.terms)) + ")"


@dataclass(frozen=True)
class Product(SymExpr):
    factors: tuple[SymExpr, ...]

    def __repr__(self):
        return "(" + "*".join(map(repr, self.factors)) + ")"


@dataclass(frozen=True)
class Power(SymExpr):
    base: SymExpr
    exponent: SymExpr

    def __repr__(self):
        return f"({self.base!r}^{self.exponent!r})"


@dataclass(frozen=True)
class Call(SymExpr):
    fn: str
    args: tuple[SymExpr, ...]

    def __repr__(self):
        return f"{self.fn}({', '.join(map(repr, self.args))})"


ZERO = Constant(0.0)
ONE = Constant(1.0)
MINUS_ONE = Constant(-1.0)


def _coerce(x) -> SymExpr:
    if isinstance(x, SymExpr):
        return x
    if isinstance(x, (int, float)):
        return Constant(float(x))
    raise TypeError(f"cannot coerce {x!r} to SymExpr")


# ---------------------------------------------------------------------------
# Total order and canonical constructors

_RANK = {Constant: 0, Variable: 1, Call: 2, Power: 3, Product: 4, Sum: 5}


def sort_key(e: SymExpr):
    if isinstance(e, Constant):
        return (0, (e.value,))
    if isinstance(e, Variable):
        return (1, (e.name,))
    if isinstance(e, Call):
        return (2, (e.fn, tuple(sort_key(a) for a in e.args)))
    if isinstance(e, Power):
        return (3, (sort_key(e.base), sort_key(e.exponent)))
    if isinstance(e, Product):
        return (4, tuple(sort_key(f) for f in e.factors))
    return (5, tuple(sort_key(t) for t in e.terms))


def add(*terms) -> SymExpr:
    flat: list[SymExpr] = []
    const = 0.0
    for t in terms:
        t = _coerce(t)
        if isinstance(t, Sum):
            inner = t.terms
        else:
            inner = (t,)
        for x in inner:
            if isinstance(x, Constant):
                const += x.value
            else:
                flat.append(x)
    if const != 0.0 or not flat:
        flat.append(Constant(const))
    flat.sort(key=sort_key)
    if len(flat) == 1:
        return flat[0]
    return Sum(tuple(flat))


def mul(*factors) -> SymExpr:
    flat: list[SymExpr] = []
    const = 1.0
    for f in factors:
        f = _coerce(f)
        if isinstance(f, Product):
            inner = f.factors
        else:
            inner = (f,)
        for x in inner:
            if isinstance(x, Constant):
                const *= x.value
            else:
                flat.append(x)
    if const == 0.0:
        return ZERO
    if const != 1.0 or not flat:
        flat.append(Constant(const))
    flat.sort(key=sort_key)
    if len(flat) == 1:
        return flat[0]
    return Product(tuple(flat))


def sub(a, b) -> SymExpr:
    return add(a, mul(MINUS_ONE, b))


def div(a, b) -> SymExpr:
    return mul(a, pow_(b, MINUS_ONE))


def pow_(base, exponent) -> SymExpr:
    base = _coerce(base)
    exponent = _coerce(exponent)
    if isinstance(exponent, Constant):
        if exponent.value == 0.0:
            return ONE
        if exponent.value == 1.0:
            return base
        if exponent.value == int(exponent.value):
            # integer exponents distribute/merge exactly over the reals
            if isinstance(base, Product):
                return mul(*(pow_(f, exponent) for f in base.factors))
            if isinstance(base, Power) and isinstance(base.exponent, Constant):
                return pow_(base.base, Constant(base.exponent.value * exponent.value))
    if isinstance(base, Constant) and isinstance(exponent, Constant):
        folded = _try_fold_pow(base.value, exponent.value)
        if folded is not None:
            return Constant(folded)
    return Power(base, exponent)


def _try_fold_pow(b: float, e: float) -> float | None:
    if b == 0.0 and e <= 0.0:
        return None
    if b < 0.0 and e != int(e):
        return None
    try:
        v = math.pow(b, e)
    except (OverflowError, ValueError):
        return None
    return v if math.isfinite(v) else None


def call(fn: str, *args) -> SymExpr:
    args = tuple(_coerce(a) for a in args)
    if fn == "pow":
        if len(args) != 2:
            raise SymError("pow expects 2 arguments")
        return pow_(*args)
    if fn not in BUILTINS:
        raise SymError(f"unsupported function {fn}")
    return Call(fn, args)


def node_count(e: SymExpr) -> int:
    if isinstance(e, (Constant, Variable)):
        return 1
    if isinstance(e, Sum):
        return 1 + sum(node_count(t) for t in e.terms)
    if isinstance(e, Product):
        return 1 + sum(node_count(f) for f in e.factors)
    if isinstance(e, Power):
        return 1 + node_count(e.base) + node_count(e.exponent)
    return 1 + sum(node_count(a) for a in e.args)


def free_variables(e: SymExpr) -> set[str]:
    out: set[str] = set()

    def walk(x: SymExpr):
        if isinstance(x, Variable):
            out.add(x.name)
        elif isinstance(x, Sum):
            for t in x.terms:
                walk(t)
        elif isinstance(x, Product):
            for f in x.factors:
                walk(f)
        elif isinstance(x, Power):
            walk(x.base)
            walk(x.exponent)
        elif isinstance(x, Call):
            for a in x.args:
                walk(a)

    walk(e)
    return out


def is_free_of(e: SymExpr, name: str) -> bool:
    return name not in free_variables(e)


def substitute(e: SymExpr, mapping: Mapping[str, SymExpr]) -> SymExpr:
    if isinstance(e, Variable):
        return mapping.get(e.name, e)
    if isinstance(e, Constant):
        return e
    if isinstance(e, Sum):
        return add(*(substitute(t, mapping) for t in e.terms))
    if isinstance(e, Product):
        return mul(*(substitute(f, mapping) for f in e.factors))
    if isinstance(e, Power):
        return pow_(substitute(e.base, mapping), substitute(e.exponent, mapping))
    return Call(e.fn, tuple(substitute(a, mapping) for a in e.args))


# ---------------------------------------------------------------------------
# Simplification


def simplify(e: SymExpr) -> SymExpr:
    if node_count(e) > MAX_NODES:
        raise SymError(f"expression exceeds {MAX_NODES} nodes; refusing to simplify")
    return _simplify(e)


def _simplify(e: SymExpr) -> SymExpr:
    if isinstance(e, (Constant, Variable)):
        return e
    if isinstance(e, Sum):
        return _simplify_sum([_simplify(t) for t in e.terms])
    if isinstance(e, Product):
        return _simplify_product([_simplify(f) for f in e.factors])
    if isinstance(e, Power):
        return pow_(_simplify(e.base), _simplify(e.exponent))
    return Call(e.fn, tuple(_simplify(a) for a in e.args))


def _coeff_rest(term: SymExpr) -> tuple[float, SymExpr | None]:
    """Split a term into (numeric coefficient, remaining factor or None)."""
    if isinstance(term, Constant):
        return term.value, None
    if isinstance(term, Product):
        consts = [f for f in term.factors if isinstance(f, Constant)]
        rest = [f for f in term.factors if not isinstance(f, Constant)]
        coeff = math.prod(c.value for c in consts) if consts else 1.0
        if not rest:
            return coeff, None
        return coeff, rest[0] if len(rest) == 1 else Product(tuple(rest))
    return 1.0, term


def _simplify_sum(terms: list[SymExpr]) -> SymExpr:
    const = 0.0
    buckets: dict[object, tuple[float, SymExpr]] = {}
    order: list[object] = []
    for term in terms:
        coeff, rest = _coeff_rest(term)
        if rest is None:
            const += coeff
            continue
        k = sort_key(rest)
        if k in buckets:
            buckets[k] = (buckets[k][0] + coeff, rest)
        else:
            buckets[k] = (coeff, rest)
            order.append(k)
    out: list[SymExpr] = []
    for k in order:
        coeff, rest = buckets[k]
        if coeff == 0.0:
            continue
        out.append(rest if coeff == 1.0 else mul(Constant(coeff), rest))
    return add(Constant(const), *out)


def _base_exp(factor: SymExpr) -> tuple[SymExpr, SymExpr]:
    if isinstance(factor, Power):
        return factor.base, factor.exponent
    return factor, ONE


def _simplify_product(factors: list[SymExpr]) -> SymExpr:
    const = 1.0
    buckets: dict[object, tuple[SymExpr, list[SymExpr]]] = {}
    order: list[object] = []
    for factor in factors:
        if isinstance(factor, Constant):
            const *= factor.value
            continue
        if isinstance(factor, Product):  # nested products from rebuilt terms
            inner = list(factor.factors)
        else:
            inner = [factor]
        for f in inner:
            if isinstance(f, Constant):
                const *= f.value
                continue
            base, exp = _base_exp(f)
            k = sort_key(base)
            if k in buckets:
                buckets[k][1].append(exp)
            else:
                buckets[k] = (base, [exp])
                order.append(k)
    if const == 0.0:
        return ZERO
    out: list[SymExpr] = []
    for k in order:
        base, exps = buckets[k]
        exp = _simplify_sum(exps) if len(exps) > 1 else exps[0]
        out.append(pow_(base, exp))
    return mul(Constant(const), *out)


# ---------------------------------------------------------------------------
# Differentiation


def differentiate(e: SymExpr, wrt: str) -> SymExpr:
    if node_count(e) > MAX_NODES:
        raise SymError(f"expression exceeds {MAX_NODES} nodes; refusing to differentiate")
    return simplify(_diff(e, wrt))


def _diff(e: SymExpr, x: str) -> SymExpr:
    if isinstance(e, Constant):
        return ZERO
    if isinstance(e, Variable):
        return ONE if e.name == x else ZERO
    if isinstance(e, Sum):
        return add(*(_diff(t, x) for t in e.terms))
    if isinstance(e, Product):
        terms = []
        factors = e.factors
        for i, f in enumerate(factors):
            df = _diff(f, x)
            if df == ZERO:
                continue
            others = factors[:i] + factors[i + 1 :]
            terms.append(mul(df, *others))
        return add(*terms) if terms else ZERO
    if isinstance(e, Power):
        base, exp = e.base, e.exponent
        if isinstance(exp, Constant) or is_free_of(exp, x):
            # d(u^c) = c*u^(c-1)*u'
            return mul(exp, pow_(base, sub(exp, ONE)), _diff(base, x))
        if is_free_of(base, x):
            # d(b^u) = b^u * log(b) * u'
            return mul(e, call("log", base), _diff(exp, x))
        raise SymError("cannot differentiate power with base and exponent both depending on variable")
    if isinstance(e, Call):
        if e.fn == "fabs":
            raise SymError("non-differentiable function fabs")
        u = e.args[0]
        du = _diff(u, x)
        if e.fn == "exp":
            return mul(e, du)
        if e.fn == "log":
            return div(du, u)
        if e.fn == "sqrt":
            return div(du, mul(Constant(2.0), call("sqrt", u)))
    raise SymError(f"cannot differentiate {e!r}")


# ---------------------------------------------------------------------------
# Numeric evaluation (tests, oracles, interpreter support)

_EVAL_FNS = {
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
    "fabs": math.fabs,
}


def evaluate(e: SymExpr, env: Mapping[str, float]) -> float:
    if isinstance(e, Constant):
        return e.value
    if isinstance(e, Variable):
        try:
            return float(env[e.name])
        except KeyError:
            raise SymError(f"unbound variable {e.name!r} in numeric evaluation") from None
    if isinstance(e, Sum):
        return sum(evaluate(t, env) for t in e.terms)
    if isinstance(e, Product):
        out = 1.0
        for f in e.factors:
            out *= evaluate(f, env)
        return out
    if isinstance(e, Power):
        return math.pow(evaluate(e.base, env), evaluate(e.exponent, env))
    return _EVAL_FNS[e.fn](*(evaluate(a, env) for a in e.args))


# ---------------------------------------------------------------------------
# Linear systems and Gaussian elimination


@dataclass
class LinearSystem:
    a: list[list[SymExpr]]
    b: list[SymExpr]
    unknowns: list[str]

    def __post_init__(self):
        n = len(self.unknowns)
        if len(set(self.unknowns)) != n:
            raise SymError("linear system unknowns must be distinct")
        if len(self.a) != n or any(len(row) != n for row in self.a) or len(self.b) != n:
            raise SymError("linear system dimensions do not agree")


def _is_zero(e: SymExpr) -> bool:
    return isinstance(e, Constant) and e.value == 0.0


def _pick_pivot(a: list[list[SymExpr]], col: int, n: int) -> int | None:
    """Prefer a nonzero Constant pivot, else the first structurally nonzero entry."""
    for r in range(col, n):
        entry = a[r][col]
        if isinstance(entry, Constant) and entry.value != 0.0:
            return r
    for r in range(col, n):
        if not _is_zero(a[r][col]):
            return r
    return None


def solve_linear_symbolic(system: LinearSystem, max_unknowns: int | None = 3) -> list[SymExpr]:
    """Closed-form solution of A x = b by Gaussian elimination with symbolic pivoting."""
    n = len(system.unknowns)
    if max_unknowns is not None and n > max_unknowns:
        raise SymError(f"symbolic elimination limited to {max_unknowns} unknowns, got {n}")
    a = [[simplify(e) for e in row] for row in system.a]
    b = [simplify(e) for e in system.b]

    for col in range(n):
        pivot = _pick_pivot(a, col, n)
        if pivot is None:
            raise SymError("singular system")
        if pivot != col:
            a[col], a[pivot] = a[pivot], a[col]
            b[col], b[pivot] = b[pivot], b[col]
        for r in range(col + 1, n):
            if _is_zero(a[r][col]):
                continue
            factor = simplify(div(a[r][col], a[col][col]))
            for c in range(col, n):
                a[r][c] = simplify(sub(a[r][c], mul(factor, a[col][c])))
            b[r] = simplify(sub(b[r], mul(factor, b[col])))

    solution: list[SymExpr | None] = [None] * n
    for row in range(n - 1, -1, -1):
        acc = b[row]
        for c in range(row + 1, n):
            acc = sub(acc, mul(a[row][c], solution[c]))
        if _is_zero(a[row][row]):
            raise SymError("singular system")
        solution[row] = simplify(div(acc, a[row][row]))
    return solution  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Common subexpression elimination


def cse(exprs: Iterable[SymExpr], prefix: str = "tmp_") -> tuple[list[tuple[str, SymExpr]], list[SymExpr]]:
    """Bind every repeated non-leaf subexpression to a fresh name.

    Bindings come out topologically ordered (inner expressions first) and are
    numbered in the order each shared subexpression is first seen in a
    post-order walk across the list. The rewritten expressions (and binding
    bodies) are simplified after substitution.
    """
    exprs = list(exprs)
    counts: dict[object, int] = {}

    def count(e: SymExpr):
        if isinstance(e, (Constant, Variable)):
            return
        k = sort_key(e)
        counts[k] = counts.get(k, 0) + 1
        for child in _children(e):
            count(child)

    for e in exprs:
        count(e)

    bindings: list[tuple[str, SymExpr]] = []
    names: dict[object, str] = {}

    def rewrite_node(e: SymExpr) -> SymExpr:
        if isinstance(e, (Constant, Variable)):
            return e
        k = sort_key(e)
        if k in names:
            return Variable(names[k])
        rebuilt = _rebuild(e, [rewrite_node(c) for c in _children(e)])
        if counts.get(k, 0) >= 2:
            name = f"{prefix}{len(bindings)}"
            names[k] = name
            bindings.append((name, simplify(rebuilt)))
            return Variable(name)
        return rebuilt

    rewritten = [simplify(rewrite_node(e)) for e in exprs]
    return bindings, rewritten


def _children(e: SymExpr) -> tuple[SymExpr, ...]:
    if isinstance(e, Sum):
        return e.terms
    if isinstance(e, Product):
        return e.factors
    if isinstance(e, Power):
        return (e.base, e.exponent)
    if isinstance(e, Call):
        return e.args
    return ()


def _rebuild(e: SymExpr, children: list[SymExpr]) -> SymExpr:
    if isinstance(e, Sum):
        return add(*children)
    if isinstance(e, Product):
        return mul(*children)
    if isinstance(e, Power):
        return pow_(children[0], children[1])
    if isinstance(e, Call):
        return Call(e.fn, tuple(children))
    return e


def inline_bindings(bindings: list[tuple[str, SymExpr]], exprs: list[SymExpr]) -> list[SymExpr]:
    """Substitute CSE bindings back; inverse of cse up to simplification."""
    env: dict[str, SymExpr] = {}
    for name, expr in bindings:
        env[name] = substitute(expr, env)
    return [simplify(substitute(e, env)) for e in exprs]


# ---------------------------------------------------------------------------
# AST bridge

_INDEXED = None  # compiled lazily


def _split_indexed(name: str) -> tuple[str, int] | None:
    if name.endswith("]") and "[" in name:
        base, _, idx = name[:-1].partition("[")
        if idx.isdigit():
            return base, int(idx)
    return None


def from_ast(node: Node) -> SymExpr:
    """Convert an AST expression to a canonical SymExpr."""
    kind = node.kind
    if kind == "Number":
        return Constant(node.attrs["value"])
    if kind == "Identifier":
        return Variable(node.attrs["name"])
    if kind == "IndexedName":
        index = node.children[0]
        if index.kind != "Number" or index.attrs["value"] != int(index.attrs["value"]):
            raise SymError(f"array reference {node.attrs['name']} needs a literal index here")
        return Variable(f"{node.attrs['name']}[{int(index.attrs['value'])}]")
    if kind == "Binary":
        op = node.attrs["op"]
        left, right = node.children
        if op == "+":
            return add(from_ast(left), from_ast(right))
        if op == "-":
            return sub(from_ast(left), from_ast(right))
        if op == "*":
            return mul(from_ast(left), from_ast(right))
        if op == "/":
            return div(from_ast(left), from_ast(right))
        if op == "^":
            return pow_(from_ast(left), from_ast(right))
        raise SymError(f"operator {op!r} has no symbolic form")
    if kind == "Unary":
        if node.attrs["op"] == "-":
            return mul(MINUS_ONE, from_ast(node.children[0]))
        raise SymError(f"operator {node.attrs['op']!r} has no symbolic form")
    if kind == "Call":
        name = node.attrs["name"]
        if name == "pow":
            if len(node.children) != 2:
                raise SymError("pow expects 2 arguments")
            return pow_(from_ast(node.children[0]), from_ast(node.children[1]))
        if name not in BUILTINS:
            raise SymError(f"unsupported function {name}")
        return Call(name, tuple(from_ast(a) for a in node.children))
    raise SymError(f"AST node {kind} has no symbolic form")


def to_ast(e: SymExpr) -> Node:
    """Convert a SymExpr back to an AST expression (numbers synthesized)."""
    if isinstance(e, Constant):
        if e.value < 0:
            return mk("Unary", (number(-e.value),), op="-")
        return number(e.value)
    if isinstance(e, Variable):
        split = _split_indexed(e.name)
        if split is not None:
            return mk("IndexedName", (number(float(split[1])),), name=split[0])
        return mk("Identifier", (), name=e.name)
    if isinstance(e, Sum):
        return _sum_to_ast(e)
    if isinstance(e, Product):
        return _product_to_ast(e)
    if isinstance(e, Power):
        if isinstance(e.exponent, Constant) and e.exponent.value < 0:
            denom = to_ast(pow_(e.base, Constant(-e.exponent.value)))
            return mk("Binary", (number(1.0), denom), op="/")
        return mk("Binary", (to_ast(e.base), to_ast(e.exponent)), op="^")
    if isinstance(e, Call):
        return mk("Call", tuple(to_ast(a) for a in e.args), name=e.fn)
    raise SymError(f"cannot convert {e!r} to AST")


def _negated_form(term: SymExpr) -> SymExpr | None:
    """If `term` is a product with a negative coefficient, return its negation."""
    coeff, rest = _coeff_rest(term)
    if coeff >= 0:
        return None
    if rest is None:
        return Constant(-coeff)
    return mul(Constant(-coeff), rest)


def _sum_to_ast(e: Sum) -> Node:
    first = e.terms[0]
    node = to_ast(first)
    for term in e.terms[1:]:
        neg = _negated_form(term)
        if neg is not None:
            node = mk("Binary", (node, to_ast(neg)), op="-")
        else:
            node = mk("Binary", (node, to_ast(term)), op="+")
    return node


def _product_to_ast(e: Product) -> Node:
    num: list[SymExpr] = []
    den: list[SymExpr] = []
    coeff = 1.0
    for f in e.factors:
        if isinstance(f, Constant):
            coeff *= f.value
        elif isinstance(f, Power) and isinstance(f.exponent, Constant) and f.exponent.value < 0:
            den.append(pow_(f.base, Constant(-f.exponent.value)))
        else:
            num.append(f)

    negate = coeff < 0
    coeff = abs(coeff)

    num_nodes: list[Node] = []
    if coeff != 1.0 or not num:
        num_nodes.append(number(coeff))
    num_nodes.extend(to_ast(f) for f in num)
    node = num_nodes[0]
    for extra in num_nodes[1:]:
        node = mk("Binary", (node, extra), op="*")
    if den:
        den_node = to_ast(den[0])
        for extra in den[1:]:
            den_node = mk("Binary", (den_node, to_ast(extra)), op="*")
        node = mk("Binary", (node, den_node), op="/")
    if negate:
        node = mk("Unary", (node,), op="-")
    return node
