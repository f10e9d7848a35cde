"""Expression trees and nested forward-mode jets.

Metric components are given as strings over a small grammar
(``+ - * / ^ exp log sin cos sinh cosh sqrt bump``, numeric literals,
variables ``x0..x{n-1}``).  They are parsed once into expression trees and
then evaluated either on plain numpy arrays or on `Jet` objects, which carry
truncated Taylor expansions up to a configurable order (<= 4).  All mixed
partials come out exactly symmetric because a jet stores one coefficient per
monomial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy import sparse

__all__ = [
    "ExprError",
    "Expression",
    "Jet",
    "JetAlgebra",
    "parse_expression",
    "variable_jets",
]


class ExprError(ValueError):
    """Syntax or evaluation error in a metric expression; carries position."""

    def __init__(self, message, position=None, source=None):
        self.position = position
        self.source = source
        if position is not None and source is not None:
            caret = " " * position + "^"
            message = f"{message} at position {position}\n  {source}\n  {caret}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# jet algebra
# ---------------------------------------------------------------------------

def _multi_indices(nvars, order):
    out = []
    for total in range(order + 1):
        for combo in product(range(order + 1), repeat=nvars):
            if sum(combo) == total:
                out.append(combo)
    return out


class JetAlgebra:
    """Precomputed monomial tables for truncated Taylor arithmetic."""

    _cache = {}

    def __new__(cls, nvars, order):
        key = (nvars, order)
        if key not in cls._cache:
            self = super().__new__(cls)
            self.nvars = nvars
            self.order = order
            self.monomials = _multi_indices(nvars, order)
            self.index = {m: i for i, m in enumerate(self.monomials)}
            self.size = len(self.monomials)
            self.degrees = np.array([sum(m) for m in self.monomials])
            # sparse multiplication table: (i, j) -> k  with deg_i + deg_j <= order
            tri = []
            for i, a in enumerate(self.monomials):
                for j, b in enumerate(self.monomials):
                    if sum(a) + sum(b) <= order:
                        c = tuple(x + y for x, y in zip(a, b))
                        tri.append((i, j, self.index[c]))
            t = np.array(tri, dtype=np.int64)
            self.mul_i, self.mul_j, self.mul_k = t[:, 0], t[:, 1], t[:, 2]
            # scatter matrix: row mul_k collects product of coeff[mul_i]*coeff[mul_j]
            ntri = len(tri)
            self.mul_matrix = sparse.csr_matrix(
                (np.ones(ntri), (self.mul_k, np.arange(ntri))),
                shape=(self.size, ntri),
            )
            self.factorials = np.array(
                [math.prod(math.factorial(e) for e in m) for m in self.monomials],
                dtype=float,
            )
            cls._cache[key] = self
        return cls._cache[key]


class Jet:
    """Truncated Taylor expansion; coefficients are Taylor (not raw partials).

    ``coeffs`` has shape ``(alg.size,) + batch_shape`` so a single jet can be
    evaluated over a whole batch of points at once.
    """

    __slots__ = ("alg", "coeffs")

    def __init__(self, alg, coeffs):
        self.alg = alg
        self.coeffs = coeffs

    # -- constructors ------------------------------------------------------
    @classmethod
    def constant(cls, alg, value):
        value = np.asarray(value)
        coeffs = np.zeros((alg.size,) + value.shape, dtype=np.result_type(value, float))
        coeffs[0] = value
        return cls(alg, coeffs)

    @classmethod
    def variable(cls, alg, i, value):
        value = np.asarray(value, dtype=float)
        coeffs = np.zeros((alg.size,) + value.shape, dtype=np.result_type(value, float))
        coeffs[0] = value
        if alg.order >= 1:
            unit = tuple(1 if k == i else 0 for k in range(alg.nvars))
            coeffs[alg.index[unit]] = 1.0
        return cls(alg, coeffs)

    # -- accessors ---------------------------------------------------------
    @property
    def value(self):
        return self.coeffs[0]

    def partial(self, gamma):
        """Raw partial derivative for the multi-index ``gamma``."""
        gamma = tuple(gamma)
        idx = self.alg.index[gamma]
        return self.coeffs[idx] * self.alg.factorials[idx]

    def gradient(self):
        n = self.alg.nvars
        return np.stack([self.partial(tuple(1 if k == i else 0 for k in range(n)))
                         for i in range(n)])

    def hessian(self):
        n = self.alg.nvars
        out = [[None] * n for _ in range(n)]
        for i in range(n):
            for j in range(n):
                g = [0] * n
                g[i] += 1
                g[j] += 1
                out[i][j] = self.partial(tuple(g))
        return np.array(out)

    # -- arithmetic --------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, Jet):
            return other
        return Jet.constant(self.alg, np.broadcast_to(np.asarray(other), self.value.shape))

    def __add__(self, other):
        other = self._coerce(other)
        return Jet(self.alg, self.coeffs + other.coeffs)

    __radd__ = __add__

    def __neg__(self):
        return Jet(self.alg, -self.coeffs)

    def __sub__(self, other):
        other = self._coerce(other)
        return Jet(self.alg, self.coeffs - other.coeffs)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return Jet(self.alg, self.coeffs * np.asarray(other))
        alg = self.alg
        prod_terms = self.coeffs[alg.mul_i] * other.coeffs[alg.mul_j]
        batch = prod_terms.shape[1:]
        flat = prod_terms.reshape(prod_terms.shape[0], -1)
        out = (alg.mul_matrix @ flat).reshape((alg.size,) + batch)
        return Jet(alg, out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Jet):
            return Jet(self.alg, self.coeffs / np.asarray(other))
        return self * other._reciprocal()

    def __rtruediv__(self, other):
        return self._reciprocal() * other

    def _nilpotent(self):
        n = self.coeffs.copy()
        n[0] = 0.0
        return Jet(self.alg, n)

    def compose(self, derivs):
        """Apply f with f^{(k)}(value) = derivs[k] via truncated Taylor series."""
        alg = self.alg
        nil = self._nilpotent()
        out = Jet.constant(alg, derivs[0])
        power = None
        for k in range(1, alg.order + 1):
            power = nil if power is None else power * nil
            out = out + power * (np.asarray(derivs[k]) / math.factorial(k))
        return out

    def _reciprocal(self):
        c = self.value
        derivs = [((-1.0) ** k) * math.factorial(k) / c ** (k + 1)
                  for k in range(self.alg.order + 1)]
        return self.compose(derivs)

    def __pow__(self, exponent):
        if isinstance(exponent, Jet):
            if np.any(exponent.coeffs[1:] != 0):
                raise ExprError("exponent of ^ must be constant")
            exponent = exponent.value
            exponent = np.asarray(exponent).reshape(-1)[0]
        p = float(exponent)
        if p == round(p) and abs(p) <= 16:
            k = int(round(p))
            if k == 0:
                return Jet.constant(self.alg, np.ones_like(self.value))
            base = self if k > 0 else self._reciprocal()
            out = base
            for _ in range(abs(k) - 1):
                out = out * base
            return out
        c = self.value
        derivs = []
        fall = 1.0
        for k in range(self.alg.order + 1):
            derivs.append(fall * c ** (p - k))
            fall *= (p - k)
        return self.compose(derivs)


def variable_jets(points, order):
    """Jets of the coordinate functions at an (n, batch) array of points."""
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    alg = JetAlgebra(n, order)
    return [Jet.variable(alg, i, points[i]) for i in range(n)]


# ---------------------------------------------------------------------------
# elementary functions usable on floats, arrays and jets
# ---------------------------------------------------------------------------

def _jet_fn(series):
    def apply(x):
        if isinstance(x, Jet):
            return x.compose(series(x.value, x.alg.order))
        return series(np.asarray(x), 0)[0]
    return apply


def _exp_series(c, order):
    e = np.exp(c)
    return [e] * (order + 1)


def _log_series(c, order):
    out = [np.log(c)]
    for k in range(1, order + 1):
        out.append(((-1.0) ** (k - 1)) * math.factorial(k - 1) / c ** k)
    return out


def _sin_series(c, order):
    table = [np.sin(c), np.cos(c), -np.sin(c), -np.cos(c)]
    return [table[k % 4] for k in range(order + 1)]


def _cos_series(c, order):
    table = [np.cos(c), -np.sin(c), -np.cos(c), np.sin(c)]
    return [table[k % 4] for k in range(order + 1)]


def _sinh_series(c, order):
    table = [np.sinh(c), np.cosh(c)]
    return [table[k % 2] for k in range(order + 1)]


def _cosh_series(c, order):
    table = [np.cosh(c), np.sinh(c)]
    return [table[k % 2] for k in range(order + 1)]


def _sqrt_series(c, order):
    out = [np.sqrt(c)]
    fall = 0.5
    for k in range(1, order + 1):
        out.append(fall * c ** (0.5 - k))
        fall *= (0.5 - k)
    return out


_exp = _jet_fn(_exp_series)
_log = _jet_fn(_log_series)
_sin = _jet_fn(_sin_series)
_cos = _jet_fn(_cos_series)
_sinh = _jet_fn(_sinh_series)
_cosh = _jet_fn(_cosh_series)
_sqrt = _jet_fn(_sqrt_series)


def _bump(x):
    """Smooth compactly supported profile: exp(-1/(1-u^2)) for |u|<1, else 0.

    All jets vanish identically outside the support, which keeps metric
    perturbations honestly compact.
    """
    if isinstance(x, Jet):
        inside = np.abs(x.value) < 1.0
        safe = np.where(inside, x.value, 0.0)
        shifted = Jet(x.alg, x.coeffs.copy())
        shifted.coeffs[0] = safe
        core = _exp(-1.0 / (1.0 - shifted * shifted))
        coeffs = np.where(inside, core.coeffs, 0.0)
        return Jet(x.alg, coeffs)
    x = np.asarray(x, dtype=float)
    inside = np.abs(x) < 1.0
    safe = np.where(inside, x, 0.0)
    with np.errstate(divide="ignore", over="ignore"):
        vals = np.exp(-1.0 / (1.0 - safe * safe))
    return np.where(inside, vals, 0.0)


FUNCTIONS = {
    "exp": _exp,
    "log": _log,
    "sin": _sin,
    "cos": _cos,
    "sinh": _sinh,
    "cosh": _cosh,
    "sqrt": _sqrt,
    "bump": _bump,
}


# ---------------------------------------------------------------------------
# tokenizer / recursive-descent parser
# ---------------------------------------------------------------------------

@dataclass
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(source):
    tokens = []
    i, n = 0, len(source)
    while i < n:
        ch = source[i]
        if ch.isspace():
            i += 1
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and source[i + 1].isdigit()):
            j = i
            while j < n and (source[j].isdigit() or source[j] == "."):
                j += 1
            if j < n and source[j] in "eE" and j + 1 < n and (
                source[j + 1].isdigit() or source[j + 1] in "+-"
            ):
                j += 2
                while j < n and source[j].isdigit():
                    j += 1
            tokens.append(_Token("number", source[i:j], i))
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(_Token("name", source[i:j], i))
            i = j
            continue
        if ch in "+-*/^(),":
            tokens.append(_Token(ch, ch, i))
            i += 1
            continue
        raise ExprError(f"unexpected character {ch!r}", i, source)
    tokens.append(_Token("end", "", n))
    return tokens


class Expression:
    """Parsed expression tree; evaluates on scalars, arrays, or jets."""

    def __init__(self, node, source, variables):
        self._node = node
        self.source = source
        self.variables = variables  # sorted variable indices that occur

    def __call__(self, args):
        """Evaluate with args = sequence indexed by variable number."""
        return _eval_node(self._node, args)

    def __repr__(self):
        return f"Expression({self.source!r})"

    def __eq__(self, other):
        return isinstance(other, Expression) and self._node == other._node

    def __hash__(self):
        return hash(repr(self._node))


def _eval_node(node, args):
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        return args[node[1]]
    if kind == "call":
        return FUNCTIONS[node[1]](_eval_node(node[2], args))
    a = _eval_node(node[1], args)
    b = _eval_node(node[2], args)
    if kind == "+":
        return a + b
    if kind == "-":
        return a - b
    if kind == "*":
        return a * b
    if kind == "/":
        return a / b
    if kind == "^":
        return a ** b
    raise AssertionError(kind)


class _Parser:
    def __init__(self, tokens, source, dim):
        self.tokens = tokens
        self.source = source
        self.dim = dim
        self.pos = 0
        self.variables = set()

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind):
        tok = self.next()
        if tok.kind != kind:
            raise ExprError(f"expected {kind!r}, found {tok.text!r}", tok.pos, self.source)
        return tok

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ExprError(f"unexpected token {tok.text!r}", tok.pos, self.source)
        return node

    def expr(self):
        node = self.term()
        while self.peek().kind in "+-":
            op = self.next().kind
            node = (op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek().kind in "*/":
            op = self.next().kind
            node = (op, node, self.unary())
        return node

    def unary(self):
        tok = self.peek()
        if tok.kind == "-":
            self.next()
            return ("-", ("num", 0.0), self.unary())
        if tok.kind == "+":
            self.next()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek().kind == "^":
            self.next()
            return ("^", base, self.unary())
        return base

    def atom(self):
        tok = self.next()
        if tok.kind == "number":
            try:
                return ("num", float(tok.text))
            except ValueError:
                raise ExprError("malformed number", tok.pos, self.source) from None
        if tok.kind == "(":
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind == "name":
            name = tok.text
            if name == "pi":
                return ("num", math.pi)
            if name in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return ("call", name, arg)
            if name.startswith("x") and name[1:].isdigit():
                idx = int(name[1:])
                if idx >= self.dim:
                    raise ExprError(f"unknown variable {name!r} (dim={self.dim})",
                                    tok.pos, self.source)
                self.variables.add(idx)
                return ("var", idx)
            raise ExprError(f"unknown name {name!r}", tok.pos, self.source)
        raise ExprError(f"unexpected token {tok.text!r}", tok.pos, self.source)


def parse_expression(source, dim):
    """Parse a component expression in variables x0..x{dim-1}."""
    parser = _Parser(_tokenize(source), source, dim)
    node = parser.parse()
    return Expression(node, source, sorted(parser.variables))
