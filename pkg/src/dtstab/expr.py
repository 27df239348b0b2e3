"""Scalar arithmetic expressions over (t, x, d, u) and named auxiliaries.

This is the textual language used to define system dynamics, output maps,
Lyapunov candidates and reconstruction maps.  Grammar (lowest to highest
precedence)::

    expr    := term (('+'|'-') term)*
    term    := unary (('*'|'/') unary)*
    unary   := '-' unary | power
    power   := primary ('^' unary)?          # right-associative
    primary := NUMBER | IDENT | IDENT '(' expr (',' expr)* ')' | '(' expr ')'

Variables are ``t``, ``x1..xn``, ``d1..dm``, ``u1..uk`` (1-based indices,
validated against the declared dimensions) plus any auxiliary names declared
in :class:`Dims` (e.g. ``y0``, ``y1``, ``u0`` for reconstruction maps).
``e`` and ``pi`` are named constants, folded to literals at parse time.
Functions: exp, log, abs, sqrt, sign, min, max, pow.

Conventions: ``0^0`` evaluates to 1; ``a^b`` with a < 0 and non-integer b,
``log``/``sqrt`` of a negative number and division by zero are domain errors
reported with the offending subexpression.  Evaluation is pure and
deterministic; ASTs are immutable and safe to share.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Dims", "Env", "Expr", "Num", "Var", "Neg", "Bin", "Call",
    "parse_expression", "eval_expression", "compile_expression",
    "ExprError", "ExprSyntaxError", "ExprNameError", "ExprDomainError",
]


class ExprError(Exception):
    """Base class for expression language errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message, pos):
        self.pos = pos + 1  # 1-based in messages and in .pos
        super().__init__(f"{message} (at position {self.pos})")


class ExprNameError(ExprError):
    """Unknown identifier or variable index outside the declared dimensions."""

    def __init__(self, message, pos):
        self.pos = pos + 1
        super().__init__(f"{message} (at position {self.pos})")


class ExprDomainError(ExprError):
    """Numeric domain violation, reported with the offending subexpression."""

    def __init__(self, message, node=None):
        if node is not None:
            message = f"{message} in subexpression '{node.to_string()}'"
        super().__init__(message)
        self.node = node


@dataclass(frozen=True)
class Dims:
    """Dimension declaration an expression is validated against."""

    n: int = 0
    m: int = 0
    k: int = 0
    aux: frozenset[str] = frozenset()

    def __post_init__(self):
        if min(self.n, self.m, self.k) < 0:
            raise ValueError("dimensions must be non-negative")
        if "t" in self.aux:
            raise ValueError("'t' is reserved and cannot be an auxiliary name")
        object.__setattr__(self, "aux", frozenset(self.aux))


@dataclass(frozen=True)
class Env:
    """Evaluation environment.  Arrays are frozen; evaluation never mutates it."""

    t: float = 0.0
    x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    d: np.ndarray = field(default_factory=lambda: np.zeros(0))
    u: np.ndarray = field(default_factory=lambda: np.zeros(0))
    aux: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("x", "d", "u"):
            arr = np.array(getattr(self, name), dtype=float, copy=True).reshape(-1)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "aux", MappingProxyType(dict(self.aux)))


# --- guarded numeric kernel, shared by the tree walker and compiled code ---

def _pow(a, b):
    if a == 0.0 and b == 0.0:
        return 1.0  # documented convention
    try:
        return math.pow(a, b)
    except ValueError:
        if a == 0.0 and b < 0.0:
            raise ExprDomainError("zero raised to a negative power") from None
        raise ExprDomainError("negative base with non-integer exponent") from None
    except OverflowError:
        neg = a < 0.0 and float(b).is_integer() and int(b) % 2 == 1
        return -math.inf if neg else math.inf


def _div(a, b):
    if b == 0.0:
        raise ExprDomainError("division by zero")
    return a / b


def _exp(a):
    try:
        return math.exp(a)
    except OverflowError:
        return math.inf


def _log(a):
    if a <= 0.0:
        raise ExprDomainError("log of a non-positive number")
    return math.log(a)


def _sqrt(a):
    if a < 0.0:
        raise ExprDomainError("sqrt of a negative number")
    return math.sqrt(a)


def _sign(a):
    if a > 0.0:
        return 1.0
    if a < 0.0:
        return -1.0
    return 0.0


_FUNCTIONS: dict[str, tuple[int, Callable]] = {
    "exp": (1, _exp),
    "log": (1, _log),
    "abs": (1, abs),
    "sqrt": (1, _sqrt),
    "sign": (1, _sign),
    "min": (2, min),
    "max": (2, max),
    "pow": (2, _pow),
}

_CONSTANTS = {"e": math.e, "pi": math.pi}

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


class Expr:
    """Abstract syntax tree node.  Subclasses are frozen dataclasses."""

    _prec = _PREC_ATOM

    def to_string(self) -> str:
        raise NotImplementedError

    def __str__(self):
        return self.to_string()

    def compiled(self) -> Callable:
        """Compiled evaluator ``fn(t, x, d, u, aux) -> float``.

        Bit-identical to :func:`eval_expression` (same guarded kernel); domain
        errors from compiled code do not name the offending subexpression.
        """
        fn = getattr(self, "_compiled", None)
        if fn is None:
            src = "lambda t, x, d, u, aux: " + self._codegen()
            fn = eval(src, _CODEGEN_NAMESPACE)  # namespace is module-controlled
            object.__setattr__(self, "_compiled", fn)
        return fn

    def _codegen(self) -> str:
        raise NotImplementedError

    def _wrap(self, child: "Expr", min_prec: int) -> str:
        s = child.to_string()
        return f"({s})" if child._prec < min_prec else s


@dataclass(frozen=True, eq=True)
class Num(Expr):
    value: float

    _prec = _PREC_ATOM

    def to_string(self):
        return repr(self.value)

    def _codegen(self):
        return repr(self.value)


@dataclass(frozen=True, eq=True)
class Var(Expr):
    name: str

    _prec = _PREC_ATOM

    def to_string(self):
        return self.name

    def _codegen(self):
        name = self.name
        if name == "t":
            return "t"
        if name[0] in "xdu" and name[1:].isdigit() and int(name[1:]) >= 1:
            # aux declarations shadow indexed names (as in the evaluator)
            return f"(aux[{name!r}] if {name!r} in aux else {name[0]}[{int(name[1:]) - 1}])"
        return f"aux[{name!r}]"


@dataclass(frozen=True, eq=True)
class Neg(Expr):
    operand: Expr

    _prec = _PREC_NEG

    def to_string(self):
        return "-" + self._wrap(self.operand, _PREC_NEG)

    def _codegen(self):
        return f"(-({self.operand._codegen()}))"


@dataclass(frozen=True, eq=True)
class Bin(Expr):
    op: str  # one of + - * / ^
    left: Expr
    right: Expr

    @property
    def _prec(self):
        return _PREC_POW if self.op == "^" else (_PREC_ADD if self.op in "+-" else _PREC_MUL)

    def to_string(self):
        if self.op == "^":
            # left operand must be a primary; right accepts unary (so ^ chains right)
            lhs = self._wrap(self.left, _PREC_ATOM)
            rhs = self._wrap(self.right, _PREC_NEG)
            return f"{lhs}^{rhs}"
        p = self._prec
        lhs = self._wrap(self.left, p)
        rhs = self._wrap(self.right, p + 1)  # left-associative
        return f"{lhs} {self.op} {rhs}" if self.op in "+-" else f"{lhs}{self.op}{rhs}"

    def _codegen(self):
        a, b = self.left._codegen(), self.right._codegen()
        if self.op == "^":
            return f"_pow({a}, {b})"
        if self.op == "/":
            return f"_div({a}, {b})"
        return f"({a} {self.op} {b})"


@dataclass(frozen=True, eq=True)
class Call(Expr):
    fn: str
    args: tuple[Expr, ...]

    _prec = _PREC_ATOM

    def to_string(self):
        return f"{self.fn}({', '.join(a.to_string() for a in self.args)})"

    def _codegen(self):
        args = ", ".join(a._codegen() for a in self.args)
        return f"_fn_{self.fn}({args})"


_CODEGEN_NAMESPACE = {
    "__builtins__": {},
    "_pow": _pow,
    "_div": _div,
    **{f"_fn_{name}": fn for name, (_, fn) in _FUNCTIONS.items()},
}


# --- tokenizer ---

_NUM_START = set("0123456789.")


def _tokenize(text: str):
    tokens = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in "+-*/^(),":
            tokens.append((c, c, i))
            i += 1
            continue
        if c in _NUM_START:
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    while k < n and text[k].isdigit():
                        k += 1
                    j = k
            lit = text[i:j]
            try:
                value = float(lit)
            except ValueError:
                raise ExprSyntaxError(f"malformed number '{lit}'", i) from None
            if not math.isfinite(value):
                raise ExprSyntaxError(f"number literal '{lit}' out of range", i)
            tokens.append(("num", value, i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("ident", text[i:j], i))
            i = j
            continue
        raise ExprSyntaxError(f"unexpected character '{c}'", i)
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str, dims: Dims):
        self.text = text
        self.dims = dims
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind):
        tok = self.advance()
        if tok[0] != kind:
            raise ExprSyntaxError(f"expected '{kind}', found '{tok[1]}'", tok[2])
        return tok

    def parse(self) -> Expr:
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ExprSyntaxError(f"unexpected '{tok[1]}'", tok[2])
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[0] in "+-":
            op = self.advance()[0]
            node = Bin(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek()[0] in "*/":
            op = self.advance()[0]
            node = Bin(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.peek()[0] == "-":
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        node = self.primary()
        if self.peek()[0] == "^":
            self.advance()
            node = Bin("^", node, self.unary())
        return node

    def primary(self) -> Expr:
        tok = self.advance()
        kind, value, pos = tok
        if kind == "num":
            return Num(value)
        if kind == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "ident":
            if self.peek()[0] == "(":
                return self.call(value, pos)
            return self.variable(value, pos)
        if kind == "end":
            raise ExprSyntaxError("unexpected end of input", pos)
        raise ExprSyntaxError(f"unexpected '{value}'", pos)

    def call(self, name, pos) -> Expr:
        if name not in _FUNCTIONS:
            raise ExprNameError(f"unknown function '{name}'", pos)
        arity = _FUNCTIONS[name][0]
        self.expect("(")
        args = [self.expr()]
        while self.peek()[0] == ",":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        if len(args) != arity:
            raise ExprSyntaxError(
                f"function '{name}' takes {arity} argument(s), got {len(args)}", pos)
        return Call(name, tuple(args))

    def variable(self, name, pos) -> Expr:
        dims = self.dims
        if name in dims.aux:
            return Var(name)
        if name in _CONSTANTS:
            return Num(_CONSTANTS[name])
        if name == "t":
            return Var(name)
        if name[0] in "xdu" and name[1:].isdigit():
            idx = int(name[1:])
            bound = {"x": dims.n, "d": dims.m, "u": dims.k}[name[0]]
            if 1 <= idx <= bound:
                return Var(name)
            raise ExprNameError(
                f"variable '{name}' index out of declared range (1..{bound})", pos)
        raise ExprNameError(f"unknown identifier '{name}'", pos)


def parse_expression(text: str, dims: Dims = Dims()) -> Expr:
    """Parse ``text`` into an AST, validating variables against ``dims``."""
    if not isinstance(text, str) or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    return _Parser(text, dims).parse()


def eval_expression(expr: Expr, env: Env) -> float:
    """Evaluate ``expr`` in ``env`` (IEEE double, deterministic, pure)."""
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Var):
        name = expr.name
        if name == "t":
            return env.t
        if name in env.aux:
            return env.aux[name]
        vec = {"x": env.x, "d": env.d, "u": env.u}[name[0]]
        idx = int(name[1:]) - 1
        if idx >= vec.shape[0]:
            raise ExprError(
                f"variable '{name}' outside environment dimensions ({vec.shape[0]})")
        return vec[idx]
    if isinstance(expr, Neg):
        return -eval_expression(expr.operand, env)
    if isinstance(expr, Bin):
        a = eval_expression(expr.left, env)
        b = eval_expression(expr.right, env)
        try:
            if expr.op == "+":
                return a + b
            if expr.op == "-":
                return a - b
            if expr.op == "*":
                return a * b
            if expr.op == "/":
                return _div(a, b)
            return _pow(a, b)
        except ExprDomainError as ex:
            raise ExprDomainError(str(ex).split(" in subexpression")[0], expr) from None
    if isinstance(expr, Call):
        args = [eval_expression(a, env) for a in expr.args]
        try:
            return _FUNCTIONS[expr.fn][1](*args)
        except ExprDomainError as ex:
            raise ExprDomainError(str(ex).split(" in subexpression")[0], expr) from None
    raise TypeError(f"not an Expr node: {expr!r}")


def compile_expression(text: str, dims: Dims = Dims()) -> Callable:
    """Parse and compile in one step; returns ``fn(t, x, d, u, aux)``."""
    return parse_expression(text, dims).compiled()
