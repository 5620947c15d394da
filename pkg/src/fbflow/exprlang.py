"""Small arithmetic expression language used for the problem data.

Expressions are written over the variables ``x1``, ``x2`` (physical
coordinates), ``z`` (the argument of the boundary law) and ``s`` (arc
parameter, geometry only).  The module provides a parser, a printer that
round-trips, a compiled evaluator that works on floats and numpy arrays,
symbolic differentiation and a forward-mode dual-number evaluator used as an
independent check on the symbolic derivatives.

    >>> e = parse("exp(x2)*x1 + 1")
    >>> evaluate(e, x1=2.0, x2=0.0)
    3.0
    >>> evaluate(derive(e, "x2"), x1=2.0, x2=0.0)
    2.0
"""
from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence, Union

import numpy as np

__all__ = [
    "Expr", "Num", "Var", "Neg", "BinOp", "Call",
    "ExprError", "ExprSyntaxError", "ExprDomainError", "UnboundVariableError",
    "ExprKinkWarning", "Dual",
    "parse", "to_source", "evaluate", "derive", "eval_dual", "as_expr",
    "VARIABLES", "FUNCTIONS", "NONSMOOTH_FUNCTIONS",
]

VARIABLES = ("x1", "x2", "z", "s")
CONSTANTS = {"pi": math.pi}
FUNCTIONS = {
    "exp": 1, "log": 1, "sin": 1, "cos": 1, "sqrt": 1, "abs": 1,
    "max": 2, "min": 2,
}
NONSMOOTH_FUNCTIONS = frozenset({"abs", "max", "min"})
# produced by ``derive`` only; not accepted by the parser
_INTERNAL_FUNCTIONS = {"sign": 1, "step": 1}


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, position: int, source: str = ""):
        self.position = position
        self.source = source
        super().__init__(f"{message} at offset {position}")


class UnboundVariableError(ExprError):
    pass


class ExprDomainError(ExprError, ArithmeticError):
    pass


class ExprKinkWarning(UserWarning):
    """A derivative of abs/max/min was evaluated exactly at its kink."""


# ----------------------------------------------------------------------------
# AST
# ----------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


class Expr:
    """Immutable expression node."""

    __slots__ = ()

    def children(self) -> tuple["Expr", ...]:
        return ()

    def walk(self) -> Iterator["Expr"]:
        yield self
        for c in self.children():
            yield from c.walk()

    def variables(self) -> frozenset[str]:
        return frozenset(n.name for n in self.walk() if isinstance(n, Var))

    def functions(self) -> frozenset[str]:
        return frozenset(n.func for n in self.walk() if isinstance(n, Call))

    @property
    def is_smooth(self) -> bool:
        return not (self.functions() & NONSMOOTH_FUNCTIONS)

    def __str__(self) -> str:
        return to_source(self)

    def __call__(self, x1=None, x2=None, z=None, s=None):
        return evaluate(self, x1=x1, x2=x2, z=z, s=s)


@dataclass(frozen=True, slots=True)
class Num(Expr):
    value: float


@dataclass(frozen=True, slots=True)
class Var(Expr):
    name: str


@dataclass(frozen=True, slots=True)
class Neg(Expr):
    operand: Expr

    def children(self):
        return (self.operand,)


@dataclass(frozen=True, slots=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def children(self):
        return (self.left, self.right)


@dataclass(frozen=True, slots=True)
class Call(Expr):
    func: str
    args: tuple

    def children(self):
        return self.args


# ----------------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character {source[pos]!r}", pos, source)
        kind = m.lastgroup
        text = m.group(kind)
        start = m.start(kind)
        if text == "**":
            text = "^"
        tokens.append((kind, text, start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, source: str, variables: Sequence[str]):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0
        self.variables = tuple(variables)

    @property
    def tok(self):
        return self.tokens[self.i]

    def advance(self):
        t = self.tokens[self.i]
        self.i += 1
        return t

    def fail(self, message: str, pos: int | None = None):
        raise ExprSyntaxError(message, self.tok[2] if pos is None else pos, self.source)

    def expect(self, text: str):
        if self.tok[1] != text or self.tok[0] == "end":
            self.fail(f"expected {text!r}")
        return self.advance()

    def parse(self) -> Expr:
        if self.tok[0] == "end":
            self.fail("empty expression")
        e = self.expr()
        if self.tok[0] != "end":
            self.fail(f"unexpected token {self.tok[1]!r}")
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.tok[0] == "op" and self.tok[1] in "+-":
            op = self.advance()[1]
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.tok[0] == "op" and self.tok[1] in "*/":
            op = self.advance()[1]
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.tok[0] == "op" and self.tok[1] == "-":
            self.advance()
            return Neg(self.unary())
        if self.tok[0] == "op" and self.tok[1] == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.primary()
        if self.tok[0] == "op" and self.tok[1] == "^":
            self.advance()
            # right associative; exponent may carry its own sign
            return BinOp("^", base, self.unary())
        return base

    def primary(self) -> Expr:
        kind, text, pos = self.tok
        if kind == "num":
            self.advance()
            return Num(float(text))
        if kind == "name":
            self.advance()
            if self.tok[1] == "(" and self.tok[0] == "op":
                if text not in FUNCTIONS:
                    self.fail(f"unknown function {text!r}", pos)
                self.advance()
                args = [self.expr()]
                while self.tok[1] == "," and self.tok[0] == "op":
                    self.advance()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[text]:
                    self.fail(f"{text} takes {FUNCTIONS[text]} argument(s), got {len(args)}", pos)
                return Call(text, tuple(args))
            if text in self.variables:
                return Var(text)
            if text in CONSTANTS:
                return Num(CONSTANTS[text])
            self.fail(f"unknown identifier {text!r}", pos)
        if kind == "op" and text == "(":
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        if kind == "end":
            self.fail("unexpected end of input")
        self.fail(f"unexpected token {text!r}")


def parse(source: str, variables: Sequence[str] = VARIABLES) -> Expr:
    """Parse ``source`` into an expression tree.

    Precedence, tightest first: ``^`` (right associative), unary minus,
    ``* /``, ``+ -``.  ``**`` is accepted as a synonym of ``^``.
    """
    if not isinstance(source, str):
        raise TypeError(f"expression source must be str, got {type(source).__name__}")
    return _Parser(source, variables).parse()


def as_expr(value: Union[str, float, int, Expr], variables: Sequence[str] = VARIABLES) -> Expr:
    if isinstance(value, Expr):
        bad = value.variables() - set(variables)
        if bad:
            raise ExprError(f"variables {sorted(bad)} not allowed here")
        return value
    if isinstance(value, bool):
        raise TypeError("booleans are not expressions")
    if isinstance(value, (int, float)):
        return Num(float(value))
    return parse(value, variables)


# ----------------------------------------------------------------------------
# Printing
# ----------------------------------------------------------------------------

def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        text = str(int(v))
    else:
        text = repr(float(v))
    return f"({text})" if v < 0 or text.startswith("-") else text


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return _PREC["neg"]
    return 10


def to_source(e: Expr) -> str:
    """Render ``e`` as text that parses back to the same tree."""
    if isinstance(e, Num):
        return _fmt_num(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({', '.join(to_source(a) for a in e.args)})"
    if isinstance(e, Neg):
        inner = to_source(e.operand)
        if _prec(e.operand) < _PREC["neg"]:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        left, right = to_source(e.left), to_source(e.right)
        if e.op == "^":
            # base binds tighter than ^, exponent is right-associative
            if _prec(e.left) <= p:
                left = f"({left})"
            if _prec(e.right) < _PREC["neg"]:
                right = f"({right})"
        else:
            if _prec(e.left) < p:
                left = f"({left})"
            if _prec(e.right) <= p:
                right = f"({right})"
        return f"{left} {e.op} {right}"
    raise TypeError(f"not an expression: {e!r}")


# ----------------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------------

def _any(mask) -> bool:
    return bool(np.any(mask))


def _div(a, b):
    if _any(np.asarray(b) == 0):
        raise ExprDomainError("division by zero")
    return a / b


def _log(a):
    if _any(np.asarray(a) <= 0):
        raise ExprDomainError("log of non-positive value")
    return np.log(a)


def _sqrt(a):
    if _any(np.asarray(a) < 0):
        raise ExprDomainError("sqrt of negative value")
    return np.sqrt(a)


def _pow(a, b):
    aa, bb = np.asarray(a), np.asarray(b)
    if _any((aa < 0) & (bb != np.round(bb))):
        raise ExprDomainError("negative base with non-integer exponent")
    if _any((aa == 0) & (bb < 0)):
        raise ExprDomainError("zero raised to a negative power")
    with np.errstate(over="ignore"):
        return np.power(np.asarray(a, dtype=float), b)


def _sign(a):
    arr = np.asarray(a)
    if _any(arr == 0):
        warnings.warn("derivative of abs evaluated at its kink", ExprKinkWarning, stacklevel=3)
    return np.sign(a)


def _step(a):
    arr = np.asarray(a)
    if _any(arr == 0):
        warnings.warn("derivative of max/min evaluated at its kink", ExprKinkWarning, stacklevel=3)
    return np.where(arr > 0, 1.0, np.where(arr < 0, 0.0, 0.5))


_RUNTIME = {
    "_div": _div, "_log": _log, "_sqrt": _sqrt, "_pow": _pow,
    "_sign": _sign, "_step": _step,
    "_exp": np.exp, "_sin": np.sin, "_cos": np.cos, "_abs": np.abs,
    "_max": np.maximum, "_min": np.minimum,
}
_CODEGEN_FUNC = {
    "exp": "_exp", "log": "_log", "sin": "_sin", "cos": "_cos", "sqrt": "_sqrt",
    "abs": "_abs", "max": "_max", "min": "_min", "sign": "_sign", "step": "_step",
}


def _codegen(e: Expr) -> str:
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{_codegen(e.operand)})"
    if isinstance(e, Call):
        return f"{_CODEGEN_FUNC[e.func]}({', '.join(_codegen(a) for a in e.args)})"
    if isinstance(e, BinOp):
        a, b = _codegen(e.left), _codegen(e.right)
        if e.op == "/":
            return f"_div({a}, {b})"
        if e.op == "^":
            return f"_pow({a}, {b})"
        return f"({a} {e.op} {b})"
    raise TypeError(f"not an expression: {e!r}")


_COMPILED: dict[Expr, Callable] = {}


def compile_expr(e: Expr) -> Callable:
    """Return ``f(x1, x2, z, s)`` evaluating ``e`` (cached per tree)."""
    fn = _COMPILED.get(e)
    if fn is None:
        src = f"def _f(x1, x2, z, s):\n    return {_codegen(e)}\n"
        ns = dict(_RUNTIME)
        with np.errstate(all="ignore"):
            exec(compile(src, "<fbflow-expr>", "exec"), ns)
        fn = ns["_f"]
        if len(_COMPILED) > 4096:
            _COMPILED.clear()
        _COMPILED[e] = fn
    return fn


def evaluate(e: Expr, x1=None, x2=None, z=None, s=None):
    """Evaluate ``e``; arguments may be floats or broadcastable arrays.

    Raises :class:`UnboundVariableError` when ``e`` uses a variable that was
    not supplied and :class:`ExprDomainError` on division by zero, log or
    sqrt of an invalid argument.
    """
    env = {"x1": x1, "x2": x2, "z": z, "s": s}
    for name in e.variables():
        if env[name] is None:
            raise UnboundVariableError(f"variable {name!r} is not bound")
    out = compile_expr(e)(x1, x2, z, s)
    if isinstance(out, np.ndarray) and out.ndim == 0:
        return float(out)
    if isinstance(out, (np.floating, int)):
        return float(out)
    if not isinstance(out, np.ndarray):
        # constant expression evaluated against array inputs
        shape = np.broadcast(*[np.asarray(v) for v in env.values() if v is not None]).shape \
            if any(v is not None for v in env.values()) else ()
        return np.full(shape, float(out)) if shape else float(out)
    return out


# ----------------------------------------------------------------------------
# Symbolic differentiation
# ----------------------------------------------------------------------------

ZERO, ONE = Num(0.0), Num(1.0)


def _is(e: Expr, v: float) -> bool:
    return isinstance(e, Num) and e.value == v


def _add(a, b):
    if _is(a, 0):
        return b
    if _is(b, 0):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    return BinOp("+", a, b)


def _sub(a, b):
    if _is(b, 0):
        return a
    if _is(a, 0):
        return _neg(b)
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    return BinOp("-", a, b)


def _neg(a):
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.operand
    return Neg(a)


def _mul(a, b):
    if _is(a, 0) or _is(b, 0):
        return ZERO
    if _is(a, 1):
        return b
    if _is(b, 1):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    return BinOp("*", a, b)


def _divide(a, b):
    if _is(a, 0):
        return ZERO
    if _is(b, 1):
        return a
    return BinOp("/", a, b)


def derive(e: Expr, var: str) -> Expr:
    """Exact partial derivative of ``e`` with respect to ``var``.

    abs, max and min differentiate to piecewise expressions that warn with
    :class:`ExprKinkWarning` when evaluated exactly at a kink.
    """
    if isinstance(e, Num):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == var else ZERO
    if isinstance(e, Neg):
        return _neg(derive(e.operand, var))
    if isinstance(e, BinOp):
        a, b = e.left, e.right
        da, db = derive(a, var), derive(b, var)
        if e.op == "+":
            return _add(da, db)
        if e.op == "-":
            return _sub(da, db)
        if e.op == "*":
            return _add(_mul(da, b), _mul(a, db))
        if e.op == "/":
            return _divide(_sub(_mul(da, b), _mul(a, db)), BinOp("^", b, Num(2.0)))
        if e.op == "^":
            if _is(db, 0):
                if isinstance(b, Num):
                    lowered = BinOp("^", a, Num(b.value - 1.0)) if b.value != 1.0 else ONE
                else:
                    lowered = BinOp("^", a, _sub(b, ONE))
                return _mul(_mul(b, lowered), da)
            return _mul(e, _add(_mul(db, Call("log", (a,))), _divide(_mul(b, da), a)))
    if isinstance(e, Call):
        f = e.func
        if f in ("sign", "step"):
            return ZERO
        u = e.args[0]
        du = derive(u, var)
        if f == "exp":
            return _mul(e, du)
        if f == "log":
            return _divide(du, u)
        if f == "sin":
            return _mul(Call("cos", (u,)), du)
        if f == "cos":
            return _neg(_mul(Call("sin", (u,)), du))
        if f == "sqrt":
            return _divide(du, _mul(Num(2.0), e))
        if f == "abs":
            return _mul(Call("sign", (u,)), du)
        if f in ("max", "min"):
            v = e.args[1]
            dv = derive(v, var)
            gap = _sub(u, v) if f == "max" else _sub(v, u)
            w = Call("step", (gap,))
            return _add(_mul(w, du), _mul(_sub(ONE, w), dv))
    raise TypeError(f"cannot differentiate {e!r}")


# ----------------------------------------------------------------------------
# Forward-mode dual numbers
# ----------------------------------------------------------------------------

class Dual:
    """Value with first partial derivatives along a fixed set of directions."""

    __slots__ = ("value", "partials")

    def __init__(self, value: float, partials):
        self.value = float(value)
        self.partials = np.asarray(partials, dtype=float)

    @classmethod
    def constant(cls, value: float, n: int) -> "Dual":
        return cls(value, np.zeros(n))

    @classmethod
    def variable(cls, value: float, index: int, n: int) -> "Dual":
        p = np.zeros(n)
        p[index] = 1.0
        return cls(value, p)

    def _lift(self, other) -> "Dual":
        return other if isinstance(other, Dual) else Dual.constant(other, len(self.partials))

    def __add__(self, other):
        o = self._lift(other)
        return Dual(self.value + o.value, self.partials + o.partials)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        return Dual(self.value - o.value, self.partials - o.partials)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        return Dual(-self.value, -self.partials)

    def __mul__(self, other):
        o = self._lift(other)
        return Dual(self.value * o.value, self.partials * o.value + self.value * o.partials)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        if o.value == 0:
            raise ExprDomainError("division by zero")
        q = self.value / o.value
        return Dual(q, (self.partials - q * o.partials) / o.value)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, other):
        o = self._lift(other)
        a, b = self.value, o.value
        if a == 0 and b < 0:
            raise ExprDomainError("zero raised to a negative power")
        if a < 0 and b != round(b):
            raise ExprDomainError("negative base with non-integer exponent")
        val = a ** b
        part = (b * a ** (b - 1) if a != 0 or b >= 1 else 0.0) * self.partials
        if np.any(o.partials):
            if a <= 0:
                raise ExprDomainError("variable exponent needs a positive base")
            part = part + val * math.log(a) * o.partials
        return Dual(val, part)

    def __repr__(self):
        return f"Dual({self.value!r}, {self.partials.tolist()!r})"


def _dual_call(func: str, args: list[Dual]) -> Dual:
    u = args[0]
    if func == "exp":
        v = math.exp(u.value)
        return Dual(v, v * u.partials)
    if func == "log":
        if u.value <= 0:
            raise ExprDomainError("log of non-positive value")
        return Dual(math.log(u.value), u.partials / u.value)
    if func == "sin":
        return Dual(math.sin(u.value), math.cos(u.value) * u.partials)
    if func == "cos":
        return Dual(math.cos(u.value), -math.sin(u.value) * u.partials)
    if func == "sqrt":
        if u.value < 0:
            raise ExprDomainError("sqrt of negative value")
        r = math.sqrt(u.value)
        return Dual(r, u.partials / (2.0 * r) if r > 0 else u.partials * math.inf)
    if func == "abs":
        if u.value == 0:
            warnings.warn("abs differentiated at its kink", ExprKinkWarning, stacklevel=3)
        return Dual(abs(u.value), math.copysign(1.0, u.value) * u.partials if u.value else 0 * u.partials)
    if func in ("max", "min"):
        v = args[1]
        if u.value == v.value:
            warnings.warn(f"{func} differentiated at its kink", ExprKinkWarning, stacklevel=3)
            return Dual(u.value, 0.5 * (u.partials + v.partials))
        pick_u = (u.value > v.value) == (func == "max")
        return u if pick_u else v
    if func == "sign":
        return Dual(float(np.sign(u.value)), 0 * u.partials)
    if func == "step":
        return Dual(1.0 if u.value > 0 else (0.0 if u.value < 0 else 0.5), 0 * u.partials)
    raise TypeError(func)


def eval_dual(e: Expr, point: dict[str, float], wrt: Sequence[str]) -> Dual:
    """Evaluate ``e`` at ``point`` carrying partials with respect to ``wrt``."""
    n = len(wrt)
    env = {}
    for name, val in point.items():
        env[name] = Dual.variable(val, wrt.index(name), n) if name in wrt else Dual.constant(val, n)

    def go(node: Expr) -> Dual:
        if isinstance(node, Num):
            return Dual.constant(node.value, n)
        if isinstance(node, Var):
            if node.name not in env:
                raise UnboundVariableError(f"variable {node.name!r} is not bound")
            return env[node.name]
        if isinstance(node, Neg):
            return -go(node.operand)
        if isinstance(node, BinOp):
            a, b = go(node.left), go(node.right)
            if node.op == "+":
                return a + b
            if node.op == "-":
                return a - b
            if node.op == "*":
                return a * b
            if node.op == "/":
                return a / b
            return a ** b
        if isinstance(node, Call):
            return _dual_call(node.func, [go(a) for a in node.args])
        raise TypeError(node)

    return go(e)
