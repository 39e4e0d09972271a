"""Closed-form coefficient expressions.

Coefficients of the PDE and of the market are written as small expression
strings, e.g. ``"0.5*exp(-x1^2)"``.  They are parsed once into an immutable
tree which can be evaluated on numpy arrays, printed back to a parseable
string and combined with ordinary arithmetic operators.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := ('-' | '+') factor | power
    power  := atom ('^' factor)?
    atom   := NUMBER | NAME | FUNC '(' expr (',' expr)* ')' | '(' expr ')'

Names are ``x1 .. xn`` (state), ``eta1 .. etal`` (robust parameter) and the
constants ``pi`` and ``e``.  Functions: exp, log, sin, cos, sqrt, tanh, abs,
min, max (the last two take two or more arguments).
"""

from __future__ import annotations

import ast
import math
import re
from typing import Callable, Mapping

import numpy as np

__all__ = ["Expr", "ExprError", "parse", "const", "var", "as_expr"]

_FUNCS: dict[str, Callable] = {
    "exp": np.exp,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "abs": np.abs,
}
_VARIADIC = {"min": np.minimum, "max": np.maximum}
_CONSTANTS = {"pi": math.pi, "e": math.e}
_VAR_RE = re.compile(r"^(x|eta)([1-9][0-9]*)$")

# binding strength used when printing
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


_BINOPS = {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide, "^": np.power}


class ExprError(ValueError):
    """Raised for malformed expressions; ``col`` is 1-based within the text."""

    def __init__(self, message: str, col: int | None = None, text: str | None = None):
        self.col = col
        self.text = text
        where = f" (column {col})" if col is not None else ""
        super().__init__(f"{message}{where}")


class Expr:
    """Immutable expression node."""

    __slots__ = ("kind", "value", "args", "_fn", "_vars")

    def __init__(self, kind: str, value=None, args: tuple["Expr", ...] = ()):
        self.kind = kind  # 'const' | 'var' | op symbol | 'neg' | 'call'
        self.value = value
        self.args = args
        self._fn = None
        self._vars = None

    # -- structure -----------------------------------------------------
    @property
    def is_const(self) -> bool:
        return self.kind == "const"

    @property
    def variables(self) -> frozenset[str]:
        if self._vars is None:
            if self.kind == "var":
                self._vars = frozenset([self.value])
            else:
                out: frozenset[str] = frozenset()
                for a in self.args:
                    out |= a.variables
                self._vars = out
        return self._vars

    def max_index(self, prefix: str) -> int:
        """Largest ``prefix<i>`` index referenced (0 if none)."""
        best = 0
        for v in self.variables:
            m = _VAR_RE.match(v)
            if m and m.group(1) == prefix:
                best = max(best, int(m.group(2)))
        return best

    # -- evaluation ----------------------------------------------------
    def _compile(self) -> Callable[[Mapping[str, np.ndarray]], object]:
        k = self.kind
        if k == "const":
            c = float(self.value)
            return lambda env: c
        if k == "var":
            name = self.value
            return lambda env: env[name]
        if k == "neg":
            f = self.args[0].compiled
            return lambda env: -f(env)
        if k == "call":
            fs = [a.compiled for a in self.args]
            if self.value in _VARIADIC:
                op = _VARIADIC[self.value]

                def call(env):
                    out = fs[0](env)
                    for g in fs[1:]:
                        out = op(out, g(env))
                    return out

                return call
            fn = _FUNCS[self.value]
            f0 = fs[0]
            return lambda env: fn(f0(env))
        lf, rf = self.args[0].compiled, self.args[1].compiled
        if k == "+":
            return lambda env: lf(env) + rf(env)
        if k == "-":
            return lambda env: lf(env) - rf(env)
        if k == "*":
            return lambda env: lf(env) * rf(env)
        if k == "/":
            return lambda env: lf(env) / rf(env)
        if k == "^":
            r = self.args[1]
            if r.is_const and float(r.value) == 2.0:
                return lambda env: (lambda u: u * u)(lf(env))
            return lambda env: np.power(lf(env), rf(env))
        raise ExprError(f"unknown node kind {k!r}")

    @property
    def compiled(self):
        if self._fn is None:
            self._fn = self._compile()
        return self._fn

    def evaluate_raw(self, env: Mapping[str, np.ndarray]):
        """Evaluate on an environment; constants come back as Python floats."""
        return self.compiled(env)

    def __call__(self, x, eta=None) -> np.ndarray:
        """Evaluate at states ``x`` of shape (..., n); returns shape (...)."""
        x = np.asarray(x, dtype=float)
        env = state_env(x, eta)
        try:
            out = self.compiled(env)
        except KeyError as exc:
            raise ExprError(f"variable {exc.args[0]} is not bound in {self}") from None
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape[:-1]).copy()

    # -- printing ------------------------------------------------------
    def _prec(self) -> int:
        if self.kind in _PREC:
            return _PREC[self.kind]
        if self.kind == "neg":
            return 3
        if self.kind == "const" and float(self.value) < 0:
            return 3
        return 5

    def __str__(self) -> str:
        k = self.kind
        if k == "const":
            v = float(self.value)
            if v == int(v) and abs(v) < 1e15:
                return str(int(v))
            return repr(v)
        if k == "var":
            return self.value
        if k == "call":
            return f"{self.value}(" + ", ".join(str(a) for a in self.args) + ")"
        if k == "neg":
            a = self.args[0]
            s = str(a)
            return f"-({s})" if a._prec() <= 3 else f"-{s}"
        left, right = self.args
        p = _PREC[k]
        ls, rs = str(left), str(right)
        if k == "^":
            if left._prec() <= p:
                ls = f"({ls})"
            if right._prec() < p:
                rs = f"({rs})"
        else:
            if left._prec() < p:
                ls = f"({ls})"
            # equal precedence on the right keeps its parens so that the
            # reparsed tree (and its rounding) is identical
            if right._prec() <= p:
                rs = f"({rs})"
        return f"{ls} {k} {rs}" if k in "+-" else f"{ls}{k}{rs}"

    def __repr__(self) -> str:
        return f"Expr({str(self)!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Expr) and str(self) == str(other)

    def __hash__(self) -> int:
        return hash(str(self))

    # -- arithmetic with constant folding -------------------------------
    def _bin(self, op: str, other) -> "Expr":
        other = as_expr(other)
        a, b = self, other
        if a.is_const and b.is_const:
            x, y = float(a.value), float(b.value)
            if op == "/" and y == 0.0:
                raise ExprError("division by zero constant")
            with np.errstate(all="ignore"):
                val = float(_BINOPS[op](np.float64(x), np.float64(y)))
            return const(val)
        if op == "+":
            if a.is_const and float(a.value) == 0.0:
                return b
            if b.is_const and float(b.value) == 0.0:
                return a
        if op == "-" and b.is_const and float(b.value) == 0.0:
            return a
        if op == "*":
            for u, w in ((a, b), (b, a)):
                if u.is_const and float(u.value) == 0.0:
                    return const(0.0)
                if u.is_const and float(u.value) == 1.0:
                    return w
        if op == "/" and b.is_const and float(b.value) == 1.0:
            return a
        if op == "^" and b.is_const and float(b.value) == 1.0:
            return a
        return Expr(op, None, (a, b))

    def __add__(self, o):
        return self._bin("+", o)

    def __radd__(self, o):
        return as_expr(o)._bin("+", self)

    def __sub__(self, o):
        return self._bin("-", o)

    def __rsub__(self, o):
        return as_expr(o)._bin("-", self)

    def __mul__(self, o):
        return self._bin("*", o)

    def __rmul__(self, o):
        return as_expr(o)._bin("*", self)

    def __truediv__(self, o):
        return self._bin("/", o)

    def __rtruediv__(self, o):
        return as_expr(o)._bin("/", self)

    def __pow__(self, o):
        return self._bin("^", o)

    def __neg__(self):
        if self.is_const:
            return const(-float(self.value))
        return Expr("neg", None, (self,))

    def substitute(self, mapping: Mapping[str, "Expr"]) -> "Expr":
        """Replace variables by expressions."""
        if self.kind == "var":
            return mapping.get(self.value, self)
        if self.kind == "const":
            return self
        new_args = tuple(a.substitute(mapping) for a in self.args)
        if self.kind == "neg":
            return -new_args[0]
        if self.kind == "call":
            return Expr("call", self.value, new_args)
        return new_args[0]._bin(self.kind, new_args[1])


def const(v: float) -> Expr:
    return Expr("const", float(v))


def var(name: str) -> Expr:
    if not _VAR_RE.match(name):
        raise ExprError(f"invalid variable name {name!r}")
    return Expr("var", name)


def as_expr(v) -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, str):
        return parse(v)
    if isinstance(v, (int, float, np.floating, np.integer)):
        return const(float(v))
    raise TypeError(f"cannot convert {type(v).__name__} to Expr")


def state_env(x: np.ndarray, eta=None) -> dict[str, np.ndarray]:
    env = {f"x{i + 1}": x[..., i] for i in range(x.shape[-1])}
    if eta is not None:
        eta = np.asarray(eta, dtype=float)
        for j in range(eta.shape[-1]):
            env[f"eta{j + 1}"] = eta[..., j]
    return env


# -- parsing --------------------------------------------------------------

def _from_ast(node: ast.AST, text: str, colmap: list[int]) -> Expr:
    col = getattr(node, "col_offset", None)
    ucol = colmap[col] + 1 if col is not None and col < len(colmap) else None
    if isinstance(node, ast.Expression):
        return _from_ast(node.body, text, colmap)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExprError(f"unsupported literal {node.value!r}", ucol, text)
        return const(node.value)
    if isinstance(node, ast.Name):
        if node.id in _CONSTANTS:
            return const(_CONSTANTS[node.id])
        if not _VAR_RE.match(node.id):
            raise ExprError(f"unknown name {node.id!r}", ucol, text)
        return Expr("var", node.id)
    if isinstance(node, ast.UnaryOp):
        inner = _from_ast(node.operand, text, colmap)
        if isinstance(node.op, ast.USub):
            return -inner
        if isinstance(node.op, ast.UAdd):
            return inner
        raise ExprError("unsupported unary operator", ucol, text)
    if isinstance(node, ast.BinOp):
        ops = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/", ast.Pow: "^"}
        op = ops.get(type(node.op))
        if op is None:
            raise ExprError("unsupported operator", ucol, text)
        left = _from_ast(node.left, text, colmap)
        right = _from_ast(node.right, text, colmap)
        if left.is_const and right.is_const:
            try:
                return left._bin(op, right)
            except ExprError as exc:
                raise ExprError(str(exc), ucol, text) from None
        return Expr(op, None, (left, right))
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.keywords:
            raise ExprError("unsupported call", ucol, text)
        name = node.func.id
        args = tuple(_from_ast(a, text, colmap) for a in node.args)
        if name in _FUNCS:
            if len(args) != 1:
                raise ExprError(f"{name} takes exactly one argument", ucol, text)
        elif name in _VARIADIC:
            if len(args) < 2:
                raise ExprError(f"{name} takes at least two arguments", ucol, text)
        else:
            raise ExprError(f"unknown function {name!r}", ucol, text)
        return Expr("call", name, args)
    raise ExprError(f"unsupported syntax {type(node).__name__}", ucol, text)


def parse(text: str) -> Expr:
    """Parse an expression string into an :class:`Expr`."""
    if not isinstance(text, str):
        return as_expr(text)
    if "**" in text:
        raise ExprError("use '^' for powers", text.index("**") + 1, text)
    # '^' -> '**' keeps Python precedence; colmap maps new offsets to old ones
    py, colmap = [], []
    for i, ch in enumerate(text):
        if ch == "^":
            py.append("**")
            colmap += [i, i]
        else:
            py.append(ch)
            colmap.append(i)
    src = "".join(py)
    colmap.append(len(text))
    lead = len(src) - len(src.lstrip())
    colmap = colmap[lead:]
    try:
        tree = ast.parse(src.strip(), mode="eval")
    except SyntaxError as exc:
        off = (exc.offset or 1) - 1
        col = colmap[min(off, len(colmap) - 1)] + 1
        raise ExprError(f"syntax error in {text!r}", col, text) from None
    return _from_ast(tree, text, colmap)
