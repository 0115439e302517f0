"""Small arithmetic expression grammar over the chart variables ``x`` and ``y``.

Accepted syntax: numbers, ``x``, ``y``, ``pi``, the binary operators
``+ - * / **`` (``^`` is accepted as a synonym of ``**``), unary minus, and the
functions ``exp``, ``sin``, ``cos`` and ``pow(a, b)``.  Expressions are parsed
with :mod:`ast`, checked node by node, and handed to sympy so that first and
second derivatives are exact.
"""

from __future__ import annotations

import ast
import math

import numpy as np
import sympy as sp

from .errors import ExpressionError

X, Y = sp.symbols("x y", real=True)

_FUNCS = {"exp": sp.exp, "sin": sp.sin, "cos": sp.cos}
_NAMES = {"x": X, "y": Y, "pi": sp.pi}
_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a ** b,
}


def _convert(node):
    if isinstance(node, ast.Expression):
        return _convert(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        return sp.nsimplify(node.value) if isinstance(node.value, int) else sp.Float(node.value)
    if isinstance(node, ast.Name):
        if node.id not in _NAMES:
            raise ExpressionError(f"unknown variable {node.id!r}; only x, y and pi are allowed")
        return _NAMES[node.id]
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_convert(node.left), _convert(node.right))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        inner = _convert(node.operand)
        return -inner if isinstance(node.op, ast.USub) else inner
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
        name = node.func.id
        args = [_convert(a) for a in node.args]
        if name == "pow" and len(args) == 2:
            return args[0] ** args[1]
        if name in _FUNCS and len(args) == 1:
            return _FUNCS[name](args[0])
        raise ExpressionError(f"unsupported function call {name!r} with {len(args)} argument(s)")
    raise ExpressionError(f"unsupported syntax: {ast.dump(node)[:60]}")


class ScalarExpression:
    """A scalar field f(x, y) with exact gradient and hessian.

    Calling the object evaluates f; :meth:`grad` and :meth:`jet` return the
    derivatives.  Inputs may be Python floats or numpy arrays of equal shape.
    """

    def __init__(self, source: str):
        if not isinstance(source, str) or not source.strip():
            raise ExpressionError("expression must be a non-empty string")
        try:
            tree = ast.parse(source.strip().replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse expression {source!r}: {exc.msg}") from None
        self.source = source.strip()
        self.expr = _convert(tree)
        fx, fy = sp.diff(self.expr, X), sp.diff(self.expr, Y)
        fxx, fxy, fyy = sp.diff(fx, X), sp.diff(fx, Y), sp.diff(fy, Y)
        exprs = [self.expr, fx, fy, fxx, fxy, fyy]
        self._np = [sp.lambdify((X, Y), e, modules="numpy") for e in exprs]
        self._math = [sp.lambdify((X, Y), e, modules="math") for e in exprs]
        self.is_constant = not (self.expr.free_symbols & {X, Y})

    def _call(self, i, x, y):
        if isinstance(x, float) and isinstance(y, float):
            return float(self._math[i](x, y))
        out = self._np[i](x, y)
        return np.broadcast_to(np.asarray(out, dtype=float), np.shape(x) if np.ndim(x) else np.shape(y)) * 1.0

    def __call__(self, x, y):
        return self._call(0, x, y)

    def grad(self, x, y):
        return self._call(1, x, y), self._call(2, x, y)

    def jet(self, x, y):
        """Return ``(f, fx, fy, fxx, fxy, fyy)``."""
        return tuple(self._call(i, x, y) for i in range(6))

    def log_jet(self, x, y):
        """Value and derivatives of ``log f`` (used for conformal factors)."""
        f, fx, fy, fxx, fxy, fyy = self.jet(x, y)
        gx, gy = fx / f, fy / f
        return f, gx, gy, fxx / f - gx * gx, fxy / f - gx * gy, fyy / f - gy * gy

    def __eq__(self, other):
        return isinstance(other, ScalarExpression) and other.source == self.source

    def __hash__(self):
        return hash(("ScalarExpression", self.source))

    def __repr__(self):
        return f"ScalarExpression({self.source!r})"


def is_finite_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
