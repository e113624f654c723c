"""Arithmetic expressions for user-supplied coefficient fields.

Grammar: numbers, the names ``s`` (time), ``x`` (1D coordinate or the point
in ``smoothpow``), ``x1 .. xd``, ``pi``, ``e``; operators ``+ - * / ^``; the
functions ``abs``, ``exp`` and ``smoothpow(s, x)`` (the C^2 smoothed power
``|x|_*^s``). Expressions are compiled once and evaluated on point batches.
"""

from __future__ import annotations

import ast
from typing import Callable

import numpy as np

from .operators import CoefficientField, eval_smooth_power

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class ExpressionError(ValueError):
    pass


def compile_expression(text: str, d: int) -> Callable[[float, np.ndarray], np.ndarray]:
    """Compile ``text`` into ``f(s, pts) -> (n,)``."""
    try:
        tree = ast.parse(text.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    _validate(tree.body, d, text)

    def evaluate(s: float, pts: np.ndarray) -> np.ndarray:
        n = len(pts)
        out = _eval(tree.body, s, pts)
        return np.broadcast_to(np.asarray(out, dtype=float), (n,)).copy()

    evaluate.uses_time = any(isinstance(n, ast.Name) and n.id == "s" for n in ast.walk(tree))
    return evaluate


def _names(d: int) -> set[str]:
    names = {"s", "pi", "e", "x"}
    names.update(f"x{i + 1}" for i in range(d))
    return names


def _validate(node, d: int, text: str) -> None:
    if isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"operator {type(node.op).__name__} not allowed in {text!r}")
        _validate(node.left, d, text)
        _validate(node.right, d, text)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ExpressionError(f"unary operator not allowed in {text!r}")
        _validate(node.operand, d, text)
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ExpressionError(f"only numeric constants allowed in {text!r}")
    elif isinstance(node, ast.Name):
        if node.id not in _names(d):
            raise ExpressionError(f"unknown name {node.id!r} in {text!r}")
        if node.id == "x" and d != 1:
            raise ExpressionError(f"bare 'x' is only valid in 1D or inside smoothpow ({text!r})")
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in ("abs", "exp", "smoothpow"):
            raise ExpressionError(f"only abs, exp and smoothpow may be called ({text!r})")
        if node.keywords:
            raise ExpressionError(f"keyword arguments not allowed ({text!r})")
        if node.func.id == "smoothpow":
            if len(node.args) != 2:
                raise ExpressionError("smoothpow takes (exponent, x)")
            if not (isinstance(node.args[1], ast.Name) and node.args[1].id == "x"):
                raise ExpressionError("second argument of smoothpow must be x")
            _validate(node.args[0], d, text)
        else:
            if len(node.args) != 1:
                raise ExpressionError(f"{node.func.id} takes one argument")
            _validate(node.args[0], d, text)
    else:
        raise ExpressionError(f"construct {type(node).__name__} not allowed in {text!r}")


def _eval(node, s: float, pts: np.ndarray):
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, s, pts), _eval(node.right, s, pts))
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, s, pts)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        if node.id == "s":
            return s
        if node.id == "pi":
            return np.pi
        if node.id == "e":
            return np.e
        if node.id == "x":
            return pts[:, 0]
        return pts[:, int(node.id[1:]) - 1]
    name = node.func.id
    if name == "smoothpow":
        exponent = float(np.asarray(_eval(node.args[0], s, pts)).reshape(-1)[0])
        return eval_smooth_power(exponent, pts, 0)
    arg = _eval(node.args[0], s, pts)
    return np.abs(arg) if name == "abs" else np.exp(arg)


def custom_field(spec: dict) -> CoefficientField:
    """Build a field from ``{"d", "Q", "F", "V", "eta"}`` expression strings.

    ``Q`` is a d x d nested list (or a single string meaning ``expr * I``),
    ``F`` a list of d strings, ``V`` a string. ``dQ`` is obtained by central
    differences of the compiled ``Q`` expressions.
    """
    d = int(spec.get("d", 1))
    q_spec = spec["Q"]
    if isinstance(q_spec, str):
        q_spec = [[q_spec if i == j else "0" for j in range(d)] for i in range(d)]
    q_fns = [[compile_expression(str(q_spec[i][j]), d) for j in range(d)] for i in range(d)]
    f_spec = spec.get("F", ["0"] * d)
    if isinstance(f_spec, str):
        f_spec = [f_spec]
    if len(f_spec) != d:
        raise ExpressionError(f"F must have {d} components")
    f_fns = [compile_expression(str(t), d) for t in f_spec]
    v_fn = compile_expression(str(spec.get("V", "0")), d)

    def Q(s, x):
        return np.stack([np.stack([q_fns[i][j](s, x) for j in range(d)], axis=-1)
                         for i in range(d)], axis=-2)

    def dQ(s, x, h=1e-5):
        out = np.empty((len(x), d, d, d))
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            out[:, k] = (Q(s, x + e) - Q(s, x - e)) / (2 * h)
        return out

    def F(s, x):
        return np.stack([fn(s, x) for fn in f_fns], axis=-1)

    eta = float(spec["eta"])
    time_dependent = any(fn.uses_time for fn in [*f_fns, v_fn, *(f for row in q_fns for f in row)])
    return CoefficientField(d, Q, dQ, F, v_fn, eta, family={"family": "custom", **{
        k: spec[k] for k in spec if k != "family"}}, time_dependent=time_dependent)
