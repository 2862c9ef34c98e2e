"""Whitelisted arithmetic expressions compiled to vectorized numpy callables.

Grammar: numeric literals, the caller's variable names, ``+ - * /``, unary
minus, comparisons (evaluating to 1.0 / 0.0), and the functions ``max``,
``min``, ``abs``, ``exp``.
"""

from __future__ import annotations

import ast
import functools
import operator
from collections.abc import Callable, Sequence

import numpy as np

from .errors import ExpressionError

_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
}
_CMPOPS = {
    ast.Lt: np.less,
    ast.LtE: np.less_equal,
    ast.Gt: np.greater,
    ast.GtE: np.greater_equal,
}


def _nary(fn):
    def apply(*args):
        if len(args) < 2:
            raise ExpressionError("max/min need at least two arguments")
        return functools.reduce(fn, args)

    return apply


_FUNCS = {
    "max": _nary(np.maximum),
    "min": _nary(np.minimum),
    "abs": np.abs,
    "exp": np.exp,
}


def compile_expression(source: str, variables: Sequence[str]) -> Callable[..., np.ndarray]:
    """Compile ``source`` into ``fn(*arrays)`` with positional ``variables``."""
    try:
        tree = ast.parse(source.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse expression {source!r}: {exc.msg}") from exc
    names = tuple(variables)
    build = _Builder(names)
    body = build(tree.body)

    def evaluate(*args):
        if len(args) != len(names):
            raise TypeError(f"expected {len(names)} arguments, got {len(args)}")
        env = dict(zip(names, (np.asarray(a, dtype=float) for a in args)))
        # non-finite results are reported by the callers, not as numpy warnings
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = body(env)
        shape = np.broadcast_shapes(*(np.shape(a) for a in args)) if args else ()
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()

    evaluate.source = source
    return evaluate


class _Builder:
    def __init__(self, names: tuple[str, ...]):
        self.names = names

    def __call__(self, node):
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            value = float(node.value)
            return lambda env: value
        if isinstance(node, ast.Name):
            if node.id not in self.names:
                raise ExpressionError(f"unknown variable {node.id!r}; allowed: {', '.join(self.names)}")
            name = node.id
            return lambda env: env[name]
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            op = _BINOPS[type(node.op)]
            left, right = self(node.left), self(node.right)
            return lambda env: op(left(env), right(env))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = self(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda env: -inner(env)
            return inner
        if isinstance(node, ast.Compare) and len(node.ops) == 1 and type(node.ops[0]) in _CMPOPS:
            cmp = _CMPOPS[type(node.ops[0])]
            left, right = self(node.left), self(node.comparators[0])
            return lambda env: cmp(left(env), right(env)).astype(float)
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
            fname = node.func.id
            if fname not in _FUNCS:
                raise ExpressionError(f"unknown function {fname!r}")
            fn = _FUNCS[fname]
            args = [self(a) for a in node.args]
            if fname in ("abs", "exp") and len(args) != 1:
                raise ExpressionError(f"{fname} takes one argument")
            return lambda env: fn(*(a(env) for a in args))
        raise ExpressionError(f"unsupported syntax: {ast.dump(node)[:60]}")
