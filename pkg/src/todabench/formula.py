"""Closed expression grammar for weight functions on the torus.

Allowed: numbers, ``pi``, ``x``, ``y``, ``+``, ``-``, ``*``, unary minus,
``sin``, ``cos``, ``exp`` and ``d(px, py)`` (torus distance to a point).
Anything else is rejected before evaluation.
"""

from __future__ import annotations

import ast

import numpy as np

from .torus import TorusGrid

FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
NAMES = ("x", "y", "pi")


class FormulaError(ValueError):
    pass


def _const(node) -> float:
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return float(node.value)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _const(node.operand)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Name) and node.id == "pi":
        return float(np.pi)
    if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Sub, ast.Mult)):
        a, b = _const(node.left), _const(node.right)
        return a + b if isinstance(node.op, ast.Add) else a - b if isinstance(node.op, ast.Sub) else a * b
    raise FormulaError("d(px, py) takes constant coordinates")


def _check(node):
    if isinstance(node, ast.Expression):
        return _check(node.body)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise FormulaError(f"unsupported constant {node.value!r}")
        return
    if isinstance(node, ast.Name):
        if node.id not in NAMES:
            raise FormulaError(f"unknown name {node.id!r}")
        return
    if isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise FormulaError("only unary minus is supported")
        return _check(node.operand)
    if isinstance(node, ast.BinOp):
        if not isinstance(node.op, (ast.Add, ast.Sub, ast.Mult)):
            raise FormulaError(f"operator {type(node.op).__name__} is not supported")
        _check(node.left)
        return _check(node.right)
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.keywords:
            raise FormulaError("unsupported call")
        name = node.func.id
        if name in FUNCTIONS:
            if len(node.args) != 1:
                raise FormulaError(f"{name} takes one argument")
            return _check(node.args[0])
        if name == "d":
            if len(node.args) != 2:
                raise FormulaError("d takes two coordinates")
            for a in node.args:
                _const(a)
            return
        raise FormulaError(f"unknown function {name!r}")
    raise FormulaError(f"unsupported syntax {type(node).__name__}")


def parse(text: str) -> ast.Expression:
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise FormulaError(f"cannot parse {text!r}: {exc.msg}") from None
    _check(tree)
    return tree


def evaluate(text: str, grid: TorusGrid) -> np.ndarray:
    """Sample the formula on the grid nodes."""
    tree = parse(text)
    X, Y = grid.coords

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return {"x": X, "y": Y, "pi": np.pi}[node.id]
        if isinstance(node, ast.UnaryOp):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp):
            a, b = ev(node.left), ev(node.right)
            if isinstance(node.op, ast.Add):
                return a + b
            if isinstance(node.op, ast.Sub):
                return a - b
            return a * b
        name = node.func.id
        if name == "d":
            return grid.distance_to((_const(node.args[0]), _const(node.args[1])))
        return FUNCTIONS[name](ev(node.args[0]))

    return np.asarray(ev(tree), dtype=float) * np.ones(grid.shape)
