"""Tiny arithmetic expression grammar for scenario-supplied rate functions.

Supported: numbers, named variables, + - * / ** and unary minus, and the
functions exp, log, sqrt, sin, cos, tan, abs, step, min, max.  step(x) is
1 for x >= 0 and 0 otherwise, which is how age cutoffs are written, e.g.
"step(a - 0.15) * p / (1 + p)".  Everything evaluates vectorized over
numpy arrays.
"""

import ast

import numpy as np

from .errors import ConfigurationError

_FUNCTIONS = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "abs": np.abs,
    "step": lambda x: np.where(np.asarray(x) >= 0.0, 1.0, 0.0),
    "min": np.minimum,
    "max": np.maximum,
}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


def compile_expression(text, variables):
    """Compile ``text`` into a callable taking keyword args named in ``variables``.

    Raises ConfigurationError on any syntax outside the grammar above.
    """
    if not isinstance(text, str) or not text.strip():
        raise ConfigurationError("expression must be a non-empty string")
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse expression {text!r}: {exc}") from exc
    allowed = set(variables)

    def check(node):
        if isinstance(node, ast.Expression):
            check(node.body)
        elif isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            check(node.left)
            check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            check(node.operand)
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            pass
        elif isinstance(node, ast.Name):
            if node.id not in allowed:
                raise ConfigurationError(
                    f"unknown variable {node.id!r} in expression {text!r} "
                    f"(allowed: {sorted(allowed)})"
                )
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
                raise ConfigurationError(f"unknown function call in expression {text!r}")
            if node.keywords:
                raise ConfigurationError(f"keyword arguments not allowed in {text!r}")
            for arg in node.args:
                check(arg)
        else:
            raise ConfigurationError(
                f"unsupported syntax {type(node).__name__!r} in expression {text!r}"
            )

    check(tree)

    def evaluate(node, env):
        if isinstance(node, ast.Expression):
            return evaluate(node.body, env)
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](evaluate(node.left, env), evaluate(node.right, env))
        if isinstance(node, ast.UnaryOp):
            value = evaluate(node.operand, env)
            return -value if isinstance(node.op, ast.USub) else +value
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id]
        if isinstance(node, ast.Call):
            args = [evaluate(arg, env) for arg in node.args]
            return _FUNCTIONS[node.func.id](*args)
        raise AssertionError("unreachable after check()")

    def fn(**env):
        missing = allowed - set(env)
        if missing:
            raise ConfigurationError(f"expression {text!r} missing variables {sorted(missing)}")
        with np.errstate(all="ignore"):
            return evaluate(tree, env)

    fn.source = text
    return fn
