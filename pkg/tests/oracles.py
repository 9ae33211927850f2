"""Independent reference implementations used only by the tests.

Nothing here imports from ``uavreward``: the expression oracle is a
shunting-yard converter plus a postfix stack machine, and the physics
oracles are written straight from the closed-form models.
"""

from __future__ import annotations

import math
import re

_TOK = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|(.))")
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3}


def to_postfix(text: str) -> list:
    out, ops = [], []
    prev = None  # None | "value" | "op"
    for num, name, sym in _TOK.findall(text):
        if num:
            out.append(("num", float(num)))
            prev = "value"
        elif name:
            out.append(("var", name))
            prev = "value"
        elif sym == "(":
            ops.append("(")
            prev = "op"
        elif sym == ")":
            while ops[-1] != "(":
                out.append(("op", ops.pop()))
            ops.pop()
            prev = "value"
        elif sym.strip():
            op = "neg" if sym == "-" and prev != "value" else sym
            if op == "neg":
                ops.append(op)  # right-assoc prefix operator
            else:
                while ops and ops[-1] != "(" and _PREC[ops[-1]] >= _PREC[op]:
                    out.append(("op", ops.pop()))
                ops.append(op)
            prev = "op"
    while ops:
        out.append(("op", ops.pop()))
    return out


def eval_postfix(program: list, env: dict) -> float:
    stack: list[float] = []
    for kind, item in program:
        if kind == "num":
            stack.append(item)
        elif kind == "var":
            stack.append(float(env[item]))
        elif item == "neg":
            stack.append(-stack.pop())
        else:
            b, a = stack.pop(), stack.pop()
            if item == "+":
                stack.append(a + b)
            elif item == "-":
                stack.append(a - b)
            elif item == "*":
                stack.append(a * b)
            else:
                if b == 0.0:
                    raise ZeroDivisionError("division by zero")
                stack.append(a / b)
    (result,) = stack
    return result


def eval_text(text: str, env: dict) -> float:
    return eval_postfix(to_postfix(text), env)


# --- physics -------------------------------------------------------------------

def hover_power(p0=79.86, pi=88.63):
    # blade profile plus induced power at V = 0
    return p0 + pi


def rotary_wing_power(v, p0=79.86, pi=88.63, u_tip=120.0, v0=4.03, d0=0.6, rho=1.225, s=0.05, a=0.503):
    blade = p0 * (1 + 3 * v ** 2 / u_tip ** 2)
    induced = pi * math.sqrt(math.sqrt(1 + v ** 4 / (4 * v0 ** 4)) - v ** 2 / (2 * v0 ** 2))
    parasite = 0.5 * d0 * rho * s * a * v ** 3
    return blade + induced + parasite
