"""Restricted arithmetic language for reward expressions.

Grammar::

    expr  := term (('+' | '-') term)*
    term  := unary (('*' | '/') unary)*
    unary := ['-'] atom
    atom  := number | identifier | '(' expr ')'

Only identifiers from a caller-supplied registry are accepted, so a compiled
expression can do nothing but arithmetic over known per-step factors.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union


class RewardSyntaxError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownIdentifierError(ValueError):
    def __init__(self, name: str, position: int, allowed):
        super().__init__(f"unknown identifier {name!r} at position {position}; "
                         f"allowed: {', '.join(sorted(allowed))}")
        self.name = name
        self.position = position


class RewardRuntimeError(ArithmeticError):
    """Evaluation hit an undefined operation (division by zero, overflow)."""


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


Node = Union[Num, Var, Neg, BinOp]

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/()−])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str  # "num", "ident", "op", "end"
    text: str
    pos: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise RewardSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tok = m.group()
            tokens.append(Token(kind, "-" if tok == "−" else tok, pos))
        pos = m.end()
    tokens.append(Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, allowed):
        self.tokens = tokenize(text)
        self.i = 0
        self.allowed = frozenset(allowed) if allowed is not None else None

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def _describe(self, tok: Token) -> str:
        return "end of input" if tok.kind == "end" else repr(tok.text)

    def expect_end(self):
        if self.tok.kind != "end":
            raise RewardSyntaxError(f"unexpected {self._describe(self.tok)}", self.tok.pos)

    def expr(self) -> Node:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.tok.kind == "op" and self.tok.text == "-":
            self.i += 1
            return Neg(self.atom())
        return self.atom()

    def atom(self) -> Node:
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            return Num(float(tok.text))
        if tok.kind == "ident":
            if self.allowed is not None and tok.text not in self.allowed:
                raise UnknownIdentifierError(tok.text, tok.pos, self.allowed)
            self.i += 1
            return Var(tok.text)
        if tok.kind == "op" and tok.text == "(":
            self.i += 1
            node = self.expr()
            if not (self.tok.kind == "op" and self.tok.text == ")"):
                raise RewardSyntaxError(f"expected ')' but found {self._describe(self.tok)}", self.tok.pos)
            self.i += 1
            return node
        raise RewardSyntaxError(f"expected a number, identifier or '(' but found {self._describe(tok)}", tok.pos)


def parse(text: str, allowed=None) -> Node:
    """Parse ``text`` into a tree; ``allowed`` restricts identifiers when given."""
    p = _Parser(text, allowed)
    node = p.expr()
    p.expect_end()
    return node


def identifiers(node: Node) -> frozenset[str]:
    if isinstance(node, Var):
        return frozenset([node.name])
    if isinstance(node, Num):
        return frozenset()
    if isinstance(node, Neg):
        return identifiers(node.operand)
    return identifiers(node.left) | identifiers(node.right)


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(node: Node) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return 3
    return 4


def to_text(node: Node) -> str:
    """Print with the fewest parentheses that still re-parse to the same tree."""
    if isinstance(node, Num):
        if node.value < 0 or not math.isfinite(node.value):
            raise ValueError(f"literal {node.value!r} has no source form")
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        inner = to_text(node.operand)
        return f"-{inner}" if isinstance(node.operand, (Num, Var)) else f"-({inner})"
    p = _PREC[node.op]
    left = to_text(node.left)
    if _prec(node.left) < p:
        left = f"({left})"
    right = to_text(node.right)
    # operators are left-associative, so an equal-precedence right child needs parens
    if _prec(node.right) <= p:
        right = f"({right})"
    return f"{left} {node.op} {right}"


def evaluate_tree(node: Node, values: Mapping[str, float]) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return float(values[node.name])
    if isinstance(node, Neg):
        return -evaluate_tree(node.operand, values)
    a = evaluate_tree(node.left, values)
    b = evaluate_tree(node.right, values)
    op = node.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0.0:
        raise RewardRuntimeError("division by zero")
    return a / b
