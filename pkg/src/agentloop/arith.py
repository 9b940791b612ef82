"""Restricted arithmetic expression interpreter and brute-force expression search.

Supports numbers, + - * /, unary minus, and parentheses. Nothing else: this is
the reference execution backend for the code tool and the exact checker for
expression-building tasks. Exact mode computes with Fractions so division
never loses precision.
"""
from __future__ import annotations

import re
from fractions import Fraction
from functools import lru_cache
from itertools import permutations
from typing import Optional, Union

from .errors import AgentLoopError

Number = Union[int, float, Fraction]


class ExpressionError(AgentLoopError):
    pass


_TOKEN = re.compile(r"\s*(?:(\d+\.\d+|\d+)|([()+\-*/]))")


def tokenize(text: str) -> list:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            if text[pos:].strip() == "":
                break
            raise ExpressionError(f"unexpected character {text[pos:].strip()[0]!r} in expression")
        if m.group(1) is not None:
            raw = m.group(1)
            tokens.append(float(raw) if "." in raw else int(raw))
        else:
            tokens.append(m.group(2))
        pos = m.end()
    if not tokens:
        raise ExpressionError("empty expression")
    return tokens


class _Parser:
    def __init__(self, tokens: list, exact: bool):
        self.tokens = tokens
        self.pos = 0
        self.exact = exact

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expr(self) -> Number:
        value = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            rhs = self.term()
            value = value + rhs if op == "+" else value - rhs
        return value

    def term(self) -> Number:
        value = self.factor()
        while self.peek() in ("*", "/"):
            op = self.take()
            rhs = self.factor()
            if op == "*":
                value = value * rhs
            else:
                if rhs == 0:
                    raise ExpressionError("division by zero")
                value = value / rhs
        return value

    def factor(self) -> Number:
        tok = self.take()
        if tok == "-":
            return -self.factor()
        if tok == "(":
            value = self.expr()
            if self.take() != ")":
                raise ExpressionError("unbalanced parentheses")
            return value
        if isinstance(tok, (int, float)):
            if self.exact:
                return Fraction(tok) if isinstance(tok, int) else Fraction(str(tok))
            return tok
        raise ExpressionError(f"unexpected token {tok!r}")


def evaluate(text: str, exact: bool = False) -> Number:
    """Evaluate an arithmetic expression; ExpressionError on anything invalid."""
    parser = _Parser(tokenize(text), exact=exact)
    value = parser.expr()
    if parser.pos != len(parser.tokens):
        raise ExpressionError("trailing tokens after expression")
    return value


def number_literals(text: str) -> list:
    """The numeric literals of an expression, in source order."""
    return [tok for tok in tokenize(text) if isinstance(tok, (int, float))]


def uses_exactly(text: str, numbers) -> bool:
    """True if the expression uses each given number exactly once."""
    try:
        literals = number_literals(text)
    except ExpressionError:
        return False
    return sorted(literals) == sorted(numbers)


_EXPR_CHUNK = re.compile(r"[\d\.()+\-*/ ]+")


def find_expression(text: str) -> Optional[str]:
    """Extract the longest evaluable expression substring from prose."""
    best = None
    for m in _EXPR_CHUNK.finditer(text):
        for chunk in (m.group().strip(), m.group().strip().strip(". ")):
            if not any(ch.isdigit() for ch in chunk):
                continue
            try:
                evaluate(chunk)
            except ExpressionError:
                continue
            if best is None or len(chunk) > len(best):
                best = chunk
            break
    return best


def _combine(values: tuple) -> list:
    """All (value, expression) pairs over every bracketing and operator choice."""
    if len(values) == 1:
        v = values[0]
        return [(Fraction(v), str(v))]
    out = []
    for split in range(1, len(values)):
        for lv, le in _combine(values[:split]):
            for rv, re_ in _combine(values[split:]):
                out.append((lv + rv, f"({le}+{re_})"))
                out.append((lv - rv, f"({le}-{re_})"))
                out.append((lv * rv, f"({le}*{re_})"))
                if rv != 0:
                    out.append((lv / rv, f"({le}/{re_})"))
    return out


@lru_cache(maxsize=4096)
def search_expression(numbers: tuple, target: int) -> Optional[str]:
    """Brute-force search for an expression over `numbers` hitting `target`.

    Deterministic: iterates orderings in sorted order and returns the first
    hit. None when no combination of + - * / and parentheses reaches the
    target using each number exactly once.
    """
    goal = Fraction(target)
    for perm in sorted(set(permutations(numbers))):
        for value, expr in _combine(perm):
            if value == goal:
                return expr[1:-1] if expr.startswith("(") else expr
    return None


def _sides(text: str) -> list:
    return [side.strip() for side in text.split("=") if side.strip()]


def extract_candidate_expression(text: str) -> Optional[str]:
    """Best-effort expression extraction from an answer string.

    Handles bare expressions, `expr = value` forms, and prose around the
    expression. Returns None when nothing parses.
    """
    sides = _sides(text) or [text]
    best = None
    best_literals = -1
    for side in sides:
        expr = side
        try:
            evaluate(expr)
        except ExpressionError:
            expr = find_expression(side)
            if expr is None:
                continue
        n = len(number_literals(expr))
        if n > best_literals:
            best, best_literals = expr, n
    return best
