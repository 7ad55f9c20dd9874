"""Rate-expression mini-language: parser, printer, evaluator.

Expressions are built from the coordinate variables ``x1..xd``, numeric
literals, the arithmetic operators ``+ - * /``, the functions ``exp``,
``log``, ``abs``, ``min``, ``max``, and a piecewise construct
``cond(p, a, b)`` whose test ``p`` is a comparison such as ``x1 > x2``.

Evaluation never traps: division by zero or ``log`` of a nonpositive
argument produce non-finite values (inf/nan) that model validation is
expected to flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ExprError",
    "RateExpr",
    "parse_rate_expr",
]

_FUNCTIONS = {"exp": 1, "log": 1, "abs": 1, "min": 2, "max": 2, "cond": 3}
_CMP_OPS = ("<=", ">=", "==", "!=", "<", ">")


class ExprError(ValueError):
    """Parse failure; ``position`` is the character offset in the source."""

    def __init__(self, message, position):
        super().__init__(f"{message} at offset {position}")
        self.position = position


# --- expression tree ---------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 1-based, matches the state label


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    fn: str  # exp log abs min max
    args: tuple


@dataclass(frozen=True)
class Cmp:
    op: str  # < <= > >= == !=
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Cond:
    test: Cmp
    then: "Node"
    other: "Node"


Node = Num | Var | Neg | BinOp | Call | Cmp | Cond


def _print(node) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return f"x{node.index}"
    if isinstance(node, Neg):
        return f"(-{_print(node.arg)})"
    if isinstance(node, BinOp):
        return f"({_print(node.left)} {node.op} {_print(node.right)})"
    if isinstance(node, Call):
        return f"{node.fn}({', '.join(_print(a) for a in node.args)})"
    if isinstance(node, Cmp):
        return f"{_print(node.left)} {node.op} {_print(node.right)}"
    if isinstance(node, Cond):
        return f"cond({_print(node.test)}, {_print(node.then)}, {_print(node.other)})"
    raise TypeError(f"not an expression node: {node!r}")


def _free_vars(node, out):
    if isinstance(node, Var):
        out.add(node.index)
    elif isinstance(node, Neg):
        _free_vars(node.arg, out)
    elif isinstance(node, (BinOp, Cmp)):
        _free_vars(node.left, out)
        _free_vars(node.right, out)
    elif isinstance(node, Call):
        for a in node.args:
            _free_vars(a, out)
    elif isinstance(node, Cond):
        _free_vars(node.test, out)
        _free_vars(node.then, out)
        _free_vars(node.other, out)


def _compile(node):
    """Build a closure f(X) with X[..., i-1] supplying variable xi."""
    if isinstance(node, Num):
        v = node.value
        return lambda X: v
    if isinstance(node, Var):
        i = node.index - 1
        return lambda X: X[..., i]
    if isinstance(node, Neg):
        f = _compile(node.arg)
        return lambda X: -f(X)
    if isinstance(node, BinOp):
        fl, fr = _compile(node.left), _compile(node.right)
        op = node.op
        if op == "+":
            return lambda X: fl(X) + fr(X)
        if op == "-":
            return lambda X: fl(X) - fr(X)
        if op == "*":
            return lambda X: fl(X) * fr(X)
        return lambda X: np.divide(fl(X), fr(X))
    if isinstance(node, Call):
        fns = [_compile(a) for a in node.args]
        if node.fn == "exp":
            (f,) = fns
            return lambda X: np.exp(f(X))
        if node.fn == "log":
            (f,) = fns
            return lambda X: np.log(f(X))
        if node.fn == "abs":
            (f,) = fns
            return lambda X: np.abs(f(X))
        if node.fn == "min":
            fa, fb = fns
            return lambda X: np.minimum(fa(X), fb(X))
        fa, fb = fns
        return lambda X: np.maximum(fa(X), fb(X))
    if isinstance(node, Cmp):
        fl, fr = _compile(node.left), _compile(node.right)
        op = node.op
        if op == "<":
            return lambda X: fl(X) < fr(X)
        if op == "<=":
            return lambda X: fl(X) <= fr(X)
        if op == ">":
            return lambda X: fl(X) > fr(X)
        if op == ">=":
            return lambda X: fl(X) >= fr(X)
        if op == "==":
            return lambda X: fl(X) == fr(X)
        return lambda X: fl(X) != fr(X)
    if isinstance(node, Cond):
        ft, fa, fb = _compile(node.test), _compile(node.then), _compile(node.other)
        return lambda X: np.where(ft(X), fa(X), fb(X))
    raise TypeError(f"not an expression node: {node!r}")


@dataclass(frozen=True)
class RateExpr:
    """A parsed rate expression over the simplex coordinates x1..xd."""

    root: Node

    def __str__(self):
        return _print(self.root)

    def free_variables(self):
        """Set of 1-based variable indices appearing in the expression."""
        out: set[int] = set()
        _free_vars(self.root, out)
        return out

    def compiled(self):
        """Vectorized evaluator f(X) -> values, X of shape (..., d)."""
        f = _compile(self.root)

        def run(X):
            with np.errstate(all="ignore"):
                return np.asarray(f(np.asarray(X, dtype=float)), dtype=float)

        return run

    def evaluate(self, x) -> float:
        """Evaluate at a single point (sequence of d coordinates)."""
        return float(self.compiled()(np.asarray(x, dtype=float)))


# --- tokenizer / recursive-descent parser ------------------------------------


class _Lexer:
    def __init__(self, source: str):
        self.src = source
        self.pos = 0
        self.tokens = []
        self._scan()
        self.cursor = 0

    def _scan(self):
        src, n = self.src, len(self.src)
        i = 0
        while i < n:
            c = src[i]
            if c.isspace():
                i += 1
                continue
            if c.isdigit() or (c == "." and i + 1 < n and src[i + 1].isdigit()):
                j = i
                while j < n and (src[j].isdigit() or src[j] == "."):
                    j += 1
                if j < n and src[j] in "eE":
                    k = j + 1
                    if k < n and src[k] in "+-":
                        k += 1
                    if k < n and src[k].isdigit():
                        j = k
                        while j < n and src[j].isdigit():
                            j += 1
                try:
                    value = float(src[i:j])
                except ValueError:
                    raise ExprError("bad numeric literal", i)
                self.tokens.append(("num", value, i))
                i = j
                continue
            if c.isalpha() or c == "_":
                j = i
                while j < n and (src[j].isalnum() or src[j] == "_"):
                    j += 1
                self.tokens.append(("ident", src[i:j], i))
                i = j
                continue
            two = src[i : i + 2]
            if two in ("<=", ">=", "==", "!="):
                self.tokens.append(("op", two, i))
                i += 2
                continue
            if c in "+-*/(),<>":
                self.tokens.append(("op", c, i))
                i += 1
                continue
            raise ExprError(f"unexpected character {c!r}", i)
        self.tokens.append(("end", "", n))

    def peek(self):
        return self.tokens[self.cursor]

    def advance(self):
        tok = self.tokens[self.cursor]
        if tok[0] != "end":
            self.cursor += 1
        return tok


class _Parser:
    def __init__(self, source: str, constants=None):
        self.lex = _Lexer(source)
        self.constants = dict(constants or {})

    def parse(self) -> Node:
        node = self._sum()
        kind, val, pos = self.lex.peek()
        if kind != "end":
            raise ExprError(f"unexpected token {val!r}", pos)
        return node

    def _sum(self) -> Node:
        node = self._product()
        while True:
            kind, val, _ = self.lex.peek()
            if kind == "op" and val in "+-":
                self.lex.advance()
                node = BinOp(val, node, self._product())
            else:
                return node

    def _product(self) -> Node:
        node = self._unary()
        while True:
            kind, val, _ = self.lex.peek()
            if kind == "op" and val in "*/":
                self.lex.advance()
                node = BinOp(val, node, self._unary())
            else:
                return node

    def _unary(self) -> Node:
        kind, val, pos = self.lex.peek()
        if kind == "op" and val == "-":
            self.lex.advance()
            return Neg(self._unary())
        return self._atom()

    def _atom(self) -> Node:
        kind, val, pos = self.lex.advance()
        if kind == "num":
            return Num(float(val))
        if kind == "ident":
            nxt = self.lex.peek()
            if nxt[0] == "op" and nxt[1] == "(":
                return self._call(val, pos)
            return self._name(val, pos)
        if kind == "op" and val == "(":
            node = self._sum()
            self._expect(")")
            return node
        raise ExprError("syntax error", pos)

    def _name(self, name, pos) -> Node:
        if name.startswith("x") and name[1:].isdigit():
            index = int(name[1:])
            if index < 1:
                raise ExprError(f"bad variable {name!r}", pos)
            return Var(index)
        if name in self.constants:
            return Num(float(self.constants[name]))
        raise ExprError(f"unknown identifier {name!r}", pos)

    def _call(self, name, pos) -> Node:
        if name not in _FUNCTIONS:
            raise ExprError(f"unknown identifier {name!r}", pos)
        self._expect("(")
        args = []
        if name == "cond":
            args.append(self._comparison())
            self._expect(",")
        while True:
            args.append(self._sum())
            kind, val, p = self.lex.peek()
            if kind == "op" and val == ",":
                self.lex.advance()
                continue
            break
        self._expect(")")
        if len(args) != _FUNCTIONS[name]:
            raise ExprError(
                f"{name} expects {_FUNCTIONS[name]} argument(s), got {len(args)}", pos
            )
        if name == "cond":
            test = args[0]
            if not isinstance(test, Cmp):
                raise ExprError("cond() requires a comparison as first argument", pos)
            return Cond(test, args[1], args[2])
        return Call(name, tuple(args))

    def _comparison(self) -> Node:
        left = self._sum()
        kind, val, pos = self.lex.peek()
        if kind == "op" and val in _CMP_OPS:
            self.lex.advance()
            return Cmp(val, left, self._sum())
        raise ExprError("expected a comparison operator", pos)

    def _expect(self, symbol):
        kind, val, pos = self.lex.peek()
        if kind == "op" and val == symbol:
            self.lex.advance()
            return
        raise ExprError(f"expected {symbol!r}", pos)


def parse_rate_expr(source: str, constants=None) -> RateExpr:
    """Parse ``source`` into a RateExpr.

    ``constants`` maps identifier names (e.g. model parameters) to numbers;
    they are folded into literals, so the resulting tree only references the
    coordinate variables x1..xd.
    """
    if not isinstance(source, str) or not source.strip():
        raise ExprError("empty expression", 0)
    return RateExpr(_Parser(source, constants).parse())
