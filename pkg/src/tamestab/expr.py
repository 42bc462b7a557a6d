"""Expression trees for locally Lipschitz piecewise-polynomial objectives.

The supported class is built from constants, variables ``x1 .. xn``, sums,
products, integer powers, ``abs``, rational powers ``abs(u)^(p/q)`` with
``p/q > 1`` and n-ary ``max``/``min``. Every expression in this class is
locally Lipschitz and semi-algebraic-with-rational-exponents, hence tame.

Grammar (whitespace is ignored)::

    expr   := ['-'] term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := atom ('^' exponent)?
    atom   := number | 'x' digits | '(' expr ')'
            | 'abs(' expr ')' | 'max(' expr (',' expr)+ ')' | 'min(' expr (',' expr)+ ')'
    exponent := integer | '(' integer '/' integer ')' | '(' decimal ')'

Division is only accepted by a numeric literal. A non-integer exponent is
only accepted on an ``abs(...)`` atom.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

__all__ = [
    "Expr",
    "Const",
    "Var",
    "Add",
    "Mul",
    "Pow",
    "Abs",
    "FracPow",
    "Max",
    "Min",
    "ParseError",
    "Smoothness",
    "SumFunction",
    "parse",
    "evaluate",
    "smoothness_class",
]


class ParseError(ValueError):
    """Raised on malformed expression text; ``offset`` is a byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class Smoothness(str, enum.Enum):
    C1 = "C1"
    LOCALLY_LIPSCHITZ = "locally_Lipschitz_only"


def _fmt_number(v: float) -> str:
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


# Expression nodes.
#
# Nodes are immutable. Each node carries its canonical text, which doubles as
# the structural key: two nodes are equal iff their canonical texts are equal
# and they have the same type. The printer and parser are inverse on trees,
# so the text is injective on structure.


@dataclass(frozen=True, eq=False)
class Expr:
    text: str = field(init=False, repr=False)

    def __eq__(self, other: object) -> bool:
        return type(self) is type(other) and self.text == other.text  # type: ignore[attr-defined]

    def __hash__(self) -> int:
        return hash((type(self).__name__, self.text))

    def __str__(self) -> str:
        return self.text

    def _set_text(self, text: str) -> None:
        object.__setattr__(self, "text", text)

    @property
    def children(self) -> tuple[Expr, ...]:
        return ()

    @property
    def max_index(self) -> int:
        """Largest variable index appearing in the tree (0 if none)."""
        return max((c.max_index for c in self.children), default=0)

    def value(self, x: Sequence[float]) -> float:
        raise NotImplementedError

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


@dataclass(frozen=True, eq=False)
class Const(Expr):
    value_: float

    def __post_init__(self):
        v = float(self.value_)
        if not math.isfinite(v):
            raise ValueError("constants must be finite")
        object.__setattr__(self, "value_", v)
        self._set_text(_fmt_number(v) if v >= 0 else f"-{_fmt_number(-v)}")

    def value(self, x):
        return self.value_


@dataclass(frozen=True, eq=False)
class Var(Expr):
    index: int  # 1-based

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("variable indices start at 1")
        self._set_text(f"x{self.index}")

    @property
    def max_index(self) -> int:
        return self.index

    def value(self, x):
        return x[self.index - 1]


def _is_negation(e: Expr) -> bool:
    # Mul(-1, ...) prints as a leading minus unless the rest is a lone literal.
    if not isinstance(e, Mul) or not isinstance(e.factors[0], Const):
        return False
    if e.factors[0].value_ != -1.0:
        return False
    rest = e.factors[1:]
    return not (len(rest) == 1 and isinstance(rest[0], Const))


def _negated_text(e: Expr) -> str:
    """Text of ``-e`` with the leading minus stripped (e must be negative-form)."""
    if isinstance(e, Const):
        return _fmt_number(-e.value_)
    assert isinstance(e, Mul)
    rest = e.factors[1:]
    if len(rest) == 1:
        return _factor_text(rest[0])
    return "*".join(_factor_text(f) for f in rest)


def _is_negative_form(e: Expr) -> bool:
    return (isinstance(e, Const) and e.value_ < 0) or _is_negation(e)


def _term_text(e: Expr) -> str:
    # text of an Add child without sign handling
    return f"({e.text})" if isinstance(e, Add) else e.text


def _factor_text(e: Expr) -> str:
    if isinstance(e, (Add, Mul)) or (isinstance(e, Const) and e.value_ < 0):
        return f"({e.text})"
    return e.text


def _atom_text(e: Expr) -> str:
    if isinstance(e, (Var, Abs, Max, Min)) or (isinstance(e, Const) and e.value_ >= 0):
        return e.text
    return f"({e.text})"


@dataclass(frozen=True, eq=False)
class Add(Expr):
    terms: tuple[Expr, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if len(self.terms) < 2:
            raise ValueError("Add needs at least two terms")
        parts = []
        for i, t in enumerate(self.terms):
            if _is_negative_form(t):
                parts.append(("-" if i == 0 else " - ") + _negated_text(t))
            else:
                parts.append(("" if i == 0 else " + ") + _term_text(t))
        self._set_text("".join(parts))

    @property
    def children(self):
        return self.terms

    def value(self, x):
        s = 0.0
        for t in self.terms:
            s += t.value(x)
        return s


@dataclass(frozen=True, eq=False)
class Mul(Expr):
    factors: tuple[Expr, ...]

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if len(self.factors) < 2:
            raise ValueError("Mul needs at least two factors")
        if _is_negation(self):
            self._set_text("-" + _negated_text(self))
        else:
            self._set_text("*".join(_factor_text(f) for f in self.factors))

    @property
    def children(self):
        return self.factors

    def value(self, x):
        p = 1.0
        for f in self.factors:
            p *= f.value(x)
        return p


@dataclass(frozen=True, eq=False)
class Pow(Expr):
    base: Expr
    exponent: int

    def __post_init__(self):
        if int(self.exponent) != self.exponent or self.exponent < 1:
            raise ValueError("integer power must be >= 1")
        object.__setattr__(self, "exponent", int(self.exponent))
        self._set_text(f"{_atom_text(self.base)}^{self.exponent}")

    @property
    def children(self):
        return (self.base,)

    def value(self, x):
        return self.base.value(x) ** self.exponent


@dataclass(frozen=True, eq=False)
class Abs(Expr):
    arg: Expr

    def __post_init__(self):
        self._set_text(f"abs({self.arg.text})")

    @property
    def children(self):
        return (self.arg,)

    def value(self, x):
        return abs(self.arg.value(x))


@dataclass(frozen=True, eq=False)
class FracPow(Expr):
    """``abs(u)^p`` for a non-integer rational ``p > 1``; continuously differentiable."""

    base: Abs
    exponent: Fraction

    def __post_init__(self):
        if not isinstance(self.base, Abs):
            raise ValueError("fractional power only applies to abs(...)")
        p = Fraction(self.exponent)
        if p < 1:
            raise ValueError("exponent must be >= 1")
        if p.denominator == 1:
            raise ValueError("integer exponents use Pow")
        object.__setattr__(self, "exponent", p)
        object.__setattr__(self, "_p", float(p))
        self._set_text(f"{self.base.text}^({p.numerator}/{p.denominator})")

    @property
    def children(self):
        return (self.base,)

    def value(self, x):
        return abs(self.base.arg.value(x)) ** self._p


def _sorted_args(args) -> tuple[Expr, ...]:
    args = tuple(args)
    if len(args) < 2:
        raise ValueError("max/min need at least two arguments")
    return tuple(sorted(args, key=lambda e: e.text))


@dataclass(frozen=True, eq=False)
class Max(Expr):
    args: tuple[Expr, ...]

    def __post_init__(self):
        object.__setattr__(self, "args", _sorted_args(self.args))
        self._set_text("max(" + ", ".join(a.text for a in self.args) + ")")

    @property
    def children(self):
        return self.args

    def value(self, x):
        return max(a.value(x) for a in self.args)


@dataclass(frozen=True, eq=False)
class Min(Expr):
    args: tuple[Expr, ...]

    def __post_init__(self):
        object.__setattr__(self, "args", _sorted_args(self.args))
        self._set_text("min(" + ", ".join(a.text for a in self.args) + ")")

    @property
    def children(self):
        return self.args

    def value(self, x):
        return min(a.value(x) for a in self.args)


# Parser.

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<var>x\d+)"
    r"|(?P<fn>abs|max|min)\s*\("
    r"|(?P<op>[-+*/^(),])"
    r")"
)


class _Parser:
    def __init__(self, text: str, n: int):
        self.text = text
        self.n = n
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            m = _TOKEN_RE.match(text, pos)
            if m is None or m.end() == pos:
                stripped = len(text[pos:]) - len(text[pos:].lstrip())
                raise ParseError(f"unexpected character {text[pos + stripped]!r}", self._byte(pos + stripped))
            kind = m.lastgroup
            start = m.start(kind)
            self.tokens.append((kind, m.group(kind), start))
            pos = m.end()
        self.tokens.append(("end", "", len(text)))
        self.i = 0

    def _byte(self, char_pos: int) -> int:
        return len(self.text[:char_pos].encode("utf-8"))

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message, tok=None) -> ParseError:
        tok = tok or self.peek()
        return ParseError(message, self._byte(tok[2]))

    def expect(self, value: str):
        tok = self.advance()
        if tok[0] != "op" or tok[1] != value:
            shown = tok[1] or "end of input"
            raise self.error(f"expected {value!r}, found {shown!r}", tok)
        return tok

    def at_op(self, *values: str) -> bool:
        kind, val, _ = self.peek()
        return kind == "op" and val in values

    def parse(self) -> Expr:
        e = self.expr()
        if self.peek()[0] != "end":
            raise self.error(f"unexpected token {self.peek()[1]!r}")
        return e

    def expr(self) -> Expr:
        terms = []
        negate = False
        if self.at_op("-"):
            self.advance()
            negate = True
        terms.append(self._signed(*self.term(), negate))
        while self.at_op("+", "-"):
            negate = self.advance()[1] == "-"
            terms.append(self._signed(*self.term(), negate))
        return terms[0] if len(terms) == 1 else Add(tuple(terms))

    @staticmethod
    def _signed(t: Expr, is_product: bool, negate: bool) -> Expr:
        if not negate:
            return t
        if is_product:
            return Mul((Const(-1.0),) + t.factors)
        if isinstance(t, Const) and not t.text.startswith("-"):
            return Const(-t.value_)
        return Mul((Const(-1.0), t))

    def term(self) -> tuple[Expr, bool]:
        factors = [self.factor()]
        while self.at_op("*", "/"):
            op = self.advance()
            f = self.factor()
            if op[1] == "/":
                if not isinstance(f, Const):
                    raise self.error("division is only allowed by a numeric literal", op)
                if f.value_ == 0:
                    raise self.error("division by zero", op)
                f = Const(1.0 / f.value_)
            factors.append(f)
        if len(factors) == 1:
            return factors[0], False
        return Mul(tuple(factors)), True

    def factor(self) -> Expr:
        atom = self.atom()
        if not self.at_op("^"):
            return atom
        caret = self.advance()
        p = self.exponent()
        if p.denominator != 1 and not isinstance(atom, Abs):
            raise self.error("fractional power is only allowed on abs(...)", caret)
        if p < 1:
            raise self.error("exponent must be >= 1", caret)
        if p.denominator == 1:
            return Pow(atom, int(p))
        return FracPow(atom, p)

    def exponent(self) -> Fraction:
        tok = self.advance()
        if tok[0] == "num":
            return self._fraction(tok)
        if tok[0] == "op" and tok[1] == "(":
            sign = 1
            if self.at_op("-"):
                self.advance()
                sign = -1
            num = self.advance()
            if num[0] != "num":
                raise self.error("expected a rational exponent", num)
            p = self._fraction(num)
            if self.at_op("/"):
                self.advance()
                den = self.advance()
                if den[0] != "num":
                    raise self.error("expected a rational exponent", den)
                d = self._fraction(den)
                if d == 0:
                    raise self.error("zero denominator in exponent", den)
                p = p / d
            self.expect(")")
            return sign * p
        if tok[0] == "op" and tok[1] == "-":
            raise self.error("exponent must be >= 1", tok)
        raise self.error("expected a rational exponent", tok)

    def _fraction(self, tok) -> Fraction:
        try:
            return Fraction(tok[1])
        except ValueError:
            raise self.error(f"bad number {tok[1]!r}", tok) from None

    def atom(self) -> Expr:
        tok = self.advance()
        kind, val, _ = tok
        if kind == "num":
            return Const(float(val))
        if kind == "var":
            idx = int(val[1:])
            if idx < 1 or idx > self.n:
                raise self.error(f"variable {val} out of range for dimension {self.n}", tok)
            return Var(idx)
        if kind == "fn":
            args = [self.expr()]
            while self.at_op(","):
                self.advance()
                args.append(self.expr())
            self.expect(")")
            if val == "abs":
                if len(args) != 1:
                    raise self.error("abs takes one argument", tok)
                return Abs(args[0])
            if len(args) < 2:
                raise self.error(f"{val} needs at least two arguments", tok)
            return Max(tuple(args)) if val == "max" else Min(tuple(args))
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect(")")
            return e
        shown = val or "end of input"
        raise self.error(f"unexpected {shown!r}", tok)


def parse(text: str, n: int) -> Expr:
    """Parse ``text`` into an expression over ``x1 .. xn``.

    >>> str(parse("abs(x1^2 - 1) + 2*abs(x1*x2 + 1)", 2))
    'abs(x1^2 - 1) + 2*abs(x1*x2 + 1)'
    """
    if n < 1:
        raise ValueError("dimension must be >= 1")
    return _Parser(text, n).parse()


def evaluate(f: Expr, x) -> float:
    x = [float(v) for v in x]
    if len(x) < f.max_index:
        raise ValueError(f"point has dimension {len(x)}, expression needs {f.max_index}")
    if not all(math.isfinite(v) for v in x):
        raise ValueError("point has non-finite entries")
    return f.value(x)


def _c1(e: Expr) -> bool:
    if isinstance(e, (Const, Var)):
        return True
    if isinstance(e, FracPow):
        return _c1(e.base.arg)
    if isinstance(e, Pow) and isinstance(e.base, Abs) and e.exponent >= 2:
        # |u|^k = u^k for even k and d/du |u|^k is continuous for k >= 2
        return _c1(e.base.arg)
    if isinstance(e, (Abs, Max, Min)):
        return False
    return all(_c1(c) for c in e.children)


def smoothness_class(f: Expr) -> Smoothness:
    """Conservative smoothness classification: C1 unless a bare kink node exists."""
    return Smoothness.C1 if _c1(f) else Smoothness.LOCALLY_LIPSCHITZ


class SumFunction:
    """Finite-sum objective ``f = (1/N) * sum_i f_i`` (or the plain sum).

    Components are kept separately so reshuffling methods can step on one
    component at a time.
    """

    def __init__(self, components: Sequence[Expr | str], n: int, average: bool = True):
        comps = tuple(parse(c, n) if isinstance(c, str) else c for c in components)
        if not comps:
            raise ValueError("need at least one component")
        for c in comps:
            if c.max_index > n:
                raise ValueError(f"component {c} uses a variable beyond dimension {n}")
        self.components = comps
        self.n = n
        self.average = average

    @property
    def N(self) -> int:
        return len(self.components)

    @property
    def weight(self) -> float:
        return 1.0 / self.N if self.average else 1.0

    def value(self, x) -> float:
        s = 0.0
        for c in self.components:
            s += c.value(x)
        return s * self.weight

    def as_expr(self) -> Expr:
        """The whole objective as a single expression tree."""
        if self.N == 1:
            return self.components[0]
        total = Add(self.components)
        return Mul((total, Const(self.weight))) if self.average else total

    def __repr__(self) -> str:
        comps = ", ".join(repr(c.text) for c in self.components)
        return f"SumFunction([{comps}], n={self.n}, average={self.average})"


def as_point(x, n: int | None = None) -> np.ndarray:
    """Validate and convert a point to a float vector."""
    arr = np.asarray(x, dtype=float).reshape(-1)
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"expected a point of dimension {n}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point has non-finite entries")
    return arr
