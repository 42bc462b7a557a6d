"""Clarke subgradient selections and explicit subdifferential models.

Selections follow the chain/sum/max rules node by node and return a single
vector per point; they are compiled once per (expression, rule) into nested
closures because the methods call them millions of times.

Models return an explicit outer estimate of the Clarke subdifferential,
either box-affine ``{g0 + sum t_i g_i : t_i in [l_i, u_i]}`` or a convex hull
of vertices, and support min-norm queries.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .expr import Abs, Add, Const, Expr, FracPow, Max, Min, Mul, Pow, Smoothness, SumFunction, Var, smoothness_class
from .minnorm import box_min_norm_point, wolfe_min_norm_point

__all__ = [
    "SelectionRule",
    "SubgradientModel",
    "UnsupportedStructureError",
    "clarke_select",
    "partial_select",
    "selector",
    "clarke_model",
    "component_sum_model",
    "model_of",
    "min_norm_distance",
    "min_norm_point",
    "batch_value_and_grad",
]


class UnsupportedStructureError(ValueError):
    """Kinks nested too deeply for the explicit set calculus."""


@dataclass(frozen=True)
class SelectionRule:
    """How a selection resolves points where a kink is active.

    ``abs_at_zero`` picks the coefficient of ``abs`` at zero: 0, -1 or +1.
    ``tie_at_max_min`` picks among tied max/min branches: the first branch in
    canonical child order, the mean of the tied branch gradients, or the
    min-norm point of their convex hull.
    """

    abs_at_zero: Literal["zero", "left", "right"] = "zero"
    tie_at_max_min: Literal["first_child", "mean_of_argmax", "min_norm"] = "first_child"

    def __post_init__(self):
        if self.abs_at_zero not in ("zero", "left", "right"):
            raise ValueError(f"unknown abs_at_zero rule {self.abs_at_zero!r}")
        if self.tie_at_max_min not in ("first_child", "mean_of_argmax", "min_norm"):
            raise ValueError(f"unknown tie rule {self.tie_at_max_min!r}")

    @classmethod
    def zero_biased(cls) -> SelectionRule:
        """Prefer the zero vector whenever the local subdifferential contains it."""
        return cls("zero", "min_norm")


DEFAULT_RULE = SelectionRule()

# Compiled selections.
#
# A compiled node maps a point (sequence of floats) to ``(value, grad)`` where
# ``grad`` is a list of length m: the full gradient (m = n) or a single
# directional derivative along a coordinate (m = 1). Lists are never mutated
# after being returned.

_Fn = Callable[[object], tuple[float, list]]


def _vadd(a, b):
    return [p + q for p, q in zip(a, b)]


def _vscale(c, a):
    return [c * p for p in a]


def _tie(grads: list[list[float]], rule: SelectionRule) -> list[float]:
    if rule.tie_at_max_min == "first_child":
        return grads[0]
    if rule.tie_at_max_min == "mean_of_argmax":
        k = len(grads)
        return [sum(col) / k for col in zip(*grads)]
    if len(grads[0]) == 1:
        lo = min(g[0] for g in grads)
        hi = max(g[0] for g in grads)
        return [0.0 if lo <= 0.0 <= hi else (lo if lo > 0 else hi)]
    return list(wolfe_min_norm_point(np.array(grads)))


def _compile(e: Expr, n: int, coord: int | None, rule: SelectionRule, tol: float) -> _Fn:
    m = n if coord is None else 1
    zeros = [0.0] * m

    if isinstance(e, Const):
        c = e.value_

        def f_const(x):
            return c, zeros

        return f_const

    if isinstance(e, Var):
        i = e.index - 1
        if coord is None:
            unit = [0.0] * n
            unit[i] = 1.0
        else:
            unit = [1.0 if i == coord else 0.0]

        def f_var(x):
            return x[i], unit

        return f_var

    if isinstance(e, Add):
        fs = [_compile(t, n, coord, rule, tol) for t in e.terms]

        def f_add(x):
            v, g = fs[0](x)
            for f in fs[1:]:
                vi, gi = f(x)
                v += vi
                g = _vadd(g, gi)
            return v, g

        return f_add

    if isinstance(e, Mul):
        fs = [_compile(t, n, coord, rule, tol) for t in e.factors]
        if len(fs) == 2:
            fa, fb = fs

            def f_mul2(x):
                a, ga = fa(x)
                b, gb = fb(x)
                return a * b, [b * p + a * q for p, q in zip(ga, gb)]

            return f_mul2

        def f_mul(x):
            vals, grads = zip(*(f(x) for f in fs))
            v = math.prod(vals)
            g = zeros
            for i, gi in enumerate(grads):
                coef = math.prod(vals[:i]) * math.prod(vals[i + 1 :])
                g = _vadd(g, _vscale(coef, gi))
            return v, g

        return f_mul

    if isinstance(e, Pow):
        fb = _compile(e.base, n, coord, rule, tol)
        k = e.exponent

        def f_pow(x):
            b, gb = fb(x)
            c = k * b ** (k - 1)
            return b**k, [c * p for p in gb]

        return f_pow

    if isinstance(e, FracPow):
        fu = _compile(e.base.arg, n, coord, rule, tol)
        p = float(e.exponent)

        def f_fracpow(x):
            u, gu = fu(x)
            a = abs(u)
            if a == 0.0:
                return 0.0, zeros
            c = p * a ** (p - 1.0) * (1.0 if u > 0 else -1.0)
            return a**p, [c * q for q in gu]

        return f_fracpow

    if isinstance(e, Abs):
        fu = _compile(e.arg, n, coord, rule, tol)
        at_zero = {"zero": 0.0, "left": -1.0, "right": 1.0}[rule.abs_at_zero]

        def f_abs(x):
            u, gu = fu(x)
            if u > tol:
                return u, gu
            if u < -tol:
                return -u, [-q for q in gu]
            return abs(u), [at_zero * q for q in gu]

        return f_abs

    if isinstance(e, (Max, Min)):
        fs = [_compile(a, n, coord, rule, tol) for a in e.args]
        is_max = isinstance(e, Max)

        def f_maxmin(x):
            results = [f(x) for f in fs]
            vals = [r[0] for r in results]
            best = max(vals) if is_max else min(vals)
            if is_max:
                active = [r[1] for r in results if r[0] >= best - tol]
            else:
                active = [r[1] for r in results if r[0] <= best + tol]
            if len(active) == 1:
                return best, active[0]
            return best, _tie(active, rule)

        return f_maxmin

    raise TypeError(f"unsupported node {type(e).__name__}")


@functools.lru_cache(maxsize=256)
def _compiled(e: Expr, n: int, coord: int | None, rule: SelectionRule, tol: float) -> _Fn:
    return _compile(e, n, coord, rule, tol)


def selector(f: Expr, n: int, rule: SelectionRule = DEFAULT_RULE, coord: int | None = None) -> _Fn:
    """Compiled ``x -> (f(x), selection)`` with the selection as a list.

    With ``coord`` (0-based) the selection is the one-dimensional derivative
    along that coordinate.
    """
    if f.max_index > n:
        raise ValueError(f"expression uses x{f.max_index} but dimension is {n}")
    return _compiled(f, n, coord, rule, 0.0)


def clarke_select(f: Expr, x, rule: SelectionRule = DEFAULT_RULE) -> np.ndarray:
    """One element of the Clarke subdifferential of ``f`` at ``x``."""
    x = [float(v) for v in np.asarray(x, dtype=float).reshape(-1)]
    return np.array(selector(f, len(x), rule)(x)[1])


def partial_select(f: Expr, x, i: int, rule: SelectionRule = DEFAULT_RULE) -> float:
    """Coordinate derivative ``[grad f(x)]_i`` (``i`` is 1-based).

    For a nonsmooth ``f`` this is a selection of the Clarke subdifferential of
    the slice ``t -> f(x + t e_i)`` at ``t = 0``.
    """
    x = [float(v) for v in np.asarray(x, dtype=float).reshape(-1)]
    if not 1 <= i <= len(x):
        raise ValueError(f"coordinate {i} out of range 1..{len(x)}")
    if smoothness_class(f) is Smoothness.C1:
        return selector(f, len(x), rule)(x)[1][i - 1]
    return selector(f, len(x), rule, coord=i - 1)(x)[1][0]


# Set-valued models.


class _Set:
    """conv(V) + {G^T t : lo <= t <= hi}; ``depth`` counts nested active kinks."""

    __slots__ = ("V", "G", "lo", "hi", "depth")
    MAX_VERTICES = 4096

    def __init__(self, V, G=None, lo=None, hi=None, depth=0):
        self.V = np.atleast_2d(np.asarray(V, dtype=float))
        n = self.V.shape[1]
        self.G = np.zeros((0, n)) if G is None else np.asarray(G, dtype=float).reshape(-1, n)
        self.lo = np.zeros(0) if lo is None else np.asarray(lo, dtype=float)
        self.hi = np.zeros(0) if hi is None else np.asarray(hi, dtype=float)
        self.depth = depth

    @classmethod
    def point(cls, g):
        return cls(np.asarray(g, dtype=float)[None, :])

    def scale(self, c: float) -> _Set:
        return _Set(self.V * c, self.G * c, self.lo, self.hi, self.depth)

    def plus(self, other: _Set) -> _Set:
        if self.V.shape[0] == 1:
            V = other.V + self.V[0]
        elif other.V.shape[0] == 1:
            V = self.V + other.V[0]
        else:
            V = _dedupe((self.V[:, None, :] + other.V[None, :, :]).reshape(-1, self.V.shape[1]))
        return _Set(
            V,
            np.vstack([self.G, other.G]),
            np.r_[self.lo, other.lo],
            np.r_[self.hi, other.hi],
            max(self.depth, other.depth),
        )

    def all_vertices(self) -> np.ndarray:
        if self.G.shape[0] == 0:
            return self.V
        if self.G.shape[0] > 12:
            raise UnsupportedStructureError("too many simultaneously active kinks")
        corners = np.array(list(itertools.product(*zip(self.lo, self.hi))))
        Z = corners @ self.G
        return _dedupe((self.V[:, None, :] + Z[None, :, :]).reshape(-1, self.V.shape[1]))

    def max_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.all_vertices(), axis=1)))


def _dedupe(V: np.ndarray) -> np.ndarray:
    V = np.unique(np.round(V, 14), axis=0)
    if V.shape[0] > _Set.MAX_VERTICES:
        raise UnsupportedStructureError("subdifferential model has too many vertices")
    return V


@dataclass(frozen=True)
class SubgradientModel:
    """Explicit outer estimate of a Clarke subdifferential.

    ``kind == "box_affine"``: ``{base + generators.T @ t : lower <= t <= upper}``.
    ``kind == "hull"``: convex hull of ``vertices``.
    """

    kind: Literal["box_affine", "hull"]
    n: int
    base: np.ndarray = field(repr=False)
    generators: np.ndarray = field(repr=False)
    lower: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)
    vertices: np.ndarray = field(repr=False)
    kink_tol: float = 0.0

    @classmethod
    def box(cls, base, generators=(), lower=(), upper=(), kink_tol: float = 0.0) -> SubgradientModel:
        base = np.asarray(base, dtype=float).reshape(-1)
        n = base.shape[0]
        G = np.asarray(generators, dtype=float).reshape(-1, n)
        return cls(
            "box_affine", n, base, G, np.asarray(lower, dtype=float).reshape(-1),
            np.asarray(upper, dtype=float).reshape(-1), np.zeros((0, n)), kink_tol,
        )

    @classmethod
    def hull(cls, vertices, kink_tol: float = 0.0) -> SubgradientModel:
        V = np.atleast_2d(np.asarray(vertices, dtype=float))
        n = V.shape[1]
        return cls("hull", n, np.zeros(n), np.zeros((0, n)), np.zeros(0), np.zeros(0), V, kink_tol)

    @classmethod
    def _from_set(cls, S: _Set, kink_tol: float) -> SubgradientModel:
        if S.V.shape[0] == 1:
            return cls.box(S.V[0], S.G, S.lo, S.hi, kink_tol)
        return cls.hull(S.all_vertices(), kink_tol)

    @property
    def is_singleton(self) -> bool:
        if self.kind == "hull":
            return self.vertices.shape[0] == 1
        return self.generators.shape[0] == 0

    def extreme_points(self) -> np.ndarray:
        """Finite set whose convex hull is the model."""
        if self.kind == "hull":
            return self.vertices
        if self.generators.shape[0] == 0:
            return self.base[None, :]
        corners = np.array(list(itertools.product(*zip(self.lower, self.upper))))
        return self.base + corners @ self.generators

    def translated(self, shift) -> SubgradientModel:
        shift = np.asarray(shift, dtype=float)
        if self.kind == "hull":
            return SubgradientModel.hull(self.vertices + shift, self.kink_tol)
        return SubgradientModel.box(self.base + shift, self.generators, self.lower, self.upper, self.kink_tol)

    def contains(self, g, tol: float = 1e-8) -> bool:
        return min_norm_distance(self.translated(-np.asarray(g, dtype=float))) <= tol

    def _as_set(self) -> _Set:
        if self.kind == "hull":
            return _Set(self.vertices)
        return _Set(self.base[None, :], self.generators, self.lower, self.upper)

    def __add__(self, other: SubgradientModel) -> SubgradientModel:
        return SubgradientModel._from_set(self._as_set().plus(other._as_set()), max(self.kink_tol, other.kink_tol))

    def __mul__(self, c: float) -> SubgradientModel:
        return SubgradientModel._from_set(self._as_set().scale(float(c)), self.kink_tol)

    __rmul__ = __mul__


def min_norm_point(model: SubgradientModel) -> np.ndarray:
    """The element of smallest Euclidean norm in the model."""
    if model.kind == "hull":
        return wolfe_min_norm_point(model.vertices)
    return box_min_norm_point(model.base, model.generators, model.lower, model.upper)[0]


def min_norm_distance(model: SubgradientModel) -> float:
    """``d(0, model)`` to absolute accuracy 1e-9."""
    return float(np.linalg.norm(min_norm_point(model)))


def _model(e: Expr, x: list[float], n: int, tol: float, radius: float) -> tuple[float, _Set]:
    if isinstance(e, Const):
        return e.value_, _Set.point(np.zeros(n))
    if isinstance(e, Var):
        g = np.zeros(n)
        g[e.index - 1] = 1.0
        return x[e.index - 1], _Set.point(g)
    if isinstance(e, Add):
        v, S = _model(e.terms[0], x, n, tol, radius)
        for t in e.terms[1:]:
            vt, St = _model(t, x, n, tol, radius)
            v += vt
            S = S.plus(St)
        return v, S
    if isinstance(e, Mul):
        parts = [_model(t, x, n, tol, radius) for t in e.factors]
        vals = [p[0] for p in parts]
        S = None
        for i, (_, Si) in enumerate(parts):
            coef = math.prod(vals[:i]) * math.prod(vals[i + 1 :])
            term = Si.scale(coef)
            S = term if S is None else S.plus(term)
        return math.prod(vals), S
    if isinstance(e, Pow):
        b, Sb = _model(e.base, x, n, tol, radius)
        return b**e.exponent, Sb.scale(e.exponent * b ** (e.exponent - 1))
    if isinstance(e, FracPow):
        u, Su = _model(e.base.arg, x, n, tol, radius)
        a = abs(u)
        p = float(e.exponent)
        if a == 0.0:
            return 0.0, _Set.point(np.zeros(n))
        return a**p, Su.scale(p * a ** (p - 1.0) * math.copysign(1.0, u))
    if isinstance(e, Abs):
        u, Su = _model(e.arg, x, n, tol, radius)
        reach = tol + (radius * Su.max_norm() if radius > 0 else 0.0)
        if u > reach:
            return u, Su
        if u < -reach:
            return -u, Su.scale(-1.0)
        depth = Su.depth + 1
        if depth > 2:
            raise UnsupportedStructureError("kinks nested deeper than 2 are active at this point")
        if Su.V.shape[0] == 1 and Su.G.shape[0] == 0:
            g = Su.V[0]
            return abs(u), _Set(np.zeros((1, n)), g[None, :], [-1.0], [1.0], depth)
        V = Su.all_vertices()
        return abs(u), _Set(_dedupe(np.vstack([V, -V])), depth=depth)
    if isinstance(e, (Max, Min)):
        parts = [_model(a, x, n, tol, radius) for a in e.args]
        sign = 1.0 if isinstance(e, Max) else -1.0
        vals = [sign * p[0] for p in parts]
        best = max(vals)
        if radius > 0:
            ibest = vals.index(best)
            nb = parts[ibest][1].max_norm()
            active = [p for v, p in zip(vals, parts) if v >= best - tol - radius * (nb + p[1].max_norm())]
        else:
            active = [p for v, p in zip(vals, parts) if v >= best - tol]
        if len(active) == 1:
            return sign * best, active[0][1]
        depth = 1 + max(p[1].depth for p in active)
        if depth > 2:
            raise UnsupportedStructureError("kinks nested deeper than 2 are active at this point")
        V = _dedupe(np.vstack([p[1].all_vertices() for p in active]))
        return sign * best, _Set(V, depth=depth)
    raise TypeError(f"unsupported node {type(e).__name__}")


def clarke_model(f: Expr, x, kink_tol: float = 1e-9, radius: float = 0.0) -> SubgradientModel:
    """Explicit outer model of the Clarke subdifferential of ``f`` at ``x``.

    A kink counts as active when its inner expression is within ``kink_tol``
    of zero, or within ``radius`` times its slope (the kink passes within
    ``radius`` of ``x`` to first order). A positive ``radius`` therefore
    yields a Goldstein-style enlargement used by grid scans and the flow.
    """
    if kink_tol < 0 or radius < 0:
        raise ValueError("kink_tol and radius must be nonnegative")
    x = [float(v) for v in np.asarray(x, dtype=float).reshape(-1)]
    _, S = _model(f, x, len(x), kink_tol, radius)
    return SubgradientModel._from_set(S, kink_tol)


def component_sum_model(F: SumFunction, x, kink_tol: float = 1e-9, radius: float = 0.0) -> SubgradientModel:
    """``weight * (model(f_1) + ... + model(f_N))``, the conservative-field model."""
    x = [float(v) for v in np.asarray(x, dtype=float).reshape(-1)]
    S = None
    for c in F.components:
        _, Sc = _model(c, x, F.n, kink_tol, radius)
        S = Sc if S is None else S.plus(Sc)
    return SubgradientModel._from_set(S.scale(F.weight), kink_tol)


def model_of(f, x, kink_tol: float = 1e-9, radius: float = 0.0) -> SubgradientModel:
    """Dispatch: expressions use the whole-expression model, sums the component-sum model."""
    if isinstance(f, SumFunction):
        return component_sum_model(f, x, kink_tol, radius)
    if isinstance(f, Expr):
        return clarke_model(f, x, kink_tol, radius)
    return f.model(x, kink_tol, radius)


# Batched value and gradient on many points at once (grid scans, heatmaps).
# Ties resolve to the first active branch and abs(0) to coefficient 0.


def batch_value_and_grad(f: Expr, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values ``(B,)`` and selections ``(B, n)`` at the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    return _batch(f, X)


def _batch(e: Expr, X: np.ndarray):
    B, n = X.shape
    if isinstance(e, Const):
        return np.full(B, e.value_), np.zeros((B, n))
    if isinstance(e, Var):
        G = np.zeros((B, n))
        G[:, e.index - 1] = 1.0
        return X[:, e.index - 1].copy(), G
    if isinstance(e, Add):
        v, G = _batch(e.terms[0], X)
        for t in e.terms[1:]:
            vt, Gt = _batch(t, X)
            v = v + vt
            G = G + Gt
        return v, G
    if isinstance(e, Mul):
        parts = [_batch(t, X) for t in e.factors]
        vals = np.stack([p[0] for p in parts])
        v = np.prod(vals, axis=0)
        G = np.zeros((B, n))
        for i, (_, Gi) in enumerate(parts):
            coef = np.prod(np.delete(vals, i, axis=0), axis=0)
            G = G + coef[:, None] * Gi
        return v, G
    if isinstance(e, Pow):
        b, Gb = _batch(e.base, X)
        k = e.exponent
        return b**k, (k * b ** (k - 1))[:, None] * Gb
    if isinstance(e, FracPow):
        u, Gu = _batch(e.base.arg, X)
        a = np.abs(u)
        p = float(e.exponent)
        c = np.where(a > 0, p * a ** (p - 1.0) * np.sign(u), 0.0)
        return a**p, c[:, None] * Gu
    if isinstance(e, Abs):
        u, Gu = _batch(e.arg, X)
        return np.abs(u), np.sign(u)[:, None] * Gu
    if isinstance(e, (Max, Min)):
        parts = [_batch(a, X) for a in e.args]
        vals = np.stack([p[0] for p in parts])
        idx = np.argmax(vals, axis=0) if isinstance(e, Max) else np.argmin(vals, axis=0)
        Gs = np.stack([p[1] for p in parts])
        rows = np.arange(B)
        return vals[idx, rows], Gs[idx, rows]
    raise TypeError(f"unsupported node {type(e).__name__}")
