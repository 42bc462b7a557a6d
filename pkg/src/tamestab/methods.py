"""Constant step size first-order methods with full trace capture.

* :func:`run_momentum` -- subgradient method with momentum
  ``y_k = x_k + gamma (x_k - x_{k-1})``,
  ``x_{k+1} = x_k + beta (x_k - x_{k-1}) - alpha g_k`` with ``g_k`` a
  subgradient at ``y_k``.
* :func:`run_reshuffled_momentum` -- the same update applied to one
  component at a time, visiting the components in a fresh random order
  every epoch; momentum carries over between inner steps and epochs.
* :func:`run_cyclic_cd` -- random-permutations cyclic coordinate descent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .expr import Expr, Smoothness, SumFunction, as_point, smoothness_class
from .subdiff import DEFAULT_RULE, SelectionRule, batch_value_and_grad, selector

__all__ = [
    "MomentumParams",
    "PermutationStream",
    "Trace",
    "DisplacementCheck",
    "DisplacementReport",
    "DivergenceError",
    "DisplacementBoundError",
    "NonsmoothObjectiveError",
    "run_momentum",
    "run_reshuffled_momentum",
    "run_cyclic_cd",
    "selection_norm_bound",
]

DIVERGENCE_RADIUS = 1e9


class DivergenceError(RuntimeError):
    def __init__(self, k: int, i: int, last_x: np.ndarray):
        super().__init__(f"iterates diverged at epoch {k}, inner step {i}; last finite point {last_x.tolist()}")
        self.k = k
        self.i = i
        self.last_x = last_x


class DisplacementBoundError(AssertionError):
    def __init__(self, k: int, i: int, displacement: float, bound: float):
        super().__init__(f"step ({k}, {i}) moved {displacement:.6g} > delta' * alpha = {bound:.6g}")
        self.k = k
        self.i = i
        self.displacement = displacement
        self.bound = bound


class NonsmoothObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class MomentumParams:
    """Step size, momentum and lookahead parameters plus the two initial points.

    ``x_prev_init`` defaults to ``x_init``.
    """

    alpha: float
    x_init: np.ndarray
    beta: float = 0.0
    gamma: float = 0.0
    delta: float = 1.0
    x_prev_init: np.ndarray | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("step size must be positive")
        if not -1 < self.beta < 1:
            raise ValueError("momentum beta must lie in (-1, 1)")
        if not math.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        x0 = as_point(self.x_init)
        xp = x0.copy() if self.x_prev_init is None else as_point(self.x_prev_init, x0.shape[0])
        object.__setattr__(self, "x_init", x0)
        object.__setattr__(self, "x_prev_init", xp)
        gap = float(np.linalg.norm(xp - x0))
        if gap > self.delta * self.alpha * (1 + 1e-12):
            raise ValueError(f"|x_prev - x_init| = {gap:.6g} exceeds delta * alpha = {self.delta * self.alpha:.6g}")

    def echo(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "delta": self.delta,
            "x_init": self.x_init.tolist(),
            "x_prev_init": self.x_prev_init.tolist(),
        }


@dataclass(frozen=True)
class PermutationStream:
    """Per-epoch uniform permutations from a counter-based generator.

    Epoch ``k`` draws a Fisher-Yates shuffle from Philox-4x64 keyed by
    ``seed`` with the counter's top word set to ``k``, so permutations are
    reproducible per ``(seed, k)`` independently of draw order.
    """

    seed: int

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def permutation(self, epoch: int, size: int) -> np.ndarray:
        """0-based permutation of ``range(size)`` for ``epoch``."""
        rng = np.random.Generator(np.random.Philox(key=int(self.seed), counter=int(epoch) << 192))
        return rng.permutation(size)


@dataclass(frozen=True)
class DisplacementCheck:
    """Assert ``|x_{k,i} - x_{k,i-1}| <= alpha r' / (1 - |beta|)`` at every inner step.

    ``r_prime`` bounds the selection norms over the ball of ``radius``; the
    assertion applies while every evaluation point stays in that ball.
    """

    radius: float
    r_prime: float


@dataclass
class DisplacementReport:
    delta_prime: float
    bound: float
    max_displacement: float = 0.0
    checked_steps: int = 0
    left_ball_at: tuple[int, int] | None = None
    stayed_in_half_ball: bool = True


@dataclass
class Trace:
    """Record of one run.

    Arrays (K epochs, M inner steps per epoch, dimension n):

    ``x`` (K+1, n) outer iterates; ``inner`` (K, M+1, n) with
    ``inner[k, 0] = x[k]`` and ``inner[k, M] = x[k+1]``; ``lookahead``
    (K, M, n) points where subgradients were taken; ``perms`` (K, M) 0-based
    component or coordinate order; ``selections`` (K, M, n) the step vectors
    divided by ``-alpha`` (before momentum); ``f`` (K+1,) and ``f_inner``
    (K, M+1) objective values.
    """

    method: str
    x: np.ndarray
    inner: np.ndarray
    lookahead: np.ndarray
    perms: np.ndarray
    selections: np.ndarray
    f: np.ndarray
    f_inner: np.ndarray
    params: dict = field(default_factory=dict)
    displacement: DisplacementReport | None = None

    @property
    def epochs(self) -> int:
        return self.x.shape[0] - 1

    @property
    def n(self) -> int:
        return self.x.shape[1]

    def prev_inner(self, k: int, i: int) -> np.ndarray:
        """``x_{k,i-1}`` with the convention ``x_{k,-1} = x_{k-1,M-1}``."""
        if i >= 1:
            return self.inner[k, i - 1]
        if k == 0:
            return np.asarray(self.params["x_prev_init"])
        return self.inner[k - 1, -2]


def _objective(f, n: int, rule: SelectionRule):
    """(value, selector) pair for an Expr, SumFunction or wrapper object."""
    if isinstance(f, SumFunction):
        f = f.as_expr()
    if isinstance(f, Expr):
        return f.value, selector(f, n, rule)
    return f.value, f.selector(rule)


def _diverged(x: np.ndarray) -> bool:
    return not np.all(np.isfinite(x)) or float(np.linalg.norm(x)) > DIVERGENCE_RADIUS


def run_momentum(f, p: MomentumParams, rule: SelectionRule = DEFAULT_RULE, epochs: int = 100) -> Trace:
    """Subgradient method with momentum on the single objective ``f``."""
    if epochs < 1:
        raise ValueError("need at least one epoch")
    n = p.x_init.shape[0]
    value, sel = _objective(f, n, rule)
    alpha, beta, gamma = p.alpha, p.beta, p.gamma
    K = epochs
    xs = np.empty((K + 1, n))
    ys = np.empty((K, 1, n))
    gs = np.empty((K, 1, n))
    fs = np.empty(K + 1)
    x_prev = p.x_prev_init.copy()
    x = p.x_init.copy()
    xs[0] = x
    fs[0] = value(x.tolist())
    for k in range(K):
        d = x - x_prev
        y = x + gamma * d
        g = np.array(sel(y.tolist())[1])
        x_new = x + beta * d - alpha * g
        if _diverged(x_new):
            raise DivergenceError(k, 1, x)
        ys[k, 0] = y
        gs[k, 0] = g
        xs[k + 1] = x_new
        fs[k + 1] = value(x_new.tolist())
        x_prev, x = x, x_new
    inner = np.stack([xs[:-1], xs[1:]], axis=1)
    f_inner = np.stack([fs[:-1], fs[1:]], axis=1)
    params = {"method": "momentum", **p.echo(), "rule": rule.__dict__.copy(), "epochs": K}
    return Trace("momentum", xs, inner, ys, np.zeros((K, 1), dtype=int), gs, fs, f_inner, params)


def selection_norm_bound(F: SumFunction | Expr, radius: float, n: int | None = None, samples: int = 201) -> float:
    """Empirical sup of component selection norms over the ball ``B(0, radius)``."""
    comps = F.components if isinstance(F, SumFunction) else (F,)
    n = n if n is not None else (F.n if isinstance(F, SumFunction) else F.max_index)
    rng = np.random.default_rng(0)
    if n == 2:
        t = np.linspace(-radius, radius, samples)
        X1, X2 = np.meshgrid(t, t)
        pts = np.column_stack([X1.ravel(), X2.ravel()])
        pts = pts[np.linalg.norm(pts, axis=1) <= radius]
        ang = np.linspace(0, 2 * np.pi, 4 * samples, endpoint=False)
        pts = np.vstack([pts, radius * np.column_stack([np.cos(ang), np.sin(ang)])])
    else:
        d = rng.normal(size=(20_000, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = radius * rng.uniform(size=(20_000, 1)) ** (1.0 / n)
        pts = np.vstack([d * r, d * radius])
    best = 0.0
    for c in comps:
        _, G = batch_value_and_grad(c, pts)
        best = max(best, float(np.max(np.linalg.norm(G, axis=1))))
    return best


def run_reshuffled_momentum(
    F: SumFunction,
    p: MomentumParams,
    rule: SelectionRule = DEFAULT_RULE,
    stream: PermutationStream | None = None,
    epochs: int = 100,
    displacement: DisplacementCheck | None = None,
) -> Trace:
    """Random reshuffling with momentum on ``F = (1/N) sum f_i``.

    Inner step ``i`` of epoch ``k`` uses component ``sigma^k_i``; the
    momentum difference ``x_{k,i-1} - x_{k,i-2}`` crosses epoch boundaries.
    """
    if epochs < 1:
        raise ValueError("need at least one epoch")
    stream = stream or PermutationStream(0)
    n = F.n
    if p.x_init.shape[0] != n:
        raise ValueError("initial point dimension does not match the objective")
    N = F.N
    sels = [selector(c, n, rule) for c in F.components]
    value = F.value
    alpha, beta, gamma = p.alpha, p.beta, p.gamma
    K = epochs
    xs = np.empty((K + 1, n))
    inner = np.empty((K, N + 1, n))
    ys = np.empty((K, N, n))
    gs = np.empty((K, N, n))
    perms = np.empty((K, N), dtype=int)
    fs = np.empty(K + 1)
    f_inner = np.empty((K, N + 1))

    report = None
    if displacement is not None:
        r_prime = max(displacement.r_prime, p.delta)
        delta_prime = r_prime / (1.0 - abs(beta))
        report = DisplacementReport(delta_prime=delta_prime, bound=delta_prime * alpha)
        limit = report.bound * (1 + 1e-12)
        checking = True

    x_prev = p.x_prev_init.copy()
    x = p.x_init.copy()
    xs[0] = x
    fs[0] = value(x.tolist())
    for k in range(K):
        sigma = stream.permutation(k, N)
        perms[k] = sigma
        inner[k, 0] = x
        f_inner[k, 0] = fs[k]
        for i in range(1, N + 1):
            d = x - x_prev
            y = x + gamma * d
            g = np.array(sels[sigma[i - 1]](y.tolist())[1])
            x_new = x + beta * d - alpha * g
            if _diverged(x_new):
                raise DivergenceError(k, i, x)
            if report is not None and checking:
                if max(np.linalg.norm(x), np.linalg.norm(y)) > displacement.radius:
                    checking = False
                    report.left_ball_at = (k, i)
                else:
                    step = float(np.linalg.norm(x_new - x))
                    report.max_displacement = max(report.max_displacement, step)
                    report.checked_steps += 1
                    if step > limit:
                        raise DisplacementBoundError(k, i, step, report.bound)
                    if np.linalg.norm(x_new) > displacement.radius / 2:
                        report.stayed_in_half_ball = False
            ys[k, i - 1] = y
            gs[k, i - 1] = g
            inner[k, i] = x_new
            f_inner[k, i] = value(x_new.tolist())
            x_prev, x = x, x_new
        xs[k + 1] = x
        fs[k + 1] = f_inner[k, N]
    params = {
        "method": "reshuffle",
        **p.echo(),
        "rule": rule.__dict__.copy(),
        "seed": int(stream.seed),
        "epochs": K,
        "N": N,
    }
    return Trace("reshuffle", xs, inner, ys, perms, gs, fs, f_inner, params, report)


def run_cyclic_cd(
    f: Expr,
    alpha: float,
    x0,
    stream: PermutationStream | None = None,
    epochs: int = 100,
    allow_nonsmooth: bool = False,
    rule: SelectionRule = DEFAULT_RULE,
) -> Trace:
    """Random-permutations cyclic coordinate descent with constant step ``alpha``.

    Requires a C1 objective unless ``allow_nonsmooth`` is set, in which case
    each coordinate step uses a selection of the one-dimensional slice.
    """
    if not alpha > 0:
        raise ValueError("step size must be positive")
    if epochs < 1:
        raise ValueError("need at least one epoch")
    if isinstance(f, SumFunction):
        f = f.as_expr()
    x = as_point(x0)
    n = x.shape[0]
    smooth = smoothness_class(f) is Smoothness.C1
    if not smooth and not allow_nonsmooth:
        raise NonsmoothObjectiveError(
            "coordinate descent needs a continuously differentiable objective; pass allow_nonsmooth for demos"
        )
    stream = stream or PermutationStream(0)
    value = f.value
    if smooth:
        full = selector(f, n, rule)
        partials: list[Callable] = [(lambda pt, j=j: full(pt)[1][j]) for j in range(n)]
    else:
        coord_sels = [selector(f, n, rule, coord=j) for j in range(n)]
        partials = [(lambda pt, s=s: s(pt)[1][0]) for s in coord_sels]

    K = epochs
    xs = np.empty((K + 1, n))
    inner = np.empty((K, n + 1, n))
    gs = np.zeros((K, n, n))
    perms = np.empty((K, n), dtype=int)
    fs = np.empty(K + 1)
    f_inner = np.empty((K, n + 1))
    xs[0] = x
    fs[0] = value(x.tolist())
    for k in range(K):
        sigma = stream.permutation(k, n)
        perms[k] = sigma
        inner[k, 0] = x
        f_inner[k, 0] = fs[k]
        for i in range(1, n + 1):
            j = int(sigma[i - 1])
            dj = partials[j](x.tolist())
            x_new = x.copy()
            x_new[j] = x[j] - alpha * dj
            if _diverged(x_new):
                raise DivergenceError(k, i, x)
            gs[k, i - 1, j] = dj
            inner[k, i] = x_new
            f_inner[k, i] = value(x_new.tolist())
            x = x_new
        xs[k + 1] = x
        fs[k + 1] = f_inner[k, n]
    params = {
        "method": "cyclic_cd",
        "alpha": alpha,
        "x_init": xs[0].tolist(),
        "seed": int(stream.seed),
        "epochs": K,
        "allow_nonsmooth": allow_nonsmooth,
        "rule": rule.__dict__.copy(),
    }
    return Trace("cyclic_cd", xs, inner, inner[:, :-1].copy(), perms, gs, fs, f_inner, params)
