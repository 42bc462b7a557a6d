"""Subgradient trajectories ``x'(t) in -c * subdiff f(x(t))`` and shadowing.

The integrator is explicit Euler on the min-norm element of the
subdifferential model ("slow solution"). A step that would increase ``f`` is
shortened by halving (backtracking) while time advances by the full substep,
so chatter in wells with non-Lipschitz gradients cannot stall the clock. It stops early once the min-norm distance drops to
``stop_tol``; the path is then constant for the remaining horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .expr import Expr, SumFunction, as_point
from .methods import Trace
from .subdiff import min_norm_point, model_of

__all__ = [
    "FlowParams",
    "TrajectoryPath",
    "Polyline",
    "ShadowResult",
    "FlowStallError",
    "InsufficientTraceError",
    "integrate",
    "descent_integral",
    "interpolate",
    "shadow",
    "multiplicative_constant",
]

MAX_HALVINGS = 40


class FlowStallError(RuntimeError):
    def __init__(self, t: float, x: np.ndarray):
        super().__init__(f"no descent after {MAX_HALVINGS} halvings at t={t:.6g}, x={x.tolist()}")
        self.t = t
        self.x = x


class InsufficientTraceError(ValueError):
    pass


@dataclass(frozen=True)
class FlowParams:
    """``c`` multiplies the subdifferential; ``h`` is the Euler substep (None: context default)."""

    c: float = 1.0
    T: float = 1.0
    h: float | None = None
    stop_tol: float = 1e-9
    kink_tol: float = 1e-9

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be positive")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if self.h is not None and not 0 < self.h <= self.T:
            raise ValueError("substep h must lie in (0, T]")
        if self.stop_tol < 0:
            raise ValueError("stop_tol must be nonnegative")

    @property
    def substep(self) -> float:
        return self.h if self.h is not None else 1e-4 * self.T


def multiplicative_constant(method: str, beta: float = 0.0, N: int = 1) -> float:
    """Time-scaling constant of the trajectory a method shadows (one outer step = ``alpha`` time)."""
    if method == "momentum":
        return 1.0 / (1.0 - beta)
    if method == "reshuffle":
        return N / (1.0 - beta)
    if method == "cyclic_cd":
        return 1.0
    raise ValueError(f"unknown method {method!r}")


def _interp(times: np.ndarray, points: np.ndarray, t: float) -> np.ndarray:
    if t <= times[0]:
        return points[0].copy()
    if t >= times[-1]:
        return points[-1].copy()
    j = int(np.searchsorted(times, t, side="right")) - 1
    t0, t1 = times[j], times[j + 1]
    w = (t - t0) / (t1 - t0)
    return points[j] + w * (points[j + 1] - points[j])


@dataclass
class Polyline:
    """Piecewise-linear curve through ``(times[j], points[j])``; constant beyond its ends."""

    times: np.ndarray
    points: np.ndarray

    def at(self, t: float) -> np.ndarray:
        return _interp(self.times, self.points, t)


@dataclass
class TrajectoryPath(Polyline):
    """Samples of an approximate subgradient trajectory.

    ``d`` holds the min-norm distance ``d(0, subdiff f(x(t_j)))`` and ``f``
    the objective value at each sample.
    """

    d: np.ndarray = None
    f: np.ndarray = None
    c: float = 1.0
    T: float = 0.0
    absorbed: bool = False
    halvings: int = 0


def _value_fn(f):
    if isinstance(f, (Expr, SumFunction)):
        return f.value
    return f.value


def integrate(f, x0, p: FlowParams) -> TrajectoryPath:
    """Euler integration of ``x' = -c * (min-norm element of the subdifferential model)``."""
    x = as_point(x0)
    value = _value_fn(f)
    c, T = p.c, p.T
    h = p.substep
    t = 0.0
    fx = value(x.tolist())
    g = min_norm_point(model_of(f, x, p.kink_tol))
    d = float(np.linalg.norm(g))
    ts, xs, ds, fs = [t], [x], [d], [fx]
    absorbed = False
    halvings = 0
    while T - t > 1e-12 * T:
        if d <= p.stop_tol:
            absorbed = True
            break
        step = T - t if T - t < h * (1 + 1e-9) else h
        # backtrack on the displacement; time still advances by the full substep
        lam = 1.0
        for j in range(MAX_HALVINGS + 1):
            x_new = x - (lam * step * c) * g
            f_new = value(x_new.tolist())
            if f_new <= fx:
                break
            lam *= 0.5
        else:
            raise FlowStallError(t, x)
        halvings += j
        t = T if T - (t + step) <= 1e-12 * T else t + step
        x, fx = x_new, f_new
        g = min_norm_point(model_of(f, x, p.kink_tol))
        d = float(np.linalg.norm(g))
        ts.append(t)
        xs.append(x)
        ds.append(d)
        fs.append(fx)
    if d <= p.stop_tol:
        absorbed = True
    return TrajectoryPath(
        np.array(ts), np.array(xs), np.array(ds), np.array(fs), c=c, T=T, absorbed=absorbed, halvings=halvings
    )


def descent_integral(path: TrajectoryPath) -> float:
    """Trapezoidal ``c * integral of d(0, subdiff f(x(s)))^2 ds`` over the samples."""
    if path.times.shape[0] < 2:
        return 0.0
    y = path.c * path.d**2
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(path.times)))


def _horizon_steps(T: float, alpha: float) -> int:
    return int(math.floor(T / alpha + 1e-9))


def interpolate(trace: Trace, alpha: float, kbar: int, T: float) -> Polyline:
    """Linear interpolation of outer iterates ``x_{kbar}, ..., x_{kbar + floor(T/alpha)}`` at times ``alpha (k - kbar)``."""
    if not alpha > 0:
        raise ValueError("step size must be positive")
    steps = _horizon_steps(T, alpha)
    last = kbar + steps
    if kbar < 0 or last > trace.epochs:
        raise InsufficientTraceError(f"trace has iterates 0..{trace.epochs}, need {kbar}..{last}")
    pts = trace.x[kbar : last + 1]
    return Polyline(alpha * np.arange(steps + 1, dtype=float), pts.copy())


@dataclass
class ShadowResult:
    epsilon: float
    deviations: np.ndarray
    times: np.ndarray
    path: TrajectoryPath


def shadow(trace: Trace, f, p: FlowParams, alpha: float, kbar: int = 0) -> ShadowResult:
    """Uniform distance between iterates and the trajectory started at ``x_{kbar}``.

    ``epsilon = max_k |x_k - x((k - kbar) alpha)|`` for ``k = kbar .. kbar + floor(T/alpha)``.
    The default substep is ``alpha / 50``.
    """
    poly = interpolate(trace, alpha, kbar, p.T)
    if p.h is None:
        p = FlowParams(c=p.c, T=p.T, h=min(alpha / 50.0, p.T), stop_tol=p.stop_tol, kink_tol=p.kink_tol)
    path = integrate(f, poly.points[0], p)
    flow_pts = np.array([path.at(t) for t in poly.times])
    dev = np.linalg.norm(poly.points - flow_pts, axis=1)
    return ShadowResult(float(np.max(dev)), dev, poly.times, path)
