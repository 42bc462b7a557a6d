"""Critical-set estimation on a 2-D grid, stability verdicts, coercive wrapping.

A cell is flagged critical when the min-norm point of its cell model lies
within ``crit_tol`` of the origin. The cell model is the convex hull of the
gradients at the cell center and corners together with the explicit
subdifferential model at the center, where kinks that pass through the cell
count as active. Critical points rarely sit exactly on cell centers (sharp
minima never do), so the cell model asks whether the cell contains a
critical point rather than whether its center is one.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .expr import Abs, Expr, FracPow, Max, Min, Pow, SumFunction, as_point
from .methods import Trace
from .minnorm import wolfe_min_norm_point
from .subdiff import (
    DEFAULT_RULE,
    SelectionRule,
    SubgradientModel,
    batch_value_and_grad,
    model_of,
    selector,
)

__all__ = [
    "Grid",
    "Component",
    "CriticalSetEstimate",
    "StabilityVerdict",
    "CoerciveWrap",
    "scan_critical",
    "verify_value_stability",
    "verify_iterate_stability",
    "coercive_wrap",
]

KINK_REACH = 1.5  # first-order reach of a kink, in half-diagonals, with slack for curvature


@dataclass(frozen=True)
class Grid:
    box: tuple[tuple[float, float], tuple[float, float]] = ((-2.0, 2.0), (-2.0, 2.0))
    resolution: int = 400
    crit_tol: float = 1e-3

    def __post_init__(self):
        box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        object.__setattr__(self, "box", box)
        for lo, hi in box:
            if not lo < hi:
                raise ValueError("grid box needs lo < hi on every axis")
        if self.resolution < 2:
            raise ValueError("resolution must be at least 2")
        if not self.crit_tol >= 0:
            raise ValueError("crit_tol must be nonnegative")

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return tuple(np.linspace(lo, hi, self.resolution + 1) for lo, hi in self.box)

    @property
    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        return tuple(0.5 * (e[1:] + e[:-1]) for e in self.edges)

    @property
    def cell_size(self) -> np.ndarray:
        return np.array([(hi - lo) / self.resolution for lo, hi in self.box])

    @property
    def half_diagonal(self) -> float:
        return 0.5 * float(np.linalg.norm(self.cell_size))

    def cell_of(self, x) -> tuple[int, int]:
        x = np.asarray(x, dtype=float)
        idx = []
        for (lo, hi), v in zip(self.box, x):
            j = int(math.floor((v - lo) / (hi - lo) * self.resolution))
            idx.append(min(max(j, 0), self.resolution - 1))
        return tuple(idx)


@dataclass
class Component:
    id: int
    cells: np.ndarray  # (k, 2) integer cell indices
    centers: np.ndarray  # (k, 2)
    f_range: tuple[float, float]
    point: np.ndarray  # refined representative critical point
    value: float  # critical value estimate


@dataclass
class CriticalSetEstimate:
    grid: Grid
    flagged: np.ndarray  # (res, res) bool, indexed [i1, i2]
    distance: np.ndarray  # (res, res) cell-model min-norm distance
    labels: np.ndarray  # (res, res) int, 0 = not flagged
    components: list[Component]
    critical_values: list[float]

    def component_at(self, x) -> int | None:
        """Id of the component whose flagged cell contains ``x`` (None if unflagged)."""
        i, j = self.grid.cell_of(x)
        lab = int(self.labels[i, j])
        return lab if lab > 0 else None

    def is_flagged(self, x) -> bool:
        return bool(self.flagged[self.grid.cell_of(x)])

    def component_points(self) -> list[np.ndarray]:
        return [c.centers for c in self.components]


def _objective_expr(f) -> Expr:
    return f.as_expr() if isinstance(f, SumFunction) else f


def _dimension(f) -> int:
    return f.n if isinstance(f, SumFunction) else max(f.max_index, 1)


def _kink_nodes(e: Expr, smoothed: bool = False):
    """Abs/Max/Min nodes whose kinks are not smoothed by an enclosing power > 1."""
    if isinstance(e, FracPow):
        yield from _kink_nodes(e.base.arg)
        return
    if isinstance(e, Pow) and isinstance(e.base, Abs) and e.exponent >= 2:
        yield from _kink_nodes(e.base.arg)
        return
    if isinstance(e, (Abs, Max, Min)):
        yield e
    for c in e.children:
        yield from _kink_nodes(c)


def _near_kink(f: Expr, centers: np.ndarray, corners: list[np.ndarray], reach: float, tol: float) -> np.ndarray:
    """Cells a kink of ``f`` may pass through, to first order or by a sign change."""
    near = np.zeros(centers.shape[0], dtype=bool)
    for node in set(_kink_nodes(f)):
        if isinstance(node, Abs):
            u, gu = batch_value_and_grad(node.arg, centers)
            hit = np.abs(u) <= tol + reach * np.linalg.norm(gu, axis=1)
            signs = [np.sign(u)] + [np.sign(batch_value_and_grad(node.arg, c)[0]) for c in corners]
            s = np.stack(signs)
            hit |= (s.max(axis=0) > 0) & (s.min(axis=0) < 0)
            hit |= np.any(s == 0, axis=0)
        else:
            sign = 1.0 if isinstance(node, Max) else -1.0
            parts = [batch_value_and_grad(a, centers) for a in node.args]
            vals = sign * np.stack([p[0] for p in parts])
            grads = np.stack([p[1] for p in parts])
            order = np.argsort(-vals, axis=0)
            rows = np.arange(centers.shape[0])
            top, second = order[0], order[1]
            gap = vals[top, rows] - vals[second, rows]
            slope = np.linalg.norm(grads[top, rows], axis=1) + np.linalg.norm(grads[second, rows], axis=1)
            hit = gap <= tol + reach * slope
            winners = [top] + [
                np.argmax(sign * np.stack([batch_value_and_grad(a, c)[0] for a in node.args]), axis=0)
                for c in corners
            ]
            w = np.stack(winners)
            hit |= np.any(w != w[0], axis=0)
        near |= hit
    return near


def _segment_distance(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    d = Q - P
    dd = np.sum(d * d, axis=1)
    t = np.where(dd > 0, -np.sum(P * d, axis=1) / np.where(dd > 0, dd, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    return np.linalg.norm(P + t[:, None] * d, axis=1)


def _hull_distance_2d(points: np.ndarray) -> np.ndarray:
    """Distance from 0 to conv of ``points[:, k, :]`` for each row (2-D only)."""
    B, K, _ = points.shape
    norms = np.linalg.norm(points, axis=2)
    dist = norms.min(axis=1)
    for a, b in itertools.combinations(range(K), 2):
        dist = np.minimum(dist, _segment_distance(points[:, a], points[:, b]))
    # origin inside: no open half-plane through 0 contains all points
    ang = np.sort(np.arctan2(points[..., 1], points[..., 0]), axis=1)
    gaps = np.diff(np.concatenate([ang, ang[:, :1] + 2 * np.pi], axis=1), axis=1)
    inside = gaps.max(axis=1) < np.pi - 1e-12
    return np.where(inside, 0.0, dist)


def _cell_distance_scalar(f, center, corner_grads: np.ndarray, center_grad, reach_radius: float, kink_tol: float):
    model = model_of(f, center, kink_tol, radius=reach_radius)
    pts = np.vstack([model.extreme_points(), corner_grads, center_grad[None, :]])
    return float(np.linalg.norm(wolfe_min_norm_point(pts)))


def _cell_distances(f, expr: Expr, lo: np.ndarray, size: np.ndarray, shape: tuple[int, int], kink_tol: float):
    """Cell-model distances for a rectangular block of cells with origin ``lo`` and cell ``size``."""
    r1, r2 = shape
    c1 = lo[0] + (np.arange(r1) + 0.5) * size[0]
    c2 = lo[1] + (np.arange(r2) + 0.5) * size[1]
    C1, C2 = np.meshgrid(c1, c2, indexing="ij")
    centers = np.column_stack([C1.ravel(), C2.ravel()])
    e1 = lo[0] + np.arange(r1 + 1) * size[0]
    e2 = lo[1] + np.arange(r2 + 1) * size[1]
    E1, E2 = np.meshgrid(e1, e2, indexing="ij")
    lattice = np.column_stack([E1.ravel(), E2.ravel()])
    fc, gc = batch_value_and_grad(expr, centers)
    _, gl = batch_value_and_grad(expr, lattice)
    gl = gl.reshape(r1 + 1, r2 + 1, 2)
    corner_g = np.stack(
        [gl[:-1, :-1].reshape(-1, 2), gl[1:, :-1].reshape(-1, 2), gl[:-1, 1:].reshape(-1, 2), gl[1:, 1:].reshape(-1, 2)],
        axis=1,
    )
    corner_pts = [
        np.column_stack([E1[:-1, :-1].ravel(), E2[:-1, :-1].ravel()]),
        np.column_stack([E1[1:, :-1].ravel(), E2[1:, :-1].ravel()]),
        np.column_stack([E1[:-1, 1:].ravel(), E2[:-1, 1:].ravel()]),
        np.column_stack([E1[1:, 1:].ravel(), E2[1:, 1:].ravel()]),
    ]
    hd = 0.5 * float(np.linalg.norm(size))
    dist = _hull_distance_2d(np.concatenate([gc[:, None, :], corner_g], axis=1))
    near = _near_kink(expr, centers, corner_pts, KINK_REACH * hd, kink_tol)
    for idx in np.flatnonzero(near):
        dist[idx] = _cell_distance_scalar(f, centers[idx], corner_g[idx], gc[idx], KINK_REACH * hd, kink_tol)
    return dist.reshape(r1, r2), fc.reshape(r1, r2), centers.reshape(r1, r2, 2)


def _refine(f, expr: Expr, lo: np.ndarray, size: np.ndarray, kink_tol: float, levels: int = 4, sub: int = 8):
    """Zoom into the sub-cell with the smallest cell-model distance (ties: smallest f)."""
    lo = lo.astype(float).copy()
    size = size.astype(float).copy()
    for _ in range(levels):
        size = size / sub
        dist, fc, centers = _cell_distances(f, expr, lo, size, (sub, sub), kink_tol)
        key = np.lexsort((fc.ravel(), np.round(dist.ravel(), 12)))
        i, j = np.unravel_index(key[0], dist.shape)
        lo = lo + np.array([i, j]) * size
    point = lo + 0.5 * size
    return point, float(f.value(point.tolist()))


def scan_critical(f, grid: Grid = Grid(), kink_tol: float = 1e-9) -> CriticalSetEstimate:
    """Flag cells containing critical points, group them, and estimate critical values."""
    if _dimension(f) != 2:
        raise ValueError("grid scans are limited to dimension 2")
    expr = _objective_expr(f)
    lo = np.array([b[0] for b in grid.box])
    size = grid.cell_size
    res = grid.resolution
    dist, fc, centers = _cell_distances(f, expr, lo, size, (res, res), kink_tol)
    flagged = dist <= grid.crit_tol
    labels, count = ndimage.label(flagged, structure=np.ones((3, 3), dtype=int))
    comps: list[Component] = []
    for lab in range(1, count + 1):
        cells = np.argwhere(labels == lab)
        d = dist[cells[:, 0], cells[:, 1]]
        fv = fc[cells[:, 0], cells[:, 1]]
        best = np.lexsort((fv, np.round(d, 12)))[0]
        cell_lo = lo + cells[best] * size
        point, value = _refine(f, expr, cell_lo, size, kink_tol)
        comps.append(
            Component(
                id=lab,
                cells=cells,
                centers=centers[cells[:, 0], cells[:, 1]],
                f_range=(float(min(fv.min(), value)), float(max(fv.max(), value))),
                point=point,
                value=value,
            )
        )
    return CriticalSetEstimate(grid, flagged, dist, labels, comps, _cluster([c.value for c in comps], 10 * grid.crit_tol))


def _cluster(values: Sequence[float], tol: float) -> list[float]:
    if not values:
        return []
    vs = sorted(values)
    groups = [[vs[0]]]
    for v in vs[1:]:
        if v - groups[-1][-1] <= tol:
            groups[-1].append(v)
        else:
            groups.append([v])
    return [float(np.median(g)) for g in groups]


@dataclass
class StabilityVerdict:
    """``passed`` means the criterion holds for every recorded ``k >= k0`` and ``k0`` is early enough."""

    k0: int
    f_star: float | int | None
    epsilon: float
    passed: bool
    diagnostics: dict = field(default_factory=dict)


def _tail_verdict(dev: np.ndarray, labels: Sequence, eps: float, tail_fraction: float) -> StabilityVerdict:
    """``dev[j, k]``: deviation of iterate k from candidate j."""
    K = dev.shape[1] - 1
    k0s = []
    for row in dev:
        bad = np.flatnonzero(row > eps)
        k0s.append(int(bad[-1]) + 1 if bad.size else 0)
    j = int(np.argmin(k0s))
    k0 = k0s[j]
    passed = k0 <= (1.0 - tail_fraction) * K
    nearest = np.argmin(dev, axis=0)
    start = int(math.ceil((1.0 - tail_fraction) * K))
    tail_nearest = nearest[start:]
    switches = int(np.count_nonzero(np.diff(tail_nearest))) if tail_nearest.size > 1 else 0
    diag = {"k0_per_candidate": dict(zip([str(l) for l in labels], k0s)), "tail_switches": switches}
    if not passed:
        offending = np.flatnonzero(dev[j, start:] > eps)
        diag["offending_k"] = int(start + offending[-1]) if offending.size else None
    return StabilityVerdict(k0, labels[j], eps, passed, diag)


def verify_value_stability(trace: Trace | np.ndarray, values: Sequence[float], eps: float, tail_fraction: float = 0.5):
    """Single critical value matched by ``f(x_k)`` to within ``eps`` on a late enough tail."""
    f = trace.f if isinstance(trace, Trace) else np.asarray(trace, dtype=float)
    values = [float(v) for v in values]
    if f.size == 0 or not values:
        raise ValueError("need a non-empty trace and at least one critical value")
    dev = np.abs(f[None, :] - np.asarray(values)[:, None])
    return _tail_verdict(dev, values, eps, tail_fraction)


def verify_iterate_stability(
    trace: Trace | np.ndarray,
    est: CriticalSetEstimate | Sequence[np.ndarray],
    eps: float,
    tail_fraction: float = 0.5,
):
    """Single critical component within ``eps`` of every iterate on a late enough tail.

    Distances are measured to flagged-cell centers; ``est`` may also be a list
    of point clouds, one per component (useful beyond two dimensions).
    """
    X = trace.x if isinstance(trace, Trace) else np.asarray(trace, dtype=float)
    if isinstance(est, CriticalSetEstimate):
        clouds = est.component_points()
        ids = [c.id for c in est.components]
    else:
        clouds = [np.atleast_2d(np.asarray(c, dtype=float)) for c in est]
        ids = list(range(1, len(clouds) + 1))
    if X.shape[0] == 0 or not clouds:
        raise ValueError("need a non-empty trace and at least one component")
    dev = np.stack([cKDTree(c).query(X)[0] for c in clouds])
    return _tail_verdict(dev, ids, eps, tail_fraction)


class CoerciveWrap:
    """``f_r(x) = f(P(x)) + d(x, B(0, 2r))`` with ``P`` the projection onto ``B(0, 2r)``.

    Equals ``f`` on the ball and grows linearly outside it.
    """

    def __init__(self, f, r: float, n: int | None = None):
        if not r > 0:
            raise ValueError("radius must be positive")
        self.f = f
        self.r = float(r)
        self.n = n if n is not None else _dimension(f)
        self.R = 2.0 * self.r

    def _project(self, x: np.ndarray):
        nx = float(np.linalg.norm(x))
        if nx <= self.R:
            return x, nx, None
        u = x / nx
        # Jacobian of the projection: (R/|x|) (I - u u^T), symmetric
        J = (self.R / nx) * (np.eye(x.shape[0]) - np.outer(u, u))
        return self.R * u, nx, J

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        p, nx, _ = self._project(x)
        return float(self.f.value(p.tolist())) + max(nx - self.R, 0.0)

    def selector(self, rule: SelectionRule = DEFAULT_RULE):
        if isinstance(self.f, (Expr, SumFunction)):
            inner = selector(_objective_expr(self.f), self.n, rule)
        else:
            inner = self.f.selector(rule)

        def sel(x):
            x = np.asarray(x, dtype=float)
            p, nx, J = self._project(x)
            v, g = inner(p.tolist())
            if J is None:
                return v, list(g)
            out = J @ np.asarray(g) + x / nx
            return v + nx - self.R, out.tolist()

        return sel

    def select(self, x, rule: SelectionRule = DEFAULT_RULE) -> np.ndarray:
        return np.asarray(self.selector(rule)(x)[1])

    def model(self, x, kink_tol: float = 1e-9, radius: float = 0.0) -> SubgradientModel:
        x = as_point(x)
        p, nx, J = self._project(x)
        inner = model_of(self.f, p, kink_tol, radius)
        if J is None:
            return inner
        pts = inner.extreme_points() @ J + x / nx
        return SubgradientModel.hull(pts, kink_tol)


def coercive_wrap(f, r: float) -> CoerciveWrap:
    return CoerciveWrap(f, r)
