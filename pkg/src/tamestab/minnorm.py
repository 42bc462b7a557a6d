"""Minimum-norm points of small convex sets.

Two set shapes appear as subdifferential models:

* a convex hull ``conv{p_1, ..., p_m}``, handled by Wolfe's algorithm;
* a box-affine set ``{g0 + G^T t : l <= t <= u}``, handled by projected
  gradient on the box followed by an active-set polish.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = ["MinNormConvergenceError", "wolfe_min_norm_point", "box_min_norm_point"]


class MinNormConvergenceError(RuntimeError):
    def __init__(self, message: str, best: np.ndarray, gap: float):
        super().__init__(f"{message} (best norm {np.linalg.norm(best):.3e}, gap bound {gap:.3e})")
        self.best = best
        self.gap = gap


def _affine_min_norm(P: np.ndarray) -> np.ndarray:
    """Barycentric weights of the min-norm point of the affine hull of the rows of P."""
    m = P.shape[0]
    if m == 1:
        return np.ones(1)
    A = np.empty((m + 1, m + 1))
    A[:m, :m] = P @ P.T
    A[:m, m] = 1.0
    A[m, :m] = 1.0
    A[m, m] = 0.0
    rhs = np.zeros(m + 1)
    rhs[m] = 1.0
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    return sol[:m]


def wolfe_min_norm_point(points, tol: float = 1e-12, max_iter: int = 1000) -> np.ndarray:
    """Min-norm point of the convex hull of the rows of ``points`` (Wolfe, 1976)."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    m = P.shape[0]
    if m == 1:
        return P[0].copy()
    scale = max(float(np.max(np.sum(P * P, axis=1))), 1e-300)

    j0 = int(np.argmin(np.sum(P * P, axis=1)))
    S = [j0]
    lam = np.ones(1)
    x = P[j0].copy()
    for _ in range(max_iter):
        dots = P @ x
        j = int(np.argmin(dots))
        if x @ x - dots[j] <= tol * scale or j in S:
            return x
        S.append(j)
        lam = np.append(lam, 0.0)
        # minor cycles
        while True:
            w = _affine_min_norm(P[S])
            if np.all(w > 1e-14):
                lam = w
                break
            mask = w <= 1e-14
            denom = lam[mask] - w[mask]
            ratios = np.where(denom > 0, lam[mask] / np.where(denom > 0, denom, 1.0), np.inf)
            theta = min(1.0, float(np.min(ratios)))
            lam = lam + theta * (w - lam)
            keep = lam > 1e-14
            if not np.any(keep):
                keep[int(np.argmax(lam))] = True
            S = [s for s, k in zip(S, keep) if k]
            lam = lam[keep]
            lam = lam / lam.sum()
        x = lam @ P[S]
    raise MinNormConvergenceError("Wolfe iteration cap reached", x, float(x @ x - np.min(P @ x)))


def _fw_gap(g0, G, lo, hi, t) -> float:
    w = g0 + G.T @ t
    grad = G @ w
    t_fw = np.where(grad > 0, lo, hi)
    return float(grad @ (t - t_fw))


def _kkt_ok(g0, G, lo, hi, t, grad_tol) -> bool:
    grad = G @ (g0 + G.T @ t)
    at_lo = t <= lo + 1e-12 * (1 + np.abs(lo))
    at_hi = t >= hi - 1e-12 * (1 + np.abs(hi))
    free = ~(at_lo | at_hi)
    return bool(
        np.all(np.abs(grad[free]) <= grad_tol)
        and np.all(grad[at_lo & ~at_hi] >= -grad_tol)
        and np.all(grad[at_hi & ~at_lo] <= grad_tol)
    )


def _polish(g0, G, lo, hi, t, grad_tol):
    """Solve the least-squares problem on the free variables of the current active set."""
    w = g0 + G.T @ t
    grad = G @ w
    at_lo = (t <= lo + 1e-12 * (1 + np.abs(lo))) & (grad >= -grad_tol)
    at_hi = (t >= hi - 1e-12 * (1 + np.abs(hi))) & (grad <= grad_tol)
    fixed = at_lo | at_hi
    t_new = np.where(at_lo, lo, np.where(at_hi, hi, t))
    free = ~fixed
    if np.any(free):
        rhs = -(g0 + G[fixed].T @ t_new[fixed])
        sol = np.linalg.lstsq(G[free].T, rhs, rcond=None)[0]
        # minimum-norm correction stays closest to the PG iterate on flat directions
        t_new[free] = sol
    if np.all(t_new >= lo - 1e-12) and np.all(t_new <= hi + 1e-12):
        return np.clip(t_new, lo, hi)
    return None


def box_min_norm_point(
    g0,
    G,
    lo,
    hi,
    tol: float = 1e-9,
    max_iter: int = 10_000,
) -> tuple[np.ndarray, np.ndarray]:
    """Min-norm point of ``{g0 + G^T t : lo <= t <= hi}``.

    Returns ``(point, t)``. The distance is accurate to ``tol`` (absolute).
    """
    g0 = np.asarray(g0, dtype=float)
    G = np.atleast_2d(np.asarray(G, dtype=float)).reshape(-1, g0.shape[0])
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    k = G.shape[0]
    if k == 0:
        return g0.copy(), np.zeros(0)
    lam_max = float(np.linalg.eigvalsh(G @ G.T)[-1])
    if lam_max <= 0:
        return g0.copy(), np.clip(np.zeros(k), lo, hi)
    step = 1.0 / lam_max
    # the gap bounds 0.5*(|w|^2 - d^2); require it below 0.5*tol^2
    gap_tol = 0.5 * tol * tol
    t = np.clip(np.zeros(k), lo, hi)
    best_t, best_gap = t, np.inf
    scale = np.sqrt(lam_max) * (np.linalg.norm(g0) + np.sqrt(lam_max) * float(np.max(np.abs(np.r_[lo, hi]))) + 1.0)
    grad_tol = 1e-10 * scale
    for it in range(max_iter):
        w = g0 + G.T @ t
        t_next = np.clip(t - step * (G @ w), lo, hi)
        moved = np.max(np.abs(t_next - t)) if k else 0.0
        t = t_next
        if it % 10 == 0 or moved < 1e-15:
            cand = _polish(g0, G, lo, hi, t, grad_tol)
            if cand is not None:
                if _kkt_ok(g0, G, lo, hi, cand, grad_tol):
                    return g0 + G.T @ cand, cand
                gap = _fw_gap(g0, G, lo, hi, cand)
                if gap < best_gap:
                    best_t, best_gap = cand, gap
            gap = _fw_gap(g0, G, lo, hi, t)
            if gap <= gap_tol:
                return g0 + G.T @ t, t
            if gap < best_gap:
                best_t, best_gap = t, gap
    if k <= 12:
        # exact fallback on the zonotope's vertices
        corners = np.array(list(itertools.product(*zip(lo, hi))))
        x = wolfe_min_norm_point(g0 + corners @ G)
        return x, np.full(k, np.nan)
    raise MinNormConvergenceError("projected gradient did not converge", g0 + G.T @ best_t, best_gap)
