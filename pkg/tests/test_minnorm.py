import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize

from tamestab.minnorm import box_min_norm_point, wolfe_min_norm_point


def hull_oracle(P):
    """Sampled convex weights, polished by SLSQP on the simplex."""
    rng = np.random.default_rng(1)
    W = rng.dirichlet(np.ones(len(P)), size=10_000)
    W = np.vstack([W, np.eye(len(P))])
    w0 = W[np.argmin(np.linalg.norm(W @ P, axis=1))]
    res = minimize(
        lambda w: 0.5 * np.sum((w @ P) ** 2),
        w0,
        jac=lambda w: P @ (w @ P),
        bounds=[(0, 1)] * len(P),
        constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1}],
        method="SLSQP",
        options={"ftol": 1e-15, "maxiter": 500},
    )
    return min(np.linalg.norm(res.x @ P), np.linalg.norm(w0 @ P))


def box_oracle(g0, G, lo, hi):
    rng = np.random.default_rng(2)
    T = rng.uniform(lo, hi, size=(10_000, len(lo)))
    t0 = T[np.argmin(np.linalg.norm(g0 + T @ G, axis=1))]
    res = minimize(
        lambda t: 0.5 * np.sum((g0 + t @ G) ** 2),
        t0,
        jac=lambda t: G @ (g0 + t @ G),
        bounds=list(zip(lo, hi)),
        method="L-BFGS-B",
        options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 2000},
    )
    return np.linalg.norm(g0 + res.x @ G)


def test_single_point():
    assert np.allclose(wolfe_min_norm_point([[3.0, 4.0]]), [3, 4])


def test_segment_through_origin():
    assert np.allclose(wolfe_min_norm_point([[-1.0, 0.0], [1.0, 0.0]]), 0)


def test_simplex_corner_pair():
    assert np.allclose(wolfe_min_norm_point([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5])


def test_degenerate_box_distance():
    x, _ = box_min_norm_point([3.0, 4.0], np.zeros((0, 2)), [], [])
    assert np.linalg.norm(x) == 5.0


def test_box_with_origin_inside():
    x, t = box_min_norm_point([2.0, 2.0], [[2.0, 0.0], [0.0, 2.0]], [-1, -1], [1, 1])
    assert np.linalg.norm(x) <= 1e-12
    assert np.allclose(t, [-1, -1])


points = st.integers(1, 7).flatmap(
    lambda m: st.integers(1, 4).flatmap(lambda n: arrays(float, (m, n), elements=st.floats(-3, 3, width=32)))
)


@settings(max_examples=120, deadline=None)
@given(points)
def test_hull_min_norm_matches_oracle(P):
    x = wolfe_min_norm_point(P)
    assert np.linalg.norm(x) == pytest.approx(hull_oracle(P), abs=1e-6)
    # optimality: no hull vertex improves along the segment from x
    assert np.min(P @ x) >= x @ x - 1e-8 * max(1.0, np.max(np.abs(P)) ** 2)


@st.composite
def boxes(draw):
    n = draw(st.integers(1, 3))
    k = draw(st.integers(1, 4))
    g0 = draw(arrays(float, n, elements=st.floats(-3, 3, width=32)))
    G = draw(arrays(float, (k, n), elements=st.floats(-2, 2, width=32)))
    lo = draw(arrays(float, k, elements=st.floats(-1, 0, width=32)))
    width = draw(arrays(float, k, elements=st.floats(0, 2, width=32)))
    return g0, G, lo, lo + width


@settings(max_examples=120, deadline=None)
@given(boxes())
def test_box_min_norm_matches_oracle(b):
    g0, G, lo, hi = b
    x, _ = box_min_norm_point(g0, G, lo, hi)
    assert np.linalg.norm(x) == pytest.approx(box_oracle(g0, G, lo, hi), abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(boxes())
def test_box_agrees_with_hull_of_corners(b):
    g0, G, lo, hi = b
    corners = np.array(list(itertools.product(*zip(lo, hi))))
    x, _ = box_min_norm_point(g0, G, lo, hi)
    y = wolfe_min_norm_point(g0 + corners @ G)
    assert np.linalg.norm(x) == pytest.approx(np.linalg.norm(y), abs=1e-8)
