import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from tamestab.expr import Abs, FracPow, Max, Min, SumFunction, parse
from tamestab.subdiff import (
    SelectionRule,
    SubgradientModel,
    UnsupportedStructureError,
    batch_value_and_grad,
    clarke_model,
    clarke_select,
    component_sum_model,
    min_norm_distance,
    partial_select,
)

FIG_A = "abs(x1^2-1)+2*abs(x1*x2+1)+abs(x2^2-1)"
FIG_B = "abs(x1^2-1)^(3/2)+2*abs(x1*x2+1)^(3/2)+abs(x2^2-1)^(3/2)"
PRESETS = [FIG_A, FIG_B, "max(abs(x1),abs(x2))", "x1^2+x2^2", "x1^2/2+x2^2/2", "(x1+x1^2)/3", "max(x1,0)+min(x1,0)+x1^2"]
RULES = [SelectionRule(a, t) for a in ("zero", "left", "right") for t in ("first_child", "mean_of_argmax", "min_norm")]
NONREGULAR = SumFunction(["max(x1,0)", "min(x1,0)", "x1^2"], 1)


def kink_gap(f, x):
    """Smallest |inner| over abs nodes and smallest top-two gap over max/min nodes."""
    gap = np.inf
    for node in f.walk():
        if isinstance(node, Abs):
            gap = min(gap, abs(node.arg.value(x)))
        elif isinstance(node, (Max, Min)):
            v = sorted((a.value(x) for a in node.args), reverse=isinstance(node, Max))
            gap = min(gap, abs(v[0] - v[1]))
    return gap


def fd_grad(f, x, h=1e-6):
    g = np.empty(len(x))
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = h
        g[i] = (f.value(x + e) - f.value(x - e)) / (2 * h)
    return g


# documented values -------------------------------------------------------------


def test_abs_at_zero_zero_rule():
    assert clarke_select(parse("abs(x1)", 1), [0.0]).tolist() == [0.0]


def test_whole_sum_selection_is_one_third():
    assert clarke_select(parse("(x1+x1^2)/3", 1), [0.0])[0] == pytest.approx(1 / 3, abs=1e-15)


def test_quadratic_gradient():
    assert clarke_select(parse("x1^2/2", 1), [1.0]).tolist() == [1.0]


def test_max_with_zero_is_unit_interval():
    m = clarke_model(parse("max(x1,0)", 1), [0.0])
    assert m.kind == "hull"
    assert sorted(m.extreme_points().ravel().tolist()) == [0.0, 1.0]


def test_separable_abs_at_origin_is_box():
    m = clarke_model(parse("abs(x1)+abs(x2)", 2), [0.0, 0.0])
    assert m.kind == "box_affine"
    pts = {tuple(p) for p in m.extreme_points().tolist()}
    assert pts == {(1, 1), (1, -1), (-1, 1), (-1, -1)}


def test_kinked_landscape_model_at_one_one():
    m = clarke_model(parse(FIG_A, 2), [1.0, 1.0])
    assert m.kind == "box_affine" and m.generators.shape[0] == 2
    # sign patterns: (+-2 + 2, 2 +- 2) with the cross term's gradient (2, 2)
    pts = {tuple(p) for p in m.extreme_points().tolist()}
    assert pts == {(4, 4), (0, 4), (4, 0), (0, 0)}
    assert min_norm_distance(m) <= 1e-9


def test_nonregular_sum_two_models():
    assert min_norm_distance(component_sum_model(NONREGULAR, [0.0])) <= 1e-9
    assert min_norm_distance(clarke_model(parse("(x1+x1^2)/3", 1), [0.0])) == pytest.approx(1 / 3, abs=1e-9)
    ends = component_sum_model(NONREGULAR, [0.0]).extreme_points().ravel()
    assert min(ends) == pytest.approx(0) and max(ends) == pytest.approx(2 / 3)


def test_singleton_box_distance():
    assert min_norm_distance(SubgradientModel.box([3.0, 4.0])) == 5.0


def test_partial_selections():
    assert partial_select(parse("x1^2+x2^2", 2), [1.0, 2.0], 2) == 4.0
    assert partial_select(parse("max(abs(x1),abs(x2))", 2), [1.0, 1.0], 1, SelectionRule.zero_biased()) == 0.0
    assert partial_select(parse(FIG_B, 2), [1.0, -1.0], 1) == 0.0


def test_unsupported_nesting():
    with pytest.raises(UnsupportedStructureError):
        clarke_model(parse("max(abs(max(x1,x2)),x1)", 2), [0.0, 0.0])


@pytest.mark.parametrize("text", [FIG_A, FIG_B])
@pytest.mark.parametrize("x", [(1.0, -1.0), (-1.0, 1.0)])
def test_zero_at_minimum(text, x):
    assert min_norm_distance(clarke_model(parse(text, 2), x)) <= 1e-9


def test_no_active_kink_gives_gradient():
    f = parse(FIG_A, 2)
    m = clarke_model(f, [0.3, 0.2])
    assert m.is_singleton
    assert np.allclose(m.extreme_points()[0], clarke_select(f, [0.3, 0.2]))


# oracles ---------------------------------------------------------------------------


@pytest.mark.parametrize("text", PRESETS)
def test_selection_matches_finite_differences(text):
    n = 2 if "x2" in text else 1
    f = parse(text, n)
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 1000:
        x = rng.uniform(-2, 2, n)
        if kink_gap(f, x.tolist()) <= 1e-6:
            continue
        g = clarke_select(f, x)
        assert g == pytest.approx(fd_grad(f, x), rel=1e-4, abs=1e-6)
        checked += 1


@pytest.mark.parametrize("text", PRESETS)
def test_batch_matches_scalar_selection(text):
    n = 2 if "x2" in text else 1
    f = parse(text, n)
    X = np.random.default_rng(4).uniform(-2, 2, (200, n))
    v, G = batch_value_and_grad(f, X)
    for x, vi, gi in zip(X, v, G):
        assert vi == pytest.approx(f.value(x.tolist()), rel=1e-13, abs=1e-13)
        assert gi == pytest.approx(clarke_select(f, x), rel=1e-12, abs=1e-12)


# points snapped onto the preset kinks: x_i in {-1, 0, 1} or random
coords = st.one_of(st.sampled_from([-1.0, 0.0, 1.0]), st.floats(-2, 2))


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(PRESETS), coords, coords, st.sampled_from(RULES))
def test_selection_lies_in_model(text, a, b, rule):
    n = 2 if "x2" in text else 1
    f = parse(text, n)
    x = [a, b][:n]
    g = clarke_select(f, x, rule)
    assert clarke_model(f, x, 0.0).contains(g, 1e-8)


def brute_box_distance(m: SubgradientModel) -> float:
    rng = np.random.default_rng(5)
    T = rng.uniform(m.lower, m.upper, size=(10_000, len(m.lower)))
    vals = np.linalg.norm(m.base + T @ m.generators, axis=1)
    t0 = T[np.argmin(vals)]
    res = minimize(
        lambda t: np.sum((m.base + t @ m.generators) ** 2),
        t0,
        bounds=list(zip(m.lower, m.upper)),
        method="L-BFGS-B",
        options={"ftol": 1e-16, "gtol": 1e-12},
    )
    return float(min(vals.min(), np.linalg.norm(m.base + res.x @ m.generators)))


@settings(max_examples=100, deadline=None)
@given(
    st.integers(1, 3).flatmap(
        lambda k: st.tuples(
            st.lists(st.floats(-3, 3), min_size=2, max_size=2),
            st.lists(st.lists(st.floats(-2, 2), min_size=2, max_size=2), min_size=k, max_size=k),
            st.lists(st.floats(0.1, 2), min_size=k, max_size=k),
        )
    )
)
def test_box_distance_matches_brute_force(data):
    base, gens, width = data
    k = len(gens)
    m = SubgradientModel.box(base, gens, [-w for w in width], width)
    assert min_norm_distance(m) == pytest.approx(brute_box_distance(m), abs=1e-4)
    assert k == m.generators.shape[0]


def test_fractional_power_kinks_stay_smooth():
    f = parse(FIG_B, 2)
    assert not any(isinstance(e, Abs) and not isinstance(p, FracPow) for p in f.walk() for e in p.children)
    assert clarke_model(f, [1.0, 0.3]).is_singleton
