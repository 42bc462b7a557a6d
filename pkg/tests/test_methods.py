import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from tamestab.expr import SumFunction, parse
from tamestab.methods import (
    DisplacementBoundError,
    DivergenceError,
    DisplacementCheck,
    MomentumParams,
    NonsmoothObjectiveError,
    PermutationStream,
    run_cyclic_cd,
    run_momentum,
    run_reshuffled_momentum,
    selection_norm_bound,
)
from tamestab.subdiff import SelectionRule, clarke_select

FIG_A = ["abs(x1^2-1)", "2*abs(x1*x2+1)", "abs(x2^2-1)"]
FIG_B = "abs(x1^2-1)^(3/2)+2*abs(x1*x2+1)^(3/2)+abs(x2^2-1)^(3/2)"
HALF_SQUARE = parse("x1^2/2", 1)


def test_params_validation():
    with pytest.raises(ValueError):
        MomentumParams(0.0, [1.0])
    with pytest.raises(ValueError):
        MomentumParams(0.1, [1.0], beta=1.0)
    with pytest.raises(ValueError):
        MomentumParams(0.1, [1.0], delta=1.0, x_prev_init=[1.2])
    p = MomentumParams(0.1, [1.0], delta=2.0, x_prev_init=[1.2])
    assert p.x_prev_init.tolist() == [1.2]
    assert MomentumParams(0.1, [1.0]).x_prev_init.tolist() == [1.0]


def test_first_gradient_step():
    tr = run_momentum(HALF_SQUARE, MomentumParams(0.1, [1.0]), epochs=1)
    assert tr.x[1, 0] == pytest.approx(0.9, abs=1e-15)


def test_whole_sum_moves_by_a_third_of_alpha():
    tr = run_momentum(parse("(x1+x1^2)/3", 1), MomentumParams(0.3, [0.0]), epochs=1)
    assert tr.x[1, 0] == pytest.approx(-0.1, abs=1e-15)


@pytest.mark.parametrize("beta,gamma", [(0.4, 0.0), (0.5, 0.5), (-0.3, 1.0), (0.9, -0.2)])
def test_momentum_matches_linear_recurrence(beta, gamma):
    """On x^2/2 the iteration is linear: (x_{k+1}, x_k) = A (x_k, x_{k-1})."""
    alpha, K = 0.05, 120
    tr = run_momentum(HALF_SQUARE, MomentumParams(alpha, [1.0], beta, gamma, x_prev_init=[1.0]), epochs=K)
    A = np.array([[1 + beta - alpha * (1 + gamma), -(beta - alpha * gamma)], [1.0, 0.0]])
    for k in (1, 2, 10, K):
        expected = np.linalg.matrix_power(A, k) @ np.array([1.0, 1.0])
        assert tr.x[k, 0] == pytest.approx(expected[0], rel=1e-10, abs=1e-13)


def test_vanilla_reduction_is_exact():
    f = parse("abs(x1^2-1)+2*abs(x1*x2+1)+abs(x2^2-1)", 2)
    alpha = 0.01
    tr = run_momentum(f, MomentumParams(alpha, [-1.8, -1.7]), epochs=500)
    x = np.array([-1.8, -1.7])
    for k in range(500):
        x = x - alpha * clarke_select(f, x)
        assert np.array_equal(tr.x[k + 1], x)


@pytest.mark.parametrize("seed", range(4))
def test_two_quadratic_components_epoch(seed):
    F = SumFunction(["x1^2/2", "x1^2/2"], 1)
    tr = run_reshuffled_momentum(F, MomentumParams(0.1, [1.0]), stream=PermutationStream(seed), epochs=1)
    assert tr.x[1, 0] == pytest.approx(0.81, abs=1e-15)


def test_single_component_reshuffle_equals_momentum():
    f = parse("abs(x1^2-1)+2*abs(x1*x2+1)+abs(x2^2-1)", 2)
    p = MomentumParams(0.005, [-1.8, -1.7], beta=0.4, gamma=0.3)
    a = run_momentum(f, p, epochs=1000)
    b = run_reshuffled_momentum(SumFunction([f], 2), p, stream=PermutationStream(9), epochs=1000)
    assert np.array_equal(a.x, b.x)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(-0.9, 0.9), st.floats(-2, 2), st.integers(0, 2**64 - 1))
def test_nonregular_components_never_leave_zero(alpha, beta, gamma, seed):
    F = SumFunction(["max(x1,0)", "min(x1,0)", "x1^2"], 1)
    tr = run_reshuffled_momentum(
        F, MomentumParams(alpha, [0.0], beta, gamma), SelectionRule.zero_biased(), PermutationStream(seed), 50
    )
    assert np.all(tr.inner == 0.0)


def test_coordinate_descent_separable_quadratic():
    f = parse("x1^2/2+x2^2/2", 2)
    for seed in range(4):
        tr = run_cyclic_cd(f, 0.1, [1.0, 1.0], PermutationStream(seed), 1)
        assert tr.x[1] == pytest.approx([0.9, 0.9], abs=1e-15)


def test_coordinate_descent_stuck_point():
    f = parse("max(abs(x1),abs(x2))", 2)
    tr = run_cyclic_cd(f, 0.1, [1.0, 1.0], PermutationStream(1), 1000, allow_nonsmooth=True, rule=SelectionRule.zero_biased())
    assert np.all(tr.x == 1.0)


def test_coordinate_descent_needs_smoothness():
    with pytest.raises(NonsmoothObjectiveError):
        run_cyclic_cd(parse("max(abs(x1),abs(x2))", 2), 0.1, [1.0, 1.0])


@pytest.mark.parametrize("alpha", [0.001, 0.05, 0.3])
def test_smoothed_minimum_is_fixed(alpha):
    f = parse(FIG_B, 2)
    assert np.all(run_cyclic_cd(f, alpha, [1.0, -1.0], epochs=20).x == [1.0, -1.0])
    assert np.all(run_momentum(f, MomentumParams(alpha, [1.0, -1.0], 0.4), epochs=20).x == [1.0, -1.0])


def test_permutations_are_keyed_by_seed_and_epoch():
    s = PermutationStream(42)
    assert np.array_equal(s.permutation(7, 5), PermutationStream(42).permutation(7, 5))
    assert sorted(s.permutation(3, 6).tolist()) == list(range(6))
    draws = {tuple(PermutationStream(seed).permutation(0, 8)) for seed in range(20)}
    assert len(draws) > 15


@pytest.mark.parametrize("seed", [0, 1, 2**63 + 5])
def test_permutations_uniform(seed):
    s = PermutationStream(seed)
    index = {p: j for j, p in enumerate(itertools.permutations(range(4)))}
    counts = np.zeros(24)
    for k in range(10_000):
        counts[index[tuple(s.permutation(k, 4).tolist())]] += 1
    assert chisquare(counts).pvalue > 0.01


def test_trace_bookkeeping():
    F = SumFunction(FIG_A, 2)
    p = MomentumParams(0.01, [0.4, -1.3], beta=0.4, gamma=0.2)
    tr = run_reshuffled_momentum(F, p, stream=PermutationStream(3), epochs=50)
    assert np.array_equal(tr.inner[:, 0], tr.x[:-1])
    assert np.array_equal(tr.inner[:, -1], tr.x[1:])
    for k in range(50):
        assert tr.f[k] == F.value(tr.x[k].tolist())
        for i in range(4):
            assert tr.f_inner[k, i] == F.value(tr.inner[k, i].tolist())
        assert sorted(tr.perms[k].tolist()) == [0, 1, 2]
    # x_{k,-1} = x_{k-1,N-1}
    assert np.array_equal(tr.prev_inner(5, 0), tr.inner[4, 2])
    assert np.array_equal(tr.prev_inner(0, 0), p.x_prev_init)
    # lookahead uses the momentum difference across the epoch boundary
    k, i = 5, 0
    y = tr.inner[k, 0] + 0.2 * (tr.inner[k, 0] - tr.prev_inner(k, 0))
    assert np.allclose(tr.lookahead[k, i], y, atol=1e-15)


def test_displacement_bound_holds_on_kinked_landscape():
    F = SumFunction(FIG_A, 2)
    r_prime = selection_norm_bound(F, 4.0)
    assert r_prime == pytest.approx(8.0, rel=1e-3)
    tr = run_reshuffled_momentum(
        F, MomentumParams(0.005, [-1.8, -1.7], beta=0.4), stream=PermutationStream(1), epochs=2000, displacement=DisplacementCheck(4.0, r_prime)
    )
    rep = tr.displacement
    assert rep.checked_steps == 6000 and rep.left_ball_at is None
    assert rep.max_displacement <= rep.bound


def test_displacement_violation_is_raised():
    F = SumFunction(FIG_A, 2)
    with pytest.raises(DisplacementBoundError):
        run_reshuffled_momentum(
            F, MomentumParams(0.005, [-1.8, -1.7], beta=0.4), stream=PermutationStream(1), epochs=10, displacement=DisplacementCheck(4.0, 0.1)
        )


def test_divergence_reported():
    with pytest.raises(DivergenceError) as exc:
        run_momentum(parse("-x1^2", 1), MomentumParams(1.0, [1.0]), epochs=100)
    assert np.all(np.isfinite(exc.value.last_x))
