"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (see conftest) before asserting, so the
terminal summary lists every criterion even when some fail.
"""

import json
import math
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from tamestab.cli import execute, main
from tamestab.config import load_config
from tamestab.expr import SumFunction, parse
from tamestab.flow import FlowParams, descent_integral, integrate
from tamestab.landscape import scan_critical, verify_iterate_stability, verify_value_stability
from tamestab.methods import MomentumParams, PermutationStream, run_momentum, run_reshuffled_momentum
from tamestab.subdiff import SelectionRule, clarke_model, clarke_select, component_sum_model, min_norm_distance

pytestmark = pytest.mark.slow

EPS = 0.05


@pytest.fixture(scope="module")
def batch():
    """Twenty reshuffling runs from random starts, plus the scanned critical set."""
    t0 = time.perf_counter()
    exp = load_config("rrm-batch")
    est = scan_critical(exp.model_objective, exp.grid)
    traces = [execute(exp, spec) for spec in exp.runs()]
    return exp, est, traces, time.perf_counter() - t0


def test_criterion_01_shadowing_convergence(tmp_path, report):
    t0 = time.perf_counter()
    code = main(["shadow", "--config", "fig1a-shadow", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    summary = json.loads((tmp_path / "shadow_summary.json").read_text())
    eps = {r["alpha"]: r["epsilon"] for r in summary["sweep"]}
    seq = [eps[a] for a in (0.04, 0.02, 0.01, 0.005)]
    c = summary["sweep"][0]["c"]
    ok = (
        code == 0
        and math.isclose(c, 1 / 0.6)
        and all(b <= a for a, b in zip(seq, seq[1:]))
        and seq[-1] <= 0.5 * seq[0]
        and elapsed < 30
    )
    report(1, ok, f"epsilon={['%.4g' % e for e in seq]} ratio={seq[-1] / seq[0]:.3f} time={elapsed:.1f}s")
    assert ok


def test_criterion_02_value_stability(batch, report):
    exp, est, traces, elapsed = batch
    verdicts = [verify_value_stability(tr, est.critical_values, EPS, 0.5) for tr in traces]
    passed = sum(v.passed for v in verdicts)
    tail_max = max(float(np.max(tr.f[len(tr.f) // 2 :] - min(est.critical_values, key=lambda c: abs(c - tr.f[-1])))) for tr in traces)
    ok = passed >= 18 and elapsed < 120
    report(2, ok, f"{passed}/20 runs pass; largest tail excursion {tail_max:.4f} vs eps={EPS}; time={elapsed:.1f}s")
    assert ok


def test_criterion_03_iterate_stability(batch, report):
    exp, est, traces, _ = batch
    verdicts = [verify_iterate_stability(tr, est, EPS, 0.5) for tr in traces]
    single = [v.passed and v.diagnostics["tail_switches"] == 0 for v in verdicts]
    comps = sorted({v.f_star for v in verdicts if v.passed})
    ok = sum(single) >= 18
    report(3, ok, f"{sum(single)}/20 runs settle near one component (components used: {comps})")
    assert ok


def test_criterion_04_nonregular_sum(report):
    exp = load_config("remark4")
    (spec,) = exp.runs()
    stuck = execute(exp, spec)
    a_ok = stuck.epochs == 1000 and bool(np.all(stuck.inner == 0.0)) and spec.rule == SelectionRule.zero_biased()

    alpha = spec.alpha
    whole = run_momentum(exp.whole, MomentumParams(alpha, [0.0]), epochs=1)
    step = whole.x[1, 0] - whole.x[0, 0]
    b_ok = step == pytest.approx(-alpha / 3, rel=1e-15, abs=0)

    d_sum = min_norm_distance(component_sum_model(exp.sum, [0.0]))
    d_whole = min_norm_distance(clarke_model(exp.whole, [0.0]))
    c_ok = abs(d_sum) <= 1e-9 and abs(d_whole - 1 / 3) <= 1e-9
    ok = a_ok and b_ok and c_ok
    report(4, ok, f"stuck={a_ok} first step={step:.17g} (-alpha/3={-alpha / 3:.17g}) distances={d_sum:.3g},{d_whole:.12g}")
    assert ok


def test_criterion_05_descent_identity(report):
    p = integrate(parse("x1^2/2", 1), [1.0], FlowParams(c=1, T=1, h=1e-4))
    gap = abs((p.f[0] - p.f[-1]) - descent_integral(p))
    q = integrate(parse("abs(x1)", 1), [1.0], FlowParams(c=1, T=1, h=1e-4))
    integral = descent_integral(q)
    ok = gap <= 1e-3 and abs(integral - 1) <= 1e-4
    report(5, ok, f"quadratic gap={gap:.3g}; abs integral={integral:.8f}")
    assert ok


def test_criterion_06_displacement_bound(batch, report):
    _, _, traces, _ = batch
    reps = [tr.displacement for tr in traces]
    worst = max(r.max_displacement / r.bound for r in reps)
    steps = sum(r.checked_steps for r in reps)
    ok = all(r.left_ball_at is None for r in reps) and worst <= 1.0 and steps == 20 * 20_000 * 3
    r_prime = reps[0].delta_prime * (1 - 0.4)
    report(6, ok, f"{steps} steps checked; r'={r_prime:.6g}; max displacement / bound = {worst:.4f}")
    assert ok


def test_criterion_07_reductions(report):
    f = parse("abs(x1^2-1)+2*abs(x1*x2+1)+abs(x2^2-1)", 2)
    p = MomentumParams(0.005, [-1.8, -1.7], beta=0.4, gamma=0.2)
    single = np.array_equal(
        run_reshuffled_momentum(SumFunction([f], 2), p, stream=PermutationStream(3), epochs=1000).x,
        run_momentum(f, p, epochs=1000).x,
    )
    tr = run_momentum(f, MomentumParams(0.005, [-1.8, -1.7]), epochs=1000)
    x = np.array([-1.8, -1.7])
    loop = [x]
    for _ in range(1000):
        x = x - 0.005 * clarke_select(f, x)
        loop.append(x)
    vanilla = np.array_equal(tr.x, np.array(loop))
    ok = single and vanilla
    report(7, ok, f"N=1 bit-identical={single}; beta=gamma=0 bit-identical={vanilla}")
    assert ok


def test_criterion_08_flow_accuracy(report):
    f = parse("x1^2/2", 1)
    err = [abs(integrate(f, [1.0], FlowParams(T=1, h=h)).points[-1, 0] - math.exp(-1)) for h in (1e-4, 5e-5)]
    ok = err[0] <= 1e-3 and err[0] / err[1] >= 1.8
    report(8, ok, f"error at h=1e-4: {err[0]:.3g}; halving ratio {err[0] / err[1]:.3f}")
    assert ok


def test_criterion_09_cd_stuck(report):
    exp = load_config("cd-stuck")
    (spec,) = exp.runs()
    tr = execute(exp, spec)
    stays = tr.epochs == 1000 and bool(np.all(tr.inner == 1.0)) and bool(np.all(tr.x == 1.0))
    est = scan_critical(exp.whole, exp.grid)
    cell = exp.grid.cell_of((1.0, 1.0))
    d = float(est.distance[cell])
    ok = stays and not est.flagged[cell] and d > exp.grid.crit_tol
    report(9, ok, f"stays at (1,1)={stays}; cell distance={d:.4g} > crit_tol={exp.grid.crit_tol}")
    assert ok


def _polylines(svg_path):
    root = ET.parse(svg_path).getroot()
    return [e for e in root.iter("{http://www.w3.org/2000/svg}polyline") if e.get("class") == "iterates"]


@pytest.mark.parametrize("preset", ["fig1a", "fig1b"])
def test_criterion_10_figures(preset, tmp_path, report):
    times = []
    for d in ("a", "b"):
        t0 = time.perf_counter()
        code = main(["figure", "--config", preset, "--out", str(tmp_path / d)])
        times.append(time.perf_counter() - t0)
        assert code == 0
    same = (tmp_path / "a" / "figure.svg").read_bytes() == (tmp_path / "b" / "figure.svg").read_bytes()

    exp = load_config(preset)
    f = exp.model_objective
    est = scan_critical(f, exp.grid)
    lines = _polylines(tmp_path / "a" / "figure.svg")
    endpoint_ok = []
    notes = []
    for line in lines:
        end = np.array([float(v) for v in line.get("data-end").split(",")])
        fv = f.value(end.tolist())
        value_gap = min(abs(fv - c) for c in est.critical_values)
        comp = int(line.get("data-component"))
        centers = next(c.centers for c in est.components if c.id == comp)
        dist = float(np.min(np.linalg.norm(centers - end, axis=1)))
        endpoint_ok.append(value_gap < EPS and dist <= EPS)
        notes.append(
            f"{line.get('data-label')}: |f-f*|={value_gap:.3g} dist={dist:.3g} "
            f"(run verdicts: value {line.get('data-value-verdict')}, iterate {line.get('data-iterate-verdict')})"
        )
    ok = same and max(times) < 60 and len(lines) >= 2 and all(endpoint_ok)
    report(10, ok, f"{preset}: deterministic={same} time={max(times):.1f}s; " + "; ".join(notes))
    assert ok
