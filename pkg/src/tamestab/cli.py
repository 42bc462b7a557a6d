"""Command-line entry point.

``tamestab run|flow|shadow|landscape|figure --config <path-or-preset> [--out DIR] [--seed U64] [--strict]``

Exit codes: 0 success, 1 configuration error, 2 numerical failure
(divergence, integrator stall, solver failure), 3 verdict failure under
``--strict``. Without ``--out`` or a config ``output`` field, results go to
``$TAMESTAB_OUT/<name>`` (default ``./tamestab-out/<name>``).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, Experiment, RunSpec, load_config, preset_names
from .expr import SumFunction
from .flow import FlowStallError, descent_integral, integrate, multiplicative_constant, shadow
from .landscape import CriticalSetEstimate, scan_critical, verify_iterate_stability, verify_value_stability
from .methods import (
    DisplacementBoundError,
    DivergenceError,
    DisplacementCheck,
    NonsmoothObjectiveError,
    PermutationStream,
    Trace,
    run_cyclic_cd,
    run_momentum,
    run_reshuffled_momentum,
    selection_norm_bound,
)
from .minnorm import MinNormConvergenceError
from .subdiff import UnsupportedStructureError, batch_value_and_grad, min_norm_distance, model_of
from .svg import Figure, PolylineLayer, fmt

OUT_ENV = "TAMESTAB_OUT"
EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERDICT = 1, 2, 3
COLORS = {"momentum": "#ffd400", "reshuffle": "#22c55e", "cyclic_cd": "#ffffff"}
NUMERIC_ERRORS = (DivergenceError, DisplacementBoundError, FlowStallError, MinNormConvergenceError)


class VerdictFailure(Exception):
    pass


# execution ---------------------------------------------------------------


def execute(exp: Experiment, spec: RunSpec, epochs: int | None = None) -> Trace:
    """Run one configured method and return its trace."""
    K = epochs if epochs is not None else spec.epochs
    f = exp.objective_for(spec.method)
    stream = PermutationStream(spec.seed)
    if spec.method == "momentum":
        return run_momentum(f, spec.params, spec.rule, K)
    if spec.method == "reshuffle":
        check = None
        if spec.displacement_radius is not None:
            check = DisplacementCheck(spec.displacement_radius, selection_norm_bound(f, spec.displacement_radius, exp.n))
        return run_reshuffled_momentum(f, spec.params, spec.rule, stream, K, check)
    try:
        return run_cyclic_cd(f, spec.alpha, spec.params.x_init, stream, K, spec.allow_nonsmooth, spec.rule)
    except NonsmoothObjectiveError as e:
        raise ConfigError(str(e)) from None


def _writer(path: Path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")



def write_trace_csv(path: Path, trace: Trace, model_objective) -> None:
    """One row per state ``x_{k,i}``; the selection column holds the step taken from it."""
    n = trace.n
    cache: dict[bytes, float] = {}

    def dist(x: np.ndarray) -> float:
        key = x.tobytes()
        if key not in cache:
            cache[key] = min_norm_distance(model_of(model_objective, x))
        return cache[key]

    fh, w = _writer(path)
    with fh:
        w.writerow(["epoch", "inner_index", *(f"x_{j + 1}" for j in range(n)), "f", "selection_norm", "min_norm_distance"])
        K, M = trace.selections.shape[:2]
        for k in range(K):
            for i in range(M):
                x = trace.inner[k, i]
                g = float(np.linalg.norm(trace.selections[k, i]))
                w.writerow([k, i, *map(fmt, x), fmt(trace.f_inner[k, i]), fmt(g), fmt(dist(x))])
        x = trace.x[K]
        w.writerow([K, 0, *map(fmt, x), fmt(trace.f[K]), "", fmt(dist(x))])


def read_trace_csv(path: Path) -> np.ndarray:
    """Outer iterates (rows with inner_index 0) of a trace CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty trace")
    xs = sorted(k for k in rows[0] if k.startswith("x_"))
    xs.sort(key=lambda s: int(s[2:]))
    pts = [[float(r[c]) for c in xs] for r in rows if r["inner_index"] == "0"]
    return np.asarray(pts)


def _out_dir(args, exp: Experiment) -> Path:
    if args.out:
        d = Path(args.out)
    elif "output" in exp.raw:
        d = Path(exp.raw["output"])
    else:
        d = Path(os.environ.get(OUT_ENV, "tamestab-out")) / exp.name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _indexed(name: str, j: int, count: int) -> str:
    stem, ext = name.rsplit(".", 1)
    return name if count == 1 else f"{stem}_{j + 1}.{ext}"


# commands -----------------------------------------------------------------


def cmd_run(exp: Experiment, out: Path, seed: int | None = None, strict: bool = False) -> dict:
    specs = exp.runs(seed)
    runs = []
    for j, spec in enumerate(specs):
        tr = execute(exp, spec)
        write_trace_csv(out / _indexed("trace.csv", j, len(specs)), tr, exp.model_objective)
        info = {
            "method": spec.method,
            "seed": spec.seed,
            "params": spec.params.echo(),
            "epochs": tr.epochs,
            "final_x": tr.x[-1].tolist(),
            "final_f": float(tr.f[-1]),
            "max_displacement_from_start": float(np.max(np.linalg.norm(tr.x - tr.x[0], axis=1))),
        }
        if tr.displacement is not None:
            info["displacement"] = dict(tr.displacement.__dict__)
        runs.append(info)
        print(f"run {j + 1}/{len(specs)}: {spec.method} seed={spec.seed} x_K={tr.x[-1].tolist()} f={tr.f[-1]:.6g}")
    summary = {"name": exp.name, "runs": runs}
    _dump(out / "summary.json", summary)
    return summary


def _flow_constant(exp: Experiment) -> float:
    m = exp.raw.get("method")
    if m is None:
        return 1.0
    N = exp.sum.N if (m["name"] == "reshuffle" and exp.sum is not None) else 1
    return multiplicative_constant(m["name"], m.get("beta", 0.0), N)


def _flow_objective(exp: Experiment):
    m = exp.raw.get("method")
    return exp.objective_for(m["name"]) if m else exp.model_objective


def cmd_flow(exp: Experiment, out: Path, seed: int | None = None, strict: bool = False) -> dict:
    p = exp.flow_params(_flow_constant(exp))
    f = _flow_objective(exp)
    starts = exp.flow_starts()
    paths = []
    for j, x0 in enumerate(starts):
        path = integrate(f, x0, p)
        fh, w = _writer(out / _indexed("flow.csv", j, len(starts)))
        with fh:
            w.writerow(["t", *(f"x_{i + 1}" for i in range(exp.n)), "f", "min_norm_distance"])
            for t, x, fv, d in zip(path.times, path.points, path.f, path.d):
                w.writerow([fmt(t), *map(fmt, x), fmt(fv), fmt(d)])
        info = {
            "start": np.asarray(x0).tolist(),
            "end": path.points[-1].tolist(),
            "f_decrease": float(path.f[0] - path.f[-1]),
            "descent_integral": descent_integral(path),
            "absorbed": path.absorbed,
            "halvings": path.halvings,
        }
        paths.append(info)
        print(f"flow {j + 1}/{len(starts)}: x(T)={info['end']} f-drop={info['f_decrease']:.6g} integral={info['descent_integral']:.6g}")
    summary = {"name": exp.name, "c": p.c, "T": p.T, "h": p.substep, "paths": paths}
    _dump(out / "flow_summary.json", summary)
    return summary


def cmd_shadow(exp: Experiment, out: Path, seed: int | None = None, strict: bool = False) -> dict:
    specs = exp.sweep(seed)
    kbar = exp.raw.get("flow", {}).get("kbar", 0)
    rows, eps = [], []
    fh, w = _writer(out / "deviations.csv")
    with fh:
        w.writerow(["alpha", "k", "t", "deviation"])
        for spec in specs:
            f = exp.objective_for(spec.method)
            N = f.N if isinstance(f, SumFunction) else 1
            p = exp.flow_params(spec.constant(N))
            needed = kbar + int(np.floor(p.T / spec.alpha + 1e-9))
            tr = execute(exp, spec, max(spec.epochs, needed))
            res = shadow(tr, f, p, spec.alpha, kbar)
            for k, (t, d) in enumerate(zip(res.times, res.deviations)):
                w.writerow([fmt(spec.alpha), kbar + k, fmt(t), fmt(d)])
            eps.append(res.epsilon)
            rows.append({"alpha": spec.alpha, "epsilon": res.epsilon, "c": p.c, "steps": len(res.times) - 1})
            print(f"alpha={spec.alpha:g}: epsilon={res.epsilon:.6g}")
    fh, w = _writer(out / "shadow.csv")
    with fh:
        w.writerow(["alpha", "epsilon", "c", "steps"])
        for r in rows:
            w.writerow([fmt(r["alpha"]), fmt(r["epsilon"]), fmt(r["c"]), r["steps"]])
    order = np.argsort([-r["alpha"] for r in rows], kind="stable")
    e = np.asarray(eps)[order]
    non_inc = bool(np.all(np.diff(e) <= 0))
    summary = {
        "name": exp.name,
        "sweep": rows,
        "non_increasing": non_inc,
        "ratio_smallest_to_largest": float(e[-1] / e[0]) if e[0] > 0 else 0.0,
    }
    _dump(out / "shadow_summary.json", summary)
    print(f"epsilon non-increasing as alpha shrinks: {'yes' if non_inc else 'no'}")
    if strict and not non_inc:
        raise VerdictFailure("shadowing error increased along the sweep")
    return summary


def _write_estimate(out: Path, est: CriticalSetEstimate, f) -> None:
    g = est.grid
    c1, c2 = g.centers
    fh, w = _writer(out / "cells.csv")
    with fh:
        w.writerow(["i", "j", "x_1", "x_2", "distance", "f", "component"])
        for i, j in np.argwhere(est.flagged):
            x = (c1[i], c2[j])
            w.writerow([i, j, fmt(x[0]), fmt(x[1]), fmt(est.distance[i, j]), fmt(f.value(list(x))), int(est.labels[i, j])])
    fh, w = _writer(out / "components.csv")
    with fh:
        w.writerow(["component", "cells", "x_1", "x_2", "value", "f_min", "f_max"])
        for c in est.components:
            w.writerow([c.id, len(c.cells), fmt(c.point[0]), fmt(c.point[1]), fmt(c.value), fmt(c.f_range[0]), fmt(c.f_range[1])])
    fh, w = _writer(out / "critical_values.csv")
    with fh:
        w.writerow(["value"])
        for v in est.critical_values:
            w.writerow([fmt(v)])


def _verdicts(exp: Experiment, est: CriticalSetEstimate, X: np.ndarray, fv: np.ndarray) -> dict:
    vv = verify_value_stability(fv, est.critical_values, exp.epsilon, exp.tail_fraction)
    iv = verify_iterate_stability(X, est, exp.epsilon, exp.tail_fraction)
    return {
        "value_pass": vv.passed,
        "value_k0": vv.k0,
        "f_star": vv.f_star,
        "iterate_pass": iv.passed,
        "iterate_k0": iv.k0,
        "component": iv.f_star,
        "tail_switches": iv.diagnostics.get("tail_switches", 0),
    }


def cmd_landscape(
    exp: Experiment, out: Path, seed: int | None = None, strict: bool = False, trace_csv: str | None = None
) -> dict:
    f = exp.model_objective
    est = scan_critical(f, exp.grid)
    _write_estimate(out, est, f)
    print(f"flagged {int(est.flagged.sum())} cells in {len(est.components)} components; critical values {est.critical_values}")
    summary = {
        "name": exp.name,
        "grid": {"box": exp.grid.box, "resolution": exp.grid.resolution, "crit_tol": exp.grid.crit_tol},
        "components": [
            {"id": c.id, "cells": len(c.cells), "point": c.point.tolist(), "value": c.value, "f_range": c.f_range}
            for c in est.components
        ],
        "critical_values": est.critical_values,
        "verdicts": [],
    }
    traces: list[tuple[str, np.ndarray, np.ndarray]] = []
    if trace_csv:
        X = read_trace_csv(Path(trace_csv))
        traces.append((trace_csv, X, np.asarray([f.value(x.tolist()) for x in X])))
    elif "method" in exp.raw:
        for spec in exp.runs(seed):
            tr = execute(exp, spec)
            traces.append((f"{spec.method}:seed={spec.seed}:x0={spec.params.x_init.tolist()}", tr.x, tr.f))
    failed = 0
    for label, X, fv in traces:
        v = _verdicts(exp, est, X, fv)
        v["run"] = label
        summary["verdicts"].append(v)
        failed += not (v["value_pass"] and v["iterate_pass"])
        print(
            f"{label}: value {'pass' if v['value_pass'] else 'fail'} (k0={v['value_k0']}, f*={v['f_star']}), "
            f"iterate {'pass' if v['iterate_pass'] else 'fail'} (k0={v['iterate_k0']}, component={v['component']})"
        )
    if traces:
        fh, w = _writer(out / "verdicts.csv")
        with fh:
            keys = ["run", "value_pass", "value_k0", "f_star", "iterate_pass", "iterate_k0", "component", "tail_switches"]
            w.writerow(keys)
            for v in summary["verdicts"]:
                w.writerow([fmt(v[k]) if isinstance(v[k], float) else v[k] for k in keys])
    _dump(out / "landscape_summary.json", summary)
    if strict and failed:
        raise VerdictFailure(f"{failed} of {len(traces)} traces failed a stability verdict")
    return summary


def cmd_figure(exp: Experiment, out: Path, seed: int | None = None, strict: bool = False) -> dict:
    if exp.n != 2:
        raise ConfigError("figures need a 2-D objective")
    fig_cfg = exp.raw.get("figure", {})
    grid = exp.grid
    whole = exp.whole
    fig = Figure(grid.box, fig_cfg.get("size", 600))
    hr = fig_cfg.get("heatmap_resolution", 120)
    t1 = np.linspace(grid.box[0][0], grid.box[0][1], hr + 1)
    t2 = np.linspace(grid.box[1][0], grid.box[1][1], hr + 1)
    c1, c2 = 0.5 * (t1[1:] + t1[:-1]), 0.5 * (t2[1:] + t2[:-1])
    C1, C2 = np.meshgrid(c1, c2, indexing="ij")
    values, _ = batch_value_and_grad(whole, np.column_stack([C1.ravel(), C2.ravel()]))
    fig.heatmap(values.reshape(hr, hr))

    est = scan_critical(exp.model_objective, grid)
    lows = np.array([b[0] for b in grid.box]) + np.argwhere(est.flagged) * grid.cell_size
    fig.cells(lows, grid.cell_size, fig_cfg.get("flagged_color", "#ff3b30"))

    limit = fig_cfg.get("max_polyline_points", 2000)
    summary = {"name": exp.name, "critical_values": est.critical_values, "runs": [], "flows": []}
    if "flow" in exp.raw:
        p = exp.flow_params(1.0)
        for x0 in exp.flow_starts():
            path = integrate(exp.model_objective, x0, p)
            fig.polyline(PolylineLayer(path.points, fig_cfg.get("flow_color", "#ff00ff"), "flow", "trajectory", 2.0), limit)
            summary["flows"].append({"start": np.asarray(x0).tolist(), "end": path.points[-1].tolist()})
    for spec in exp.figure_runs(seed):
        tr = execute(exp, spec)
        v = _verdicts(exp, est, tr.x, tr.f)
        label = spec.label or spec.method
        data = {
            "method": spec.method,
            "seed": spec.seed,
            "alpha": fmt(spec.alpha),
            "epochs": tr.epochs,
            "end-f": fmt(tr.f[-1]),
            "value-verdict": "pass" if v["value_pass"] else "fail",
            "iterate-verdict": "pass" if v["iterate_pass"] else "fail",
            "component": v["component"],
            "f-star": fmt(v["f_star"]),
        }
        fig.polyline(PolylineLayer(tr.x, spec.color or COLORS[spec.method], "iterates", label, 1.2, data), limit)
        summary["runs"].append({"label": label, "end": tr.x[-1].tolist(), **v})
    (out / "figure.svg").write_text(fig.render(exp.name))
    _dump(out / "figure_summary.json", summary)
    print(f"wrote {out / 'figure.svg'}")
    failed = sum(not (r["value_pass"] and r["iterate_pass"]) for r in summary["runs"])
    if strict and failed:
        raise VerdictFailure(f"{failed} figure runs failed a stability verdict")
    return summary


COMMANDS = {"run": cmd_run, "flow": cmd_flow, "shadow": cmd_shadow, "landscape": cmd_landscape, "figure": cmd_figure}


# argument handling -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are configuration errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _u64(s: str) -> int:
    v = int(s, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tamestab", description="Nonsmooth first-order methods, subgradient flows and critical-set checks.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="config JSON path or bundled preset name")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<name>)")
        sp.add_argument("--seed", type=_u64, help="override the permutation seed")
        sp.add_argument("--strict", action="store_true", help="exit 3 when a verdict fails")
        if name == "landscape":
            sp.add_argument("--trace", help="trace CSV to judge instead of running the config's method")
    sub.add_parser("presets", help="list bundled presets")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        print("\n".join(preset_names()))
        return 0
    try:
        exp = load_config(args.config)
        out = _out_dir(args, exp)
        kw = {"trace_csv": args.trace} if args.command == "landscape" else {}
        COMMANDS[args.command](exp, out, args.seed, args.strict, **kw)
    except (ConfigError, UnsupportedStructureError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerdictFailure as e:
        print(f"verdict failure: {e}", file=sys.stderr)
        return EXIT_VERDICT
    return 0


if __name__ == "__main__":
    sys.exit(main())
