"""Experiment configuration: JSON documents validated against a closed schema."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .expr import Expr, SumFunction, parse
from .flow import FlowParams, multiplicative_constant
from .landscape import Grid
from .methods import MomentumParams
from .subdiff import SelectionRule

__all__ = ["ConfigError", "SCHEMA", "Experiment", "load_config", "preset_names", "preset_path"]


class ConfigError(ValueError):
    pass


_num = {"type": "number"}
_point = {"type": "array", "items": _num, "minItems": 1}
_box = {
    "type": "array",
    "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
    "minItems": 1,
}
_seed = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}
_rule = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "abs_at_zero": {"enum": ["zero", "left", "right"]},
        "tie": {"enum": ["first_child", "mean_of_argmax", "min_norm"]},
    },
}
_method_props = {
    "name": {"enum": ["momentum", "reshuffle", "cyclic_cd"]},
    "alpha": {"oneOf": [{"type": "number", "exclusiveMinimum": 0}, {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1}]},
    "beta": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
    "gamma": _num,
    "delta": {"type": "number", "exclusiveMinimum": 0},
    "epochs": {"type": "integer", "minimum": 1},
    "seed": _seed,
    "x0": _point,
    "x_prev": _point,
    "selection": _rule,
    "allow_nonsmooth": {"type": "boolean"},
    "displacement_radius": {"type": "number", "exclusiveMinimum": 0},
    "batch": {
        "type": "object",
        "additionalProperties": False,
        "required": ["runs"],
        "properties": {"runs": {"type": "integer", "minimum": 1}, "start_box": _box, "start_seed": _seed},
    },
}
_method = {"type": "object", "additionalProperties": False, "required": ["name", "alpha"], "properties": _method_props}
_figure_run = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "alpha", "x0"],
    "properties": {**{k: v for k, v in _method_props.items() if k != "batch"}, "color": {"type": "string"}, "label": {"type": "string"}},
}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["objective"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "objective": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dimension"],
            "anyOf": [{"required": ["expression"]}, {"required": ["components"]}],
            "properties": {
                "expression": {"type": "string"},
                "components": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "average": {"type": "boolean"},
                "dimension": {"type": "integer", "minimum": 1},
            },
        },
        "method": _method,
        "flow": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "c": {"type": "number", "exclusiveMinimum": 0},
                "T": {"type": "number", "exclusiveMinimum": 0},
                "h": {"type": "number", "exclusiveMinimum": 0},
                "stop_tol": {"type": "number", "minimum": 0},
                "kink_tol": {"type": "number", "minimum": 0},
                "kbar": {"type": "integer", "minimum": 0},
                "starts": {"type": "array", "items": _point, "minItems": 1},
            },
        },
        "landscape": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "box": _box,
                "resolution": {"type": "integer", "minimum": 2},
                "crit_tol": {"type": "number", "minimum": 0},
            },
        },
        "verdict": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "tail_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "figure": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "heatmap_resolution": {"type": "integer", "minimum": 2},
                "size": {"type": "integer", "minimum": 50},
                "runs": {"type": "array", "items": _figure_run},
                "flow_color": {"type": "string"},
                "flagged_color": {"type": "string"},
                "max_polyline_points": {"type": "integer", "minimum": 2},
            },
        },
        "output": {"type": "string"},
    },
}

PRESET_PACKAGE = "tamestab.presets"


def preset_names() -> list[str]:
    root = resources.files(PRESET_PACKAGE)
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def preset_path(name: str):
    p = resources.files(PRESET_PACKAGE) / f"{name}.json"
    if not p.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return p


def _rule(d: dict | None) -> SelectionRule:
    d = d or {}
    return SelectionRule(d.get("abs_at_zero", "zero"), d.get("tie", "first_child"))


@dataclass
class RunSpec:
    """One method run resolved from a config block."""

    method: str
    params: MomentumParams
    epochs: int
    seed: int
    rule: SelectionRule
    allow_nonsmooth: bool
    displacement_radius: float | None
    color: str | None = None
    label: str | None = None

    @property
    def alpha(self) -> float:
        return self.params.alpha

    def constant(self, N: int) -> float:
        return multiplicative_constant(self.method, self.params.beta, N)


class Experiment:
    """A validated configuration with its objective parsed."""

    def __init__(self, raw: dict, source: str = "<config>"):
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as e:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"{source}: {where}: {e.message}") from None
        self.raw = raw
        self.source = source
        self.name = raw.get("name", Path(source).stem)
        obj = raw["objective"]
        n = obj["dimension"]
        self.n = n
        try:
            self.components = [parse(c, n) for c in obj.get("components", [])]
            self.expression: Expr | None = parse(obj["expression"], n) if "expression" in obj else None
        except ValueError as e:
            raise ConfigError(f"{source}: objective: {e}") from None
        self.sum = SumFunction(self.components, n, average=obj.get("average", True)) if self.components else None
        try:
            self._check_points()
            self.grid = Grid(**self._landscape_kwargs())
        except ValueError as e:
            raise ConfigError(f"{source}: {e}") from None

    def _check_points(self):
        pts = []
        m = self.raw.get("method", {})
        pts += [m.get("x0"), m.get("x_prev")]
        pts += self.raw.get("flow", {}).get("starts", [])
        pts += [r.get("x0") for r in self.raw.get("figure", {}).get("runs", [])]
        for p in pts:
            if p is not None and len(p) != self.n:
                raise ValueError(f"point {p} does not have dimension {self.n}")
        for key in ("landscape",):
            box = self.raw.get(key, {}).get("box")
            if box is not None and len(box) != self.n:
                raise ValueError("landscape box dimension mismatch")

    def _landscape_kwargs(self) -> dict:
        ls = self.raw.get("landscape", {})
        kw = {}
        if "box" in ls:
            kw["box"] = tuple(tuple(b) for b in ls["box"])
        elif self.n != 2:
            return {"box": tuple((-2.0, 2.0) for _ in range(self.n))}
        for k in ("resolution", "crit_tol"):
            if k in ls:
                kw[k] = ls[k]
        return kw

    # objectives -------------------------------------------------------
    @property
    def whole(self) -> Expr:
        """Single-expression objective (explicit expression, else the averaged component sum)."""
        return self.expression if self.expression is not None else self.sum.as_expr()

    def objective_for(self, method: str):
        if method == "reshuffle":
            if self.sum is None:
                return SumFunction([self.expression], self.n)
            return self.sum
        return self.whole

    @property
    def model_objective(self):
        """Objective whose subdifferential model defines ``min_norm_distance``: the component sum if given."""
        return self.sum if self.sum is not None else self.expression

    # methods -----------------------------------------------------------
    def _spec(self, m: dict, alpha: float, x0, seed_override: int | None = None) -> RunSpec:
        try:
            params = MomentumParams(
                alpha=alpha,
                x_init=np.asarray(x0, dtype=float),
                beta=m.get("beta", 0.0),
                gamma=m.get("gamma", 0.0),
                delta=m.get("delta", 1.0),
                x_prev_init=None if m.get("x_prev") is None else np.asarray(m["x_prev"], dtype=float),
            )
            rule = _rule(m.get("selection"))
        except ValueError as e:
            raise ConfigError(f"{self.source}: method: {e}") from None
        return RunSpec(
            method=m["name"],
            params=params,
            epochs=m.get("epochs", 100),
            seed=seed_override if seed_override is not None else m.get("seed", 0),
            rule=rule,
            allow_nonsmooth=m.get("allow_nonsmooth", False),
            displacement_radius=m.get("displacement_radius"),
            color=m.get("color"),
            label=m.get("label"),
        )

    @property
    def method(self) -> dict:
        if "method" not in self.raw:
            raise ConfigError(f"{self.source}: this command needs a 'method' block")
        return self.raw["method"]

    def alphas(self) -> list[float]:
        a = self.method["alpha"]
        return [float(v) for v in a] if isinstance(a, list) else [float(a)]

    def runs(self, seed_override: int | None = None) -> list[RunSpec]:
        """Runs for ``run``: one per batch member (or a single run) at the first step size."""
        m = self.method
        alpha = self.alphas()[0]
        batch = m.get("batch")
        if batch is None:
            if "x0" not in m:
                raise ConfigError(f"{self.source}: method.x0 is required")
            return [self._spec(m, alpha, m["x0"], seed_override)]
        box = np.asarray(batch.get("start_box", self.grid.box), dtype=float)
        if box.shape[0] != self.n:
            raise ConfigError(f"{self.source}: batch start_box dimension mismatch")
        base = seed_override if seed_override is not None else m.get("seed", 0)
        rng = np.random.default_rng(batch.get("start_seed", 0))
        starts = rng.uniform(box[:, 0], box[:, 1], size=(batch["runs"], self.n))
        return [self._spec(m, alpha, s, base + j) for j, s in enumerate(starts)]

    def sweep(self, seed_override: int | None = None) -> list[RunSpec]:
        m = self.method
        if "x0" not in m:
            raise ConfigError(f"{self.source}: method.x0 is required")
        return [self._spec(m, a, m["x0"], seed_override) for a in self.alphas()]

    def figure_runs(self, seed_override: int | None = None) -> list[RunSpec]:
        return [self._spec(r, r["alpha"], r["x0"], seed_override) for r in self.raw.get("figure", {}).get("runs", [])]

    # flows / verdicts ----------------------------------------------------
    def flow_params(self, c: float | None = None) -> FlowParams:
        fl = self.raw.get("flow", {})
        try:
            return FlowParams(
                c=fl.get("c", c if c is not None else 1.0),
                T=fl.get("T", 1.0),
                h=fl.get("h"),
                stop_tol=fl.get("stop_tol", 1e-9),
                kink_tol=fl.get("kink_tol", 1e-9),
            )
        except ValueError as e:
            raise ConfigError(f"{self.source}: flow: {e}") from None

    def flow_starts(self) -> list[np.ndarray]:
        fl = self.raw.get("flow", {})
        if "starts" in fl:
            return [np.asarray(s, dtype=float) for s in fl["starts"]]
        if "x0" in self.raw.get("method", {}):
            return [np.asarray(self.raw["method"]["x0"], dtype=float)]
        raise ConfigError(f"{self.source}: flow.starts (or method.x0) is required")

    @property
    def epsilon(self) -> float:
        return self.raw.get("verdict", {}).get("epsilon", 0.05)

    @property
    def tail_fraction(self) -> float:
        return self.raw.get("verdict", {}).get("tail_fraction", 0.5)

    def with_overrides(self, **kw) -> "Experiment":
        raw = copy.deepcopy(self.raw)
        raw.update(kw)
        return Experiment(raw, self.source)


def load_config(path_or_preset: str | Path) -> Experiment:
    """Load a config file, or a bundled preset by name."""
    p = Path(path_or_preset)
    if p.suffix != ".json" and not p.exists():
        src = preset_path(str(path_or_preset))
        text = src.read_text()
        source = f"preset:{path_or_preset}"
    else:
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read {p}: {e.strerror}") from None
        source = str(p)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: invalid JSON at line {e.lineno}: {e.msg}") from None
    return Experiment(raw, source)
