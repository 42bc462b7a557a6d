"""Minimal SVG output: heatmap rectangles, polylines, flagged cells."""

from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape, quoteattr

import numpy as np

__all__ = ["Figure", "PolylineLayer", "fmt", "downsample", "heat_color"]

# perceptually ordered anchors (dark blue -> teal -> yellow), interpolated linearly
_ANCHORS = np.array(
    [
        [0.267, 0.005, 0.329],
        [0.229, 0.322, 0.546],
        [0.128, 0.567, 0.551],
        [0.369, 0.789, 0.383],
        [0.993, 0.906, 0.144],
    ]
)


def fmt(v: float) -> str:
    """Round-trip decimal text (17 significant digits)."""
    return format(float(v), ".17g")


def heat_color(t: float) -> str:
    t = min(max(float(t), 0.0), 1.0) * (len(_ANCHORS) - 1)
    j = min(int(t), len(_ANCHORS) - 2)
    rgb = _ANCHORS[j] + (t - j) * (_ANCHORS[j + 1] - _ANCHORS[j])
    r, g, b = (int(round(255 * c)) for c in rgb)
    return f"#{r:02x}{g:02x}{b:02x}"


def downsample(points: np.ndarray, limit: int) -> np.ndarray:
    """At most ``limit`` points, evenly strided, always keeping both endpoints."""
    m = points.shape[0]
    if m <= limit:
        return points
    idx = np.unique(np.round(np.linspace(0, m - 1, limit)).astype(int))
    return points[idx]


@dataclass
class PolylineLayer:
    points: np.ndarray
    color: str
    kind: str  # "iterates" or "flow"
    label: str = ""
    width: float = 1.5
    data: dict = field(default_factory=dict)


class Figure:
    """Square canvas over a 2-D box; x2 grows upward."""

    def __init__(self, box, size: int = 600):
        (self.x_lo, self.x_hi), (self.y_lo, self.y_hi) = box
        self.size = size
        self._body: list[str] = []

    def _px(self, x: float, y: float) -> tuple[float, float]:
        u = (x - self.x_lo) / (self.x_hi - self.x_lo) * self.size
        v = (self.y_hi - y) / (self.y_hi - self.y_lo) * self.size
        return u, v

    def heatmap(self, values: np.ndarray):
        """``values[i, j]`` for cell (i along x1, j along x2); colors use log(1 + f - min)."""
        r1, r2 = values.shape
        z = np.log1p(values - np.nanmin(values))
        span = float(np.nanmax(z)) or 1.0
        w = self.size / r1
        h = self.size / r2
        out = ['<g class="heatmap" shape-rendering="crispEdges">']
        for i in range(r1):
            for j in range(r2):
                x, y = i * w, (r2 - 1 - j) * h
                out.append(
                    f'<rect x="{x:.3f}" y="{y:.3f}" width="{w + 0.01:.3f}" height="{h + 0.01:.3f}" fill="{heat_color(z[i, j] / span)}"/>'
                )
        out.append("</g>")
        self._body.extend(out)

    def cells(self, lows: np.ndarray, size: np.ndarray, color: str, css_class: str = "flagged"):
        out = [f'<g class="{css_class}" fill="{color}" fill-opacity="0.8">']
        for lo in lows:
            u0, v1 = self._px(lo[0], lo[1])
            u1, v0 = self._px(lo[0] + size[0], lo[1] + size[1])
            out.append(f'<rect x="{u0:.3f}" y="{v0:.3f}" width="{u1 - u0:.3f}" height="{v1 - v0:.3f}"/>')
        out.append("</g>")
        self._body.extend(out)

    def polyline(self, layer: PolylineLayer, limit: int = 2000):
        pts = downsample(np.asarray(layer.points, dtype=float), limit)
        coords = " ".join("{:.3f},{:.3f}".format(*self._px(p[0], p[1])) for p in pts)
        first, last = layer.points[0], layer.points[-1]
        attrs = {
            "class": layer.kind,
            "data-label": layer.label,
            "data-start": ",".join(fmt(v) for v in first),
            "data-end": ",".join(fmt(v) for v in last),
            **{f"data-{k}": str(v) for k, v in layer.data.items()},
        }
        extra = " ".join(f"{k}={quoteattr(v)}" for k, v in attrs.items())
        self._body.append(
            f'<polyline {extra} points="{coords}" fill="none" stroke="{layer.color}" stroke-width="{layer.width}" stroke-linejoin="round"/>'
        )

    def render(self, title: str = "") -> str:
        head = (
            '<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.size}" height="{self.size}" '
            f'viewBox="0 0 {self.size} {self.size}">\n'
        )
        t = f"<title>{escape(title)}</title>\n" if title else ""
        return head + t + "\n".join(self._body) + "\n</svg>\n"
