"""Static SVG figures: scenario snapshots with terminal traces, and simple line charts."""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from dlon.scenario import Scenario

SVG_NS = "http://www.w3.org/2000/svg"
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _svg(width: int, height: int) -> ET.Element:
    return ET.Element("svg", xmlns=SVG_NS, width=str(width), height=str(height),
                      viewBox=f"0 0 {width} {height}")


def _text(parent, x, y, s, size=12, anchor="start"):
    t = ET.SubElement(parent, "text", x=_fmt(x), y=_fmt(y), attrib={"font-size": str(size), "text-anchor": anchor,
                                                                      "font-family": "sans-serif"})
    t.text = s
    return t


def to_string(root: ET.Element) -> str:
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"


def scenario_svg(scenario: Scenario, geometry=None, traces=None, title: str = "", px_per_m: float = 600.0) -> str:
    """Workspace, obstacles, receptacles with goal arrows, an optional network snapshot and terminal paths.

    ``geometry`` is a ``sim.Geometry``; ``traces`` maps terminal id to an ``(N, 2+)`` array of positions.
    """
    xmin, ymin, xmax, ymax = scenario.workspace
    pad = 30
    w = int(math.ceil((xmax - xmin) * px_per_m)) + 2 * pad
    h = int(math.ceil((ymax - ymin) * px_per_m)) + 2 * pad + 20

    def X(x):
        return pad + (x - xmin) * px_per_m

    def Y(y):
        return h - pad - (y - ymin) * px_per_m

    root = _svg(w, h)
    ET.SubElement(root, "rect", x=_fmt(X(xmin)), y=_fmt(Y(ymax)), width=_fmt((xmax - xmin) * px_per_m),
                  height=_fmt((ymax - ymin) * px_per_m), fill="#fafafa", stroke="#444")
    if title:
        _text(root, w / 2, 18, title, 14, "middle")
    for o in scenario.obstacles:
        ET.SubElement(root, "circle", cx=_fmt(X(o.x)), cy=_fmt(Y(o.y)), r=_fmt(o.radius * px_per_m),
                      fill="#888", stroke="#333")
    for i, r in enumerate(scenario.receptacles):
        col = COLORS[i % len(COLORS)]
        ET.SubElement(root, "circle", cx=_fmt(X(r.pose.x)), cy=_fmt(Y(r.pose.y)), r=_fmt(r.radius * px_per_m),
                      fill="none", stroke=col, attrib={"stroke-width": "2"})
        g = r.goal
        ax, ay = g.x + 0.04 * math.cos(g.theta), g.y + 0.04 * math.sin(g.theta)
        ET.SubElement(root, "line", x1=_fmt(X(g.x)), y1=_fmt(Y(g.y)), x2=_fmt(X(ax)), y2=_fmt(Y(ay)),
                      stroke=col, attrib={"stroke-dasharray": "3,2"})
        _text(root, X(g.x) + 4, Y(g.y) - 4, f"g{i}", 10)
    if traces:
        for t, pts in sorted(traces.items()):
            pts = np.asarray(pts, dtype=float)
            if len(pts) < 2:
                continue
            d = " ".join(f"{_fmt(X(p[0]))},{_fmt(Y(p[1]))}" for p in pts)
            ET.SubElement(root, "polyline", points=d, fill="none", stroke=COLORS[t % len(COLORS)],
                          attrib={"stroke-width": "1.5", "stroke-opacity": "0.8"})
    if geometry is not None:
        for a, b in zip(geometry.prox, geometry.distal):
            ET.SubElement(root, "line", x1=_fmt(X(a[0])), y1=_fmt(Y(a[1])), x2=_fmt(X(b[0])), y2=_fmt(Y(b[1])),
                          stroke="#222", attrib={"stroke-width": "3", "stroke-linecap": "round"})
        for i, p in enumerate(geometry.terminal_poses):
            ET.SubElement(root, "circle", cx=_fmt(X(p[0])), cy=_fmt(Y(p[1])),
                          r=_fmt(scenario.terminal_radius * px_per_m * 0.3), fill=COLORS[i % len(COLORS)])
    _text(root, pad, h - 8, f"workspace {xmax - xmin:.2f} m x {ymax - ymin:.2f} m", 10)
    return to_string(root)


def line_svg(series: dict, xlabel: str, ylabel: str, title: str = "", width: int = 640, height: int = 360,
             hline=None) -> str:
    """Line chart of ``{label: (x, y)}``; ``hline`` draws a dashed reference level."""
    pad_l, pad_r, pad_t, pad_b = 60, 120, 30, 45
    xs = [np.asarray(v[0], float) for v in series.values() if len(v[0])]
    ys = [np.asarray(v[1], float) for v in series.values() if len(v[1])]
    if xs:
        x0, x1 = min(a.min() for a in xs), max(a.max() for a in xs)
        y0, y1 = min(a.min() for a in ys), max(a.max() for a in ys)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if hline is not None:
        y0, y1 = min(y0, hline), max(y1, hline)
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def X(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def Y(y):
        return pad_t + ph - (y - y0) / (y1 - y0) * ph

    root = _svg(width, height)
    ET.SubElement(root, "rect", x=str(pad_l), y=str(pad_t), width=str(pw), height=str(ph), fill="none", stroke="#444")
    if title:
        _text(root, pad_l + pw / 2, 18, title, 14, "middle")
    _text(root, pad_l + pw / 2, height - 8, xlabel, 12, "middle")
    lab = _text(root, 14, pad_t + ph / 2, ylabel, 12, "middle")
    lab.set("transform", f"rotate(-90 14 {_fmt(pad_t + ph / 2)})")
    for frac in (0.0, 0.5, 1.0):
        _text(root, X(x0 + frac * (x1 - x0)), pad_t + ph + 15, f"{x0 + frac * (x1 - x0):.3g}", 10, "middle")
        _text(root, pad_l - 4, Y(y0 + frac * (y1 - y0)) + 4, f"{y0 + frac * (y1 - y0):.3g}", 10, "end")
    if hline is not None:
        ET.SubElement(root, "line", x1=_fmt(X(x0)), y1=_fmt(Y(hline)), x2=_fmt(X(x1)), y2=_fmt(Y(hline)),
                      stroke="#999", attrib={"stroke-dasharray": "4,3"})
    for i, (label, (x, y)) in enumerate(series.items()):
        col = COLORS[i % len(COLORS)]
        x, y = np.asarray(x, float), np.asarray(y, float)
        if len(x) >= 2:
            d = " ".join(f"{_fmt(X(a))},{_fmt(Y(b))}" for a, b in zip(x, y))
            ET.SubElement(root, "polyline", points=d, fill="none", stroke=col, attrib={"stroke-width": "1.5"})
        ly = pad_t + 14 + 16 * i
        ET.SubElement(root, "line", x1=str(width - pad_r + 8), y1=str(ly - 4), x2=str(width - pad_r + 24),
                      y2=str(ly - 4), stroke=col, attrib={"stroke-width": "2"})
        _text(root, width - pad_r + 28, ly, str(label), 10)
    return to_string(root)


def write(path, svg: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg)
    return path
