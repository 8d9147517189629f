"""Static SVG figures for the report directory: error grid scatter, box plot, line chart.

Interactive versions of the same figures live in the Streamlit page; these
are built with xml.etree so the CLI needs no plotting backend.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

WIDTH = 480
HEIGHT = 480
MARGIN = 50
GRID_MAX = 400.0
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
    "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31",
)

# Boundary segments of each Clarke zone in (reference, prediction) mg/dL,
# plus the point where the zone's label is drawn.
ZONE_BOUNDARIES: Mapping[str, tuple[list[tuple[tuple[float, float], ...]], tuple[float, float]]] = {
    "A": (
        [
            ((0, 70), (175 / 3, 70), (400 / 1.2, 400)),
            ((70, 0), (70, 56), (400, 320)),
        ],
        (330, 350),
    ),
    "B": ([((0, 0), (400, 400))], (370, 260)),
    "C": (
        [
            ((70, 180), (290, 400)),
            ((130, 0), (180, 70)),
        ],
        (160, 370),
    ),
    "D": (
        [
            ((240, 70), (240, 180), (400, 180)),
            ((0, 180), (70, 180), (70, 400)),
        ],
        (30, 120),
    ),
    "E": (
        [
            ((180, 0), (180, 70), (400, 70)),
        ],
        (30, 300),
    ),
}


def _svg_root(width: int = WIDTH, height: int = HEIGHT) -> ET.Element:
    root = ET.Element(
        "svg",
        xmlns="http://www.w3.org/2000/svg",
        width=str(width),
        height=str(height),
        viewBox=f"0 0 {width} {height}",
    )
    ET.SubElement(root, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    return root


def _text(parent: ET.Element, x: float, y: float, content: str, **attrs: str) -> ET.Element:
    node = ET.SubElement(parent, "text", x=f"{x:.2f}", y=f"{y:.2f}", **attrs)
    node.text = content
    return node


class _Axes:
    """Linear data → pixel mapping for the plotting rectangle."""

    def __init__(self, x_range: tuple[float, float], y_range: tuple[float, float]) -> None:
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range

    def px(self, x: float) -> float:
        span = (self.x1 - self.x0) or 1.0
        return MARGIN + (x - self.x0) / span * (WIDTH - 2 * MARGIN)

    def py(self, y: float) -> float:
        span = (self.y1 - self.y0) or 1.0
        return HEIGHT - MARGIN - (y - self.y0) / span * (HEIGHT - 2 * MARGIN)

    def frame(self, root: ET.Element, title: str, x_label: str, y_label: str) -> None:
        ET.SubElement(
            root,
            "rect",
            x=str(MARGIN),
            y=str(MARGIN),
            width=str(WIDTH - 2 * MARGIN),
            height=str(HEIGHT - 2 * MARGIN),
            fill="none",
            stroke="black",
        )
        _text(root, WIDTH / 2, MARGIN / 2, title, **{"text-anchor": "middle", "font-size": "14"})
        _text(root, WIDTH / 2, HEIGHT - 12, x_label, **{"text-anchor": "middle", "font-size": "12"})
        _text(
            root,
            14,
            HEIGHT / 2,
            y_label,
            **{"text-anchor": "middle", "font-size": "12", "transform": f"rotate(-90 14 {HEIGHT / 2})"},
        )
        for k in range(5):
            xv = self.x0 + k * (self.x1 - self.x0) / 4
            yv = self.y0 + k * (self.y1 - self.y0) / 4
            _text(root, self.px(xv), HEIGHT - MARGIN + 15, f"{xv:g}", **{"text-anchor": "middle", "font-size": "10"})
            _text(root, MARGIN - 5, self.py(yv) + 3, f"{yv:.3g}", **{"text-anchor": "end", "font-size": "10"})


def ega_scatter_svg(reference: Sequence[float], predicted: Sequence[float], title: str) -> str:
    """Clarke error grid: zone boundaries, five labeled zone groups and one dot per prediction."""
    root = _svg_root()
    axes = _Axes((0.0, GRID_MAX), (0.0, GRID_MAX))
    axes.frame(root, title, "Reference BG (mg/dL)", "Predicted BG (mg/dL)")
    for zone, (segments, (lx, ly)) in ZONE_BOUNDARIES.items():
        group = ET.SubElement(root, "g", {"class": "zone", "data-zone": zone})
        for segment in segments:
            points = " ".join(f"{axes.px(x):.2f},{axes.py(y):.2f}" for x, y in segment)
            ET.SubElement(
                group,
                "polyline",
                points=points,
                fill="none",
                stroke="black" if zone != "B" else "gray",
                **({"stroke-dasharray": "4 3"} if zone == "B" else {}),
            )
        _text(group, axes.px(lx), axes.py(ly), zone, **{"font-size": "16", "font-weight": "bold"})
    dots = ET.SubElement(root, "g", {"class": "predictions"})
    for ref, pred in zip(reference, predicted):
        x = min(max(float(ref), 0.0), GRID_MAX)
        y = min(max(float(pred), 0.0), GRID_MAX)
        ET.SubElement(dots, "circle", cx=f"{axes.px(x):.2f}", cy=f"{axes.py(y):.2f}", r="3", fill=PALETTE[0])
    return ET.tostring(root, encoding="unicode")


def box_plot_svg(groups: Mapping[str, Sequence[float]], title: str, y_label: str) -> str:
    """One box (quartiles, 1.5·IQR whiskers) per group, in mapping order."""
    root = _svg_root()
    values = [v for series in groups.values() for v in series if math.isfinite(v)]
    top = max(values) if values else 1.0
    axes = _Axes((0.0, float(max(len(groups), 1))), (0.0, top * 1.05 or 1.0))
    axes.frame(root, title, "Module", y_label)
    slot = (WIDTH - 2 * MARGIN) / max(len(groups), 1)
    for k, (name, series) in enumerate(groups.items()):
        data = np.asarray([v for v in series if math.isfinite(v)], float)
        centre = MARGIN + (k + 0.5) * slot
        group = ET.SubElement(root, "g", {"class": "box", "data-module": name})
        _text(group, centre, HEIGHT - MARGIN + 28, name, **{"text-anchor": "middle", "font-size": "9"})
        if data.size == 0:
            continue
        q1, median, q3 = np.percentile(data, [25, 50, 75])
        iqr = q3 - q1
        low = data[data >= q1 - 1.5 * iqr].min()
        high = data[data <= q3 + 1.5 * iqr].max()
        half = slot * 0.3
        colour = PALETTE[k % len(PALETTE)]
        ET.SubElement(group, "line", x1=f"{centre:.2f}", x2=f"{centre:.2f}", y1=f"{axes.py(low):.2f}", y2=f"{axes.py(high):.2f}", stroke="black")
        ET.SubElement(
            group,
            "rect",
            x=f"{centre - half:.2f}",
            y=f"{axes.py(q3):.2f}",
            width=f"{2 * half:.2f}",
            height=f"{max(axes.py(q1) - axes.py(q3), 0.5):.2f}",
            fill=colour,
            stroke="black",
            **{"fill-opacity": "0.6"},
        )
        ET.SubElement(group, "line", x1=f"{centre - half:.2f}", x2=f"{centre + half:.2f}", y1=f"{axes.py(median):.2f}", y2=f"{axes.py(median):.2f}", stroke="black")
        for outlier in data[(data < low) | (data > high)]:
            ET.SubElement(group, "circle", cx=f"{centre:.2f}", cy=f"{axes.py(outlier):.2f}", r="2", fill="none", stroke=colour)
    return ET.tostring(root, encoding="unicode")


def line_chart_svg(
    series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str, y_label: str
) -> str:
    root = _svg_root()
    xs = [x for x_values, _ in series.values() for x in x_values]
    ys = [y for _, y_values in series.values() for y in y_values if math.isfinite(y)]
    axes = _Axes(
        (min(xs, default=0.0), max(xs, default=1.0)),
        (0.0, max(ys, default=1.0) * 1.05 or 1.0),
    )
    axes.frame(root, title, "Epoch", y_label)
    for k, (name, (x_values, y_values)) in enumerate(series.items()):
        colour = PALETTE[k % len(PALETTE)]
        group = ET.SubElement(root, "g", {"class": "series", "data-name": name})
        points = " ".join(
            f"{axes.px(x):.2f},{axes.py(y):.2f}" for x, y in zip(x_values, y_values) if math.isfinite(y)
        )
        ET.SubElement(group, "polyline", points=points, fill="none", stroke=colour)
        _text(group, WIDTH - MARGIN + 4, MARGIN + 12 * (k + 1), name, fill=colour, **{"font-size": "9"})
    return ET.tostring(root, encoding="unicode")


def write_svg(content: str, path: str | Path) -> None:
    Path(path).write_text(content, encoding="utf-8")
