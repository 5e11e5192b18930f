"""Gate-evolution plot written as plain SVG text."""
from __future__ import annotations

from typing import Mapping, Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 360
MARGIN = 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _fmt(v: float) -> str:
    return f"{v:.6f}".rstrip("0").rstrip(".")


def gate_svg(series: Mapping[str, Sequence[tuple[int, float]]], title: str = "confidence gates") -> str:
    """One polyline per named series of (step, value) points.

    The plot maps values linearly from [y_min, y_max] (stored on the root element
    as ``data-y-min``/``data-y-max``) onto the vertical axis, so readers can
    recover values from the point coordinates.
    """
    if not series:
        raise ValueError("no series to plot")
    steps = [s for pts in series.values() for s, _ in pts]
    values = [v for pts in series.values() for _, v in pts]
    if not values:
        raise ValueError("series are empty")
    x_min, x_max = min(steps), max(max(steps), min(steps) + 1)
    y_min, y_max = 0.0, max(0.25, max(values) * 1.1)
    plot_w, plot_h = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN

    def px(step):
        return MARGIN + (step - x_min) / (x_max - x_min) * plot_w

    def py(value):
        return HEIGHT - MARGIN - (value - y_min) / (y_max - y_min) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" data-y-min="{_fmt(y_min)}" data-y-max="{_fmt(y_max)}" '
        f'data-plot-top="{MARGIN}" data-plot-bottom="{HEIGHT - MARGIN}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#999"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        v = y_min + frac * (y_max - y_min)
        out.append(f'<text x="{MARGIN - 6}" y="{py(v) + 4:.1f}" font-size="11" text-anchor="end">{v:.3f}</text>')
    out.append(f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 16}" font-size="11">{x_min}</text>')
    out.append(f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 16}" font-size="11" text-anchor="end">{x_max}</text>')
    out.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" font-size="12" text-anchor="middle">step</text>')
    for k, (name, pts) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        coords = " ".join(f"{px(s):.2f},{py(v):.4f}" for s, v in pts)
        first = _fmt(pts[0][1]) if pts else ""
        out.append(f'<polyline data-series="{escape(name)}" data-first-value="{first}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        out.append(f'<text x="{MARGIN + 8}" y="{MARGIN + 16 + 14 * k}" font-size="12" fill="{color}">'
                   f'{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def polyline_values(svg_text: str) -> dict[str, list[float]]:
    """Invert the vertical mapping of ``gate_svg`` output."""
    import xml.etree.ElementTree as ET
    root = ET.fromstring(svg_text)
    y_min, y_max = float(root.get("data-y-min")), float(root.get("data-y-max"))
    top, bottom = float(root.get("data-plot-top")), float(root.get("data-plot-bottom"))
    out = {}
    for el in root.iter("{http://www.w3.org/2000/svg}polyline"):
        ys = [float(p.split(",")[1]) for p in el.get("points").split()]
        out[el.get("data-series")] = [y_min + (bottom - y) / (bottom - top) * (y_max - y_min) for y in ys]
    return out
