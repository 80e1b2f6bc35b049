"""Minimal deterministic SVG line charts.

Output depends only on the input values: fixed canvas, fixed palette, fixed
number formatting and series drawn in sorted label order.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 70, "right": 150, "top": 40, "bottom": 50}
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


def _num(v: float) -> str:
    return f"{v:.2f}"


def _tick(v: float) -> str:
    return f"{v:.4g}"


def _range(values) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    return lo, hi


def line_chart(series: dict[str, list[tuple[float, float]]], title: str = "", xlabel: str = "",
               ylabel: str = "", n_ticks: int = 5) -> str:
    """One polyline per label; points are sorted by x before drawing."""
    pts = [(x, y) for s in series.values() for x, y in s if math.isfinite(x) and math.isfinite(y)]
    x_lo, x_hi = _range([p[0] for p in pts]) if pts else (0.0, 1.0)
    y_lo, y_hi = _range([p[1] for p in pts]) if pts else (0.0, 1.0)
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return MARGIN["left"] + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return MARGIN["top"] + (1 - (y - y_lo) / (y_hi - y_lo)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="22.00" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{escape(title)}</text>',
    ]
    x0, y0 = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{MARGIN["top"]}" x2="{x0}" y2="{y0}" stroke="black"/>')
    for i in range(n_ticks):
        f = i / (n_ticks - 1)
        xv, yv = x_lo + f * (x_hi - x_lo), y_lo + f * (y_hi - y_lo)
        out.append(f'<text x="{_num(sx(xv))}" y="{y0 + 18}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="10">{_tick(xv)}</text>')
        out.append(f'<text x="{x0 - 6}" y="{_num(sy(yv) + 3)}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{_tick(yv)}</text>')
    out.append(f'<text x="{_num(x0 + pw / 2)}" y="{HEIGHT - 10}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{_num(MARGIN["top"] + ph / 2)}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12" transform="rotate(-90 14 {_num(MARGIN["top"] + ph / 2)})">{escape(ylabel)}</text>')
    for i, label in enumerate(sorted(series)):
        color = PALETTE[i % len(PALETTE)]
        line = sorted((x, y) for x, y in series[label] if math.isfinite(x) and math.isfinite(y))
        if line:
            coords = " ".join(f"{_num(sx(x))},{_num(sy(y))}" for x, y in line)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
            for x, y in line:
                out.append(f'<circle cx="{_num(sx(x))}" cy="{_num(sy(y))}" r="2.5" fill="{color}"/>')
        ly = MARGIN["top"] + 16 * i
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly + 4}" font-family="sans-serif" font-size="11">'
                   f'{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def series_from_rows(rows: list[dict], x: str = "steps", y: str = "score", key: str = "solver"):
    """Mean ``y`` per (key, x) over rows whose x and y parse as numbers."""
    acc: dict[str, dict[float, list[float]]] = {}
    for r in rows:
        try:
            xv, yv = float(r[x]), float(r[y])
        except (KeyError, TypeError, ValueError):
            continue
        if r.get("seed", "x") == "":
            continue  # aggregate rows
        acc.setdefault(str(r.get(key, "")), {}).setdefault(xv, []).append(yv)
    return {k: [(xv, sum(v) / len(v)) for xv, v in sorted(d.items())] for k, d in acc.items()}
