"""Deterministic SVG rendering of benchmark results.

Hand-built SVG text rather than a plotting library so identical inputs
produce byte-identical files. Two plot kinds: KL-vs-parameter series
(median line per model kind plus per-seed points) and per-method timing
box plots.
"""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import NoDataError, SchemaError

_W, _H = 640, 440
_ML, _MR, _MT, _MB = 70, 20, 30, 55
_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _fmt(v: float) -> str:
    return f"{v:.6g}"


class _Canvas:
    def __init__(self, title: str):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2:g}" y="20" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{escape(title)}</text>',
        ]

    def line(self, x1, y1, x2, y2, color="#333", width=1.0):
        self.parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{color}" stroke-width="{_fmt(width)}"/>'
        )

    def polyline(self, pts, color):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in pts)
        self.parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )

    def circle(self, x, y, r, color, opacity=1.0):
        self.parts.append(
            f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r)}" fill="{color}" '
            f'fill-opacity="{_fmt(opacity)}"/>'
        )

    def rect(self, x, y, w, h, color):
        self.parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" height="{_fmt(h)}" '
            f'fill="{color}" fill-opacity="0.5" stroke="{color}"/>'
        )

    def text(self, x, y, s, size=11, anchor="middle", color="#000"):
        self.parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" text-anchor="{anchor}" '
            f'font-family="sans-serif" font-size="{size}" fill="{color}">{escape(s)}</text>'
        )

    def render(self) -> str:
        return "\n".join([*self.parts, "</svg>"]) + "\n"


def _axis_scales(xs, ys, log_x):
    xlo, xhi = min(xs), max(xs)
    ylo, yhi = min(ys), max(ys)
    ylo = min(ylo, 0.0)
    if log_x:
        xlo, xhi = np.log10(xlo), np.log10(xhi)
    if xhi == xlo:
        xhi = xlo + 1.0
    if yhi == ylo:
        yhi = ylo + 1.0
    pad = 0.05 * (yhi - ylo)
    ylo, yhi = ylo - pad, yhi + pad

    def px(v):
        t = (np.log10(v) if log_x else v)
        return _ML + (t - xlo) / (xhi - xlo) * (_W - _ML - _MR)

    def py(v):
        return _H - _MB - (v - ylo) / (yhi - ylo) * (_H - _MT - _MB)

    return px, py, (xlo, xhi, ylo, yhi)


def render_kl_plot(rows: list[dict], x_key: str, out_path: str | Path, title: str = "") -> None:
    """Median KL vs one swept parameter, one series per model kind, with
    per-seed points. x axis is log-scaled when the values span a decade."""
    if not rows:
        raise NoDataError("no rows to plot")
    if x_key not in rows[0]:
        raise SchemaError(f"unknown sweep column {x_key!r}", x_key)
    xs = [float(r[x_key]) for r in rows]
    ys = [float(r["kl_upper"]) for r in rows]
    if any(not np.isfinite(v) for v in ys):
        rows = [r for r in rows if np.isfinite(float(r["kl_upper"]))]
        if not rows:
            raise NoDataError("all KL values are non-finite")
        xs = [float(r[x_key]) for r in rows]
        ys = [float(r["kl_upper"]) for r in rows]
    log_x = min(xs) > 0 and max(xs) / min(xs) >= 10
    px, py, (xlo, xhi, ylo, yhi) = _axis_scales(xs, ys, log_x)
    c = _Canvas(title or f"KL upper bound vs {x_key}")
    c.line(_ML, _H - _MB, _W - _MR, _H - _MB)
    c.line(_ML, _MT, _ML, _H - _MB)
    for frac in (0.0, 0.5, 1.0):
        yv = ylo + frac * (yhi - ylo)
        c.text(_ML - 8, py(yv) + 4, _fmt(yv), anchor="end")
    for xv in sorted(set(xs)):
        c.text(px(xv), _H - _MB + 16, _fmt(xv))
        c.line(px(xv), _H - _MB, px(xv), _H - _MB + 4)
    c.text(_W / 2, _H - 12, x_key)
    c.text(16, _H / 2, "KL (nats)", anchor="middle")
    kinds = sorted({str(r["kind"]) for r in rows})
    for ki, kind in enumerate(kinds):
        color = _PALETTE[ki % len(_PALETTE)]
        sub = [r for r in rows if str(r["kind"]) == kind]
        for r in sub:
            c.circle(px(float(r[x_key])), py(float(r["kl_upper"])), 2.4, color, 0.45)
        medians = []
        for xv in sorted({float(r[x_key]) for r in sub}):
            vals = [float(r["kl_upper"]) for r in sub if float(r[x_key]) == xv]
            medians.append((px(xv), py(float(np.median(vals)))))
        if len(medians) > 1:
            c.polyline(medians, color)
        c.text(_W - _MR - 4, _MT + 14 + 14 * ki, kind, anchor="end", color=color)
    Path(out_path).write_text(c.render())


def render_timing_plot(
    rows: list[dict], out_path: str | Path, title: str = "Per-sample wall time"
) -> None:
    """Box plot (quartiles, min/max whiskers) of wall time per method."""
    if not rows:
        raise NoDataError("no rows to plot")
    methods = sorted({str(r["method"]) for r in rows})
    data = {
        m: np.array([float(r["wall_time_s"]) for r in rows if str(r["method"]) == m])
        for m in methods
    }
    hi = max(a.max() for a in data.values())
    c = _Canvas(title)

    def py(v):
        return _H - _MB - v / (1.1 * hi) * (_H - _MT - _MB)

    c.line(_ML, _H - _MB, _W - _MR, _H - _MB)
    c.line(_ML, _MT, _ML, _H - _MB)
    for frac in (0.0, 0.5, 1.0):
        yv = frac * 1.1 * hi
        c.text(_ML - 8, py(yv) + 4, _fmt(yv), anchor="end")
    c.text(16, _H / 2, "seconds", anchor="middle")
    slot = (_W - _ML - _MR) / max(len(methods), 1)
    for mi, m in enumerate(methods):
        a = np.sort(data[m])
        q1, q2, q3 = np.percentile(a, [25, 50, 75])
        cx = _ML + (mi + 0.5) * slot
        color = _PALETTE[mi % len(_PALETTE)]
        c.line(cx, py(a[0]), cx, py(q1), color)
        c.line(cx, py(q3), cx, py(a[-1]), color)
        c.rect(cx - 0.25 * slot, py(q3), 0.5 * slot, py(q1) - py(q3), color)
        c.line(cx - 0.25 * slot, py(q2), cx + 0.25 * slot, py(q2), color, 2.0)
        c.text(cx, _H - _MB + 16, m)
    Path(out_path).write_text(c.render())
