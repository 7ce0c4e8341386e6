"""Minimal self-contained SVG line plots."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _ticks(lo: float, hi: float, count: int = 5) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    raw = (hi - lo) / count
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    return np.arange(np.ceil(lo / step) * step, hi + 1e-12, step)


def line_plot(t, series: dict, title: str = "", ylabel: str = "", hlines: dict | None = None,
              width: int = 720, height: int = 320, max_points: int = 2000) -> str:
    """Render ``series`` (name -> y array over ``t``) as an SVG document."""
    t = np.asarray(t, dtype=float)
    hlines = hlines or {}
    ml, mr, mt, mb = 60, 110, 30, 40
    pw, ph = width - ml - mr, height - mt - mb
    ys = [np.asarray(y, dtype=float) for y in series.values()]
    vals = np.concatenate([y[np.isfinite(y)] for y in ys] + [np.array(list(hlines.values()), dtype=float)])
    y_lo, y_hi = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    t_lo, t_hi = float(t[0]), float(t[-1]) if t[-1] > t[0] else float(t[0]) + 1.0

    def sx(v):
        return ml + (v - t_lo) / (t_hi - t_lo) * pw

    def sy(v):
        return mt + (y_hi - v) / (y_hi - y_lo) * ph

    stride = max(1, len(t) // max_points)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{ml + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for tv in _ticks(t_lo, t_hi, 8):
        out.append(f'<line x1="{sx(tv):.1f}" y1="{mt + ph}" x2="{sx(tv):.1f}" y2="{mt + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{sx(tv):.1f}" y="{mt + ph + 16}" text-anchor="middle">{tv:g}</text>')
    for yv in _ticks(y_lo, y_hi, 5):
        out.append(f'<line x1="{ml}" y1="{sy(yv):.1f}" x2="{ml + pw}" y2="{sy(yv):.1f}" stroke="#eee"/>')
        out.append(f'<text x="{ml - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">t [s]</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')
    for name, val in hlines.items():
        out.append(f'<line x1="{ml}" y1="{sy(val):.1f}" x2="{ml + pw}" y2="{sy(val):.1f}" '
                   f'stroke="#888" stroke-dasharray="5,4"/>')
        out.append(f'<text x="{ml + pw + 4}" y="{sy(val) + 4:.1f}" fill="#666">{escape(name)}</text>')
    for i, (name, y) in enumerate(zip(series, ys)):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(t[::stride], y[::stride]) if np.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        out.append(f'<text x="{ml + pw + 4}" y="{mt + 12 + 14 * i}" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
