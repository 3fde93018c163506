"""Tiny SVG renderers for the summary charts. CSV stays the canonical output."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _doc(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>\n"])


def line_chart(series: dict[str, Sequence[float]], title: str, xlabel: str = "step",
               ylabel: str = "", width: int = 480, height: int = 320) -> str:
    """One polyline per series; x runs 1..len(values)."""
    left, right, top, bottom = 56, 16, 28, 40
    pw, ph = width - left - right, height - top - bottom
    vals = np.concatenate([np.asarray(v, dtype=float) for v in series.values()]) if series else np.zeros(1)
    vals = vals[np.isfinite(vals)]
    lo, hi = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    n = max((len(v) for v in series.values()), default=1)

    def px(i: int) -> float:
        return left + (pw * (i / (n - 1)) if n > 1 else pw / 2)

    def py(y: float) -> float:
        return top + ph * (1.0 - (y - lo) / (hi - lo))

    body = [f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
            f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for i in range(n):
        body.append(f'<text x="{px(i):.1f}" y="{top + ph + 14}" text-anchor="middle">{i + 1}</text>')
    for y in np.linspace(lo, hi, 5):
        body.append(f'<text x="{left - 4}" y="{py(y) + 4:.1f}" text-anchor="end">{y:.3g}</text>')
    body.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        body.append(f'<text x="12" y="{top + ph / 2:.1f}" text-anchor="middle" '
                    f'transform="rotate(-90 12 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for s, (name, values) in enumerate(series.items()):
        colour = _PALETTE[s % len(_PALETTE)]
        pts = [(px(i), py(v)) for i, v in enumerate(values) if np.isfinite(v)]
        if pts:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
            body.append(f'<polyline points="{path}" fill="none" stroke="{colour}" stroke-width="2"/>')
            body += [f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{colour}"/>' for x, y in pts]
        body.append(f'<text x="{left + 8}" y="{top + 12 + 13 * s}" fill="{colour}">{escape(name)}</text>')
    return _doc(width, height, body)


def heatmap(grid: np.ndarray, row_labels: Sequence, col_labels: Sequence, title: str,
            row_name: str = "token", col_name: str = "task", cell: int = 40) -> str:
    """Grayscale-to-blue heatmap of values in [0, 1], annotated with the value."""
    grid = np.asarray(grid, dtype=float)
    rows, cols = grid.shape
    left, top = 64, 44
    width, height = left + cols * cell + 16, top + rows * cell + 16
    body = [f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
            f'<text x="{left + cols * cell / 2:.1f}" y="30" text-anchor="middle">{escape(col_name)}</text>',
            f'<text x="10" y="{top + rows * cell / 2:.1f}" text-anchor="middle" '
            f'transform="rotate(-90 10 {top + rows * cell / 2:.1f})">{escape(row_name)}</text>']
    for j, lab in enumerate(col_labels):
        body.append(f'<text x="{left + (j + 0.5) * cell:.1f}" y="{top - 4}" text-anchor="middle">{escape(str(lab))}</text>')
    for i, lab in enumerate(row_labels):
        body.append(f'<text x="{left - 6}" y="{top + (i + 0.5) * cell + 4:.1f}" text-anchor="end">{escape(str(lab))}</text>')
        for j in range(cols):
            v = grid[i, j]
            shade = 0.0 if not np.isfinite(v) else min(max(v, 0.0), 1.0)
            r, g = int(255 * (1 - shade)), int(255 * (1 - 0.6 * shade))
            ink = "white" if shade > 0.6 else "black"
            x, y = left + j * cell, top + i * cell
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({r},{g},255)" stroke="white"/>')
            body.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" fill="{ink}">{v:.2f}</text>')
    return _doc(width, height, body)
