"""Self-contained SVG line charts and heatmaps (no external assets or fonts)."""

from __future__ import annotations

import math
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
W, H = 640, 420
MARGIN = {"left": 70, "right": 150, "top": 40, "bottom": 50}


def _fmt(v: float) -> str:
    if v == 0 or not math.isfinite(v):
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.1e}"
    return f"{v:.3g}"


def line_chart(series: Sequence[dict], title: str = "", xlabel: str = "", ylabel: str = "",
               log_y: bool = False) -> str:
    """Each series is ``{"label", "x", "y", "dashed"?}``; one polyline per series."""
    xs_all = np.concatenate([np.asarray(s["x"], dtype=float) for s in series]) if series else np.zeros(1)
    ys_all = np.concatenate([np.asarray(s["y"], dtype=float) for s in series]) if series else np.zeros(1)
    if log_y:
        ys_all = np.log10(np.maximum(ys_all, 1e-300))
    finite = np.isfinite(ys_all)
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = (float(ys_all[finite].min()), float(ys_all[finite].max())) if finite.any() else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw = W - MARGIN["left"] - MARGIN["right"]
    ph = H - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
           f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for j in range(5):
        fx = x0 + (x1 - x0) * j / 4
        fy = y0 + (y1 - y0) * j / 4
        ylab = _fmt(10 ** fy) if log_y else _fmt(fy)
        out.append(f'<text x="{px(fx):.1f}" y="{H - MARGIN["bottom"] + 18}" text-anchor="middle" '
                   f'font-size="11">{_fmt(fx)}</text>')
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{py(fy) + 4:.1f}" text-anchor="end" '
                   f'font-size="11">{ylab}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2}" y="{H - 10}" text-anchor="middle" '
               f'font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2})">{escape(ylabel)}</text>')
    for idx, s in enumerate(series):
        color = s.get("color", PALETTE[idx % len(PALETTE)])
        xs = np.asarray(s["x"], dtype=float)
        ys = np.asarray(s["y"], dtype=float)
        if log_y:
            ys = np.log10(np.maximum(ys, 1e-300))
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys) if math.isfinite(y))
        dash = ' stroke-dasharray="6,4"' if s.get("dashed") else ""
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{pts}"/>')
        ly = MARGIN["top"] + 14 + 18 * idx
        lx = W - MARGIN["right"] + 10
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}"{dash}/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}" font-size="11">{escape(str(s.get("label", "")))}</text>')
    out.append("</svg>")
    return "\n".join(out)


def gray_level(value: float, vmin: float = 0.0, vmax: float = 1.0) -> int:
    """Grayscale ramp: ``vmin`` maps to white (255) and ``vmax`` to black (0), linearly."""
    t = 0.0 if vmax == vmin else (value - vmin) / (vmax - vmin)
    t = min(max(t, 0.0), 1.0)
    return int(round(255 * (1 - t)))


def heatmap(mat, title: str = "", vmin: Optional[float] = None, vmax: Optional[float] = None,
            cell: int = 12) -> str:
    """Rect-per-cell heatmap; rows are queries, columns keys. Darker means larger."""
    mat = np.asarray(mat, dtype=float)
    vmin = float(np.nanmin(mat)) if vmin is None else vmin
    vmax = float(np.nanmax(mat)) if vmax is None else vmax
    rows, cols = mat.shape
    left, top = 40, 40
    w, h = left + cols * cell + 20, top + rows * cell + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           f'<rect width="{w}" height="{h}" fill="white"/>',
           f'<text x="{w / 2}" y="22" text-anchor="middle" font-size="13">{escape(title)}</text>']
    for i in range(rows):
        for j in range(cols):
            g = gray_level(mat[i, j], vmin, vmax)
            out.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb({g},{g},{g})"/>')
    out.append(f'<rect x="{left}" y="{top}" width="{cols * cell}" height="{rows * cell}" fill="none" stroke="black"/>')
    out.append("</svg>")
    return "\n".join(out)
