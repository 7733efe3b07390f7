"""Dependency-free SVG renderer for mean +/- std uncertainty curves."""

from __future__ import annotations

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

_W, _H = 720, 440
_ML, _MR, _MT, _MB = 68, 20, 36, 52  # margins


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def render_uncertainty_curves(curves: dict[str, tuple[np.ndarray, np.ndarray]],
                              title: str = "Average uncertainty over mission time",
                              subtitle: str = "") -> str:
    """Build an SVG document: one polyline per planner plus a shaded std band.

    curves maps planner name -> (mean (T,), std (T,)); steps are 1-based on
    the x axis.
    """
    names = sorted(curves)
    t_max = max(len(curves[n][0]) for n in names)
    y_max = max(float((curves[n][0] + curves[n][1]).max()) for n in names)
    y_max = max(y_max * 1.05, 1e-9)
    plot_w, plot_h = _W - _ML - _MR, _H - _MT - _MB

    def sx(step):
        return _ML + plot_w * (step - 1) / max(t_max - 1, 1)

    def sy(val):
        return _MT + plot_h * (1.0 - val / y_max)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
    ]
    if subtitle:
        parts.append(f'<text x="{_W / 2}" y="{_H - 6}" text-anchor="middle" '
                     f'font-size="10" fill="#666" font-family="sans-serif">{subtitle}</text>')

    # axes with a handful of ticks
    parts.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" '
                 f'stroke="black"/>')
    parts.append(f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" '
                 f'stroke="black"/>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        yv = frac * y_max
        parts.append(f'<text x="{_ML - 6}" y="{sy(yv) + 4}" text-anchor="end" '
                     f'font-size="11" font-family="sans-serif">{_fmt(yv)}</text>')
        step = 1 + frac * (t_max - 1)
        parts.append(f'<text x="{sx(step)}" y="{_H - _MB + 16}" text-anchor="middle" '
                     f'font-size="11" font-family="sans-serif">{_fmt(step)}</text>')
    parts.append(f'<text x="{_W / 2}" y="{_H - _MB + 34}" text-anchor="middle" '
                 f'font-size="12" font-family="sans-serif">decision step</text>')
    parts.append(f'<text x="16" y="{_MT + plot_h / 2}" text-anchor="middle" '
                 f'font-size="12" font-family="sans-serif" '
                 f'transform="rotate(-90 16 {_MT + plot_h / 2})">avg uncertainty</text>')

    for i, name in enumerate(names):
        mean, std = curves[name]
        color = PALETTE[i % len(PALETTE)]
        steps = np.arange(1, len(mean) + 1)
        upper = [(sx(s), sy(min(m + d, y_max))) for s, m, d in zip(steps, mean, std)]
        lower = [(sx(s), sy(max(m - d, 0.0))) for s, m, d in zip(steps, mean, std)]
        band = "M " + " L ".join(f"{x:.2f} {y:.2f}" for x, y in upper + lower[::-1]) + " Z"
        parts.append(f'<path d="{band}" fill="{color}" fill-opacity="0.18" stroke="none"/>')
        pts = " ".join(f"{sx(s):.2f},{sy(m):.2f}" for s, m in zip(steps, mean))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.8"/>')
        ly = _MT + 16 + 16 * i
        parts.append(f'<line x1="{_W - _MR - 110}" y1="{ly - 4}" x2="{_W - _MR - 86}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_W - _MR - 80}" y="{ly}" font-size="12" '
                     f'font-family="sans-serif">{name}</text>')

    parts.append("</svg>")
    return "\n".join(parts)
