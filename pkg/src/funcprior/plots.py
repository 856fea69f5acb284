"""Minimal SVG output: 1-D mean/uncertainty bands and 2-D heatmap panels."""
from __future__ import annotations

import numpy as np

__all__ = ["band_plot", "heatmaps", "line_plot"]

_W, _H, _PAD = 480, 320, 40


def _scale(v, lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return a + (v - lo) / span * (b - a)


def _poly(xs, ys, xr, yr, x0=_PAD, y0=_PAD, w=_W - 2 * _PAD, h=_H - 2 * _PAD):
    px = _scale(np.asarray(xs), *xr, x0, x0 + w)
    py = _scale(np.asarray(ys), *yr, y0 + h, y0)
    return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))


def _axes(xr, yr, title):
    return [
        f'<rect x="{_PAD}" y="{_PAD}" width="{_W - 2 * _PAD}" height="{_H - 2 * _PAD}" '
        'fill="none" stroke="#444"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<text x="{_PAD}" y="{_H - 12}" font-size="10">{xr[0]:.3g}</text>',
        f'<text x="{_W - _PAD}" y="{_H - 12}" font-size="10" text-anchor="end">{xr[1]:.3g}</text>',
        f'<text x="4" y="{_H - _PAD}" font-size="10">{yr[0]:.3g}</text>',
        f'<text x="4" y="{_PAD + 8}" font-size="10">{yr[1]:.3g}</text>',
    ]


def _doc(parts, width=_W, height=_H):
    body = "\n".join(parts)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n')


def band_plot(path, x, mean, std, truth=None, obs=None, title=""):
    """Posterior mean with a two-standard-deviation band, optional truth and data points."""
    x, mean, std = (np.asarray(a, dtype=np.float64).ravel() for a in (x, mean, std))
    lo, hi = mean - 2 * std, mean + 2 * std
    ys = [lo, hi] + ([np.asarray(truth).ravel()] if truth is not None else [])
    if obs is not None:
        ys.append(np.asarray(obs[1]).ravel())
    yr = (float(min(a.min() for a in ys)), float(max(a.max() for a in ys)))
    xr = (float(x.min()), float(x.max()))
    parts = _axes(xr, yr, title)
    band = _poly(np.concatenate([x, x[::-1]]), np.concatenate([hi, lo[::-1]]), xr, yr)
    parts.append(f'<polygon points="{band}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>')
    if truth is not None:
        parts.append(f'<polyline points="{_poly(x, truth, xr, yr)}" fill="none" stroke="black" '
                     'stroke-dasharray="4 3"/>')
    parts.append(f'<polyline points="{_poly(x, mean, xr, yr)}" fill="none" stroke="#d62728" stroke-width="1.5"/>')
    if obs is not None:
        ox = _scale(np.asarray(obs[0]).ravel(), *xr, _PAD, _W - _PAD)
        oy = _scale(np.asarray(obs[1]).ravel(), *yr, _H - _PAD, _PAD)
        parts += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="#1f77b4"/>' for a, b in zip(ox, oy)]
    with open(path, "w") as fh:
        fh.write(_doc(parts))


def line_plot(path, x, series: dict, title=""):
    x = np.asarray(x, dtype=np.float64)
    vals = [np.asarray(v, dtype=np.float64) for v in series.values()]
    yr = (float(min(v.min() for v in vals)), float(max(v.max() for v in vals)))
    xr = (float(x.min()), float(x.max()))
    parts = _axes(xr, yr, title)
    colors = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"]
    for i, (name, v) in enumerate(series.items()):
        c = colors[i % len(colors)]
        parts.append(f'<polyline points="{_poly(x, v, xr, yr)}" fill="none" stroke="{c}"/>')
        parts.append(f'<text x="{_W - _PAD - 4}" y="{_PAD + 14 * (i + 1)}" font-size="10" '
                     f'text-anchor="end" fill="{c}">{name}</text>')
    with open(path, "w") as fh:
        fh.write(_doc(parts))


def _color(t):
    # white -> blue ramp
    t = float(np.clip(t, 0.0, 1.0))
    r = int(255 * (1 - 0.85 * t))
    g = int(255 * (1 - 0.6 * t))
    return f"#{r:02x}{g:02x}ff"


def heatmaps(path, fields: dict, shape, title=""):
    """Side-by-side heatmaps of flattened ``(ny, nx)`` fields (row-major over y)."""
    ny, nx = shape
    cell = max(4, 200 // max(nx, ny))
    pw, ph = nx * cell, ny * cell
    parts = [f'<text x="10" y="16" font-size="13">{title}</text>']
    for k, (name, vals) in enumerate(fields.items()):
        v = np.asarray(vals, dtype=np.float64).reshape(ny, nx)
        lo, hi = float(v.min()), float(v.max())
        x0 = 10 + k * (pw + 30)
        y0 = 30
        parts.append(f'<text x="{x0}" y="{y0 + ph + 14}" font-size="11">{name} [{lo:.3g}, {hi:.3g}]</text>')
        for j in range(ny):
            for i in range(nx):
                t = (v[j, i] - lo) / (hi - lo) if hi > lo else 0.0
                # y grows upward in the field, downward in SVG
                parts.append(f'<rect x="{x0 + i * cell}" y="{y0 + (ny - 1 - j) * cell}" width="{cell}" '
                             f'height="{cell}" fill="{_color(t)}"/>')
    width = 20 + len(fields) * (pw + 30)
    with open(path, "w") as fh:
        fh.write(_doc(parts, width, ph + 60))
