"""Standalone SVG line charts, written directly with no drawing library.

Charts are deterministic: the same inputs produce byte-identical files.
Each series is tagged with its method name so tooling (and tests) can
recover the plotted structure from the file.
"""

from __future__ import annotations

from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .errors import ValidationError

PALETTE = ("#1b6ca8", "#d1495b", "#2e933c", "#8338ec", "#e09f3e", "#335c67")

WIDTH = 640
HEIGHT = 420
MARGIN_LEFT = 62
MARGIN_RIGHT = 150
MARGIN_TOP = 46
MARGIN_BOTTOM = 54


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def svg_line_chart(levels, series: dict[str, list[float]], title: str,
                   x_label: str, y_label: str) -> str:
    """Render named series of values in [0, 1] against shared x positions.

    `series` preserves insertion order for colors and the legend. Every
    series gets a `<polyline class="series" data-method=...>` plus one
    `<circle class="pt">` per point.
    """
    levels = [float(v) for v in levels]
    if not levels:
        raise ValidationError("a chart needs at least one x position")
    if not series:
        raise ValidationError("a chart needs at least one series")
    for name, values in series.items():
        if len(values) != len(levels):
            raise ValidationError(
                f"series {name!r} has {len(values)} values for "
                f"{len(levels)} x positions"
            )
        if not all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in values):
            raise ValidationError(f"series {name!r} values must lie in [0, 1]")

    x0, x1 = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
    y0, y1 = HEIGHT - MARGIN_BOTTOM, MARGIN_TOP
    lo, hi = min(levels), max(levels)

    def sx(v: float) -> float:
        if hi == lo:
            return (x0 + x1) / 2.0
        return x0 + (v - lo) / (hi - lo) * (x1 - x0)

    def sy(v: float) -> float:
        return y0 + v * (y1 - y0)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{escape(title)}</text>',
    ]

    # gridlines and y-axis ticks at 0, 0.2, ..., 1
    for i in range(6):
        v = i / 5.0
        y = _fmt(sy(v))
        out.append(f'<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" '
                   f'stroke="#dddddd" stroke-width="1"/>')
        out.append(f'<text x="{x0 - 8}" y="{_fmt(sy(v) + 4)}" '
                   f'text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{v:g}</text>')
    for v in sorted(set(levels)):
        x = _fmt(sx(v))
        out.append(f'<line x1="{x}" y1="{y0}" x2="{x}" y2="{y0 + 5}" '
                   f'stroke="#444444" stroke-width="1"/>')
        out.append(f'<text x="{x}" y="{y0 + 20}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{v:g}</text>')

    # axes
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" '
               f'stroke="#444444" stroke-width="1.5"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" '
               f'stroke="#444444" stroke-width="1.5"/>')
    out.append(f'<text x="{(x0 + x1) // 2}" y="{HEIGHT - 14}" '
               f'text-anchor="middle" font-family="sans-serif" '
               f'font-size="13">{escape(x_label)}</text>')
    out.append(f'<text x="18" y="{(y0 + y1) // 2}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="13" '
               f'transform="rotate(-90 18 {(y0 + y1) // 2})">'
               f'{escape(y_label)}</text>')

    for s, (name, values) in enumerate(series.items()):
        color = PALETTE[s % len(PALETTE)]
        pts = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}"
                       for x, y in zip(levels, values))
        out.append(f'<polyline class="series" data-method={quoteattr(name)} '
                   f'points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="2"/>')
        for x, y in zip(levels, values):
            out.append(f'<circle class="pt" data-method={quoteattr(name)} '
                       f'cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="3.5" '
                       f'fill="{color}"/>')

    # legend, one row per series
    lx = x1 + 16
    for s, name in enumerate(series):
        color = PALETTE[s % len(PALETTE)]
        ly = y1 + 10 + 22 * s
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 24}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<circle cx="{lx + 12}" cy="{ly}" r="3.5" fill="{color}"/>')
        out.append(f'<text x="{lx + 32}" y="{ly + 4}" '
                   f'font-family="sans-serif" font-size="12">'
                   f'{escape(name)}</text>')

    out.append("</svg>")
    return "\n".join(out) + "\n"


def accuracy_plot(report) -> str:
    """Mean accuracy per missingness level, one series per method."""
    series = {m: report.accuracy_series(m) for m in report.methods}
    return svg_line_chart(
        report.levels, series,
        title="Accuracy vs missingness",
        x_label="fraction of nodes missing one modality",
        y_label="mean accuracy",
    )


def write_accuracy_plot(report, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(accuracy_plot(report))
