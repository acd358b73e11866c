"""Deterministic SVG line plots from metric CSV files."""

from __future__ import annotations

import csv
import warnings
from pathlib import Path
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 64, 16, 28, 44
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

# CSV file -> (plot name, x column)
TRACES = {
    "forward_loss.csv": ("forward_loss", "epoch"),
    "align_loss_A.csv": ("align_loss_A", "step"),
    "align_loss_B.csv": ("align_loss_B", "step"),
    "l1_vs_size.csv": ("l1_vs_dataset_size", "triples"),
}


def read_columns(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        return [], {}
    header, body = rows[0], rows[1:]
    cols = {h: [] for h in header}
    for r in body:
        for h, v in zip(header, r):
            cols[h].append(float(v) if v != "" else None)
    return header, cols


def line_svg(title, x_label, xs, series):
    """SVG text for ``series`` (name -> y values) against ``xs``.

    Larger values are drawn higher, so SVG y coordinates grow as the value
    shrinks.  Missing (None) points break nothing: they are skipped.
    """
    pts = [(x, y) for ys in series.values() for x, y in zip(xs, ys) if y is not None]
    x_lo = min(p[0] for p in pts)
    x_hi = max(p[0] for p in pts)
    y_lo = min(p[1] for p in pts)
    y_hi = max(p[1] for p in pts)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return TOP + (y_hi - y) / (y_hi - y_lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.2f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
           f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
           f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 8}" text-anchor="middle" font-size="12">'
           f'{escape(x_label)}</text>',
           f'<text x="{LEFT:.2f}" y="{TOP + ph + 14:.2f}" text-anchor="middle" font-size="10">{x_lo:.4g}</text>',
           f'<text x="{LEFT + pw:.2f}" y="{TOP + ph + 14:.2f}" text-anchor="middle" font-size="10">{x_hi:.4g}</text>',
           f'<text x="{LEFT - 4}" y="{TOP + ph:.2f}" text-anchor="end" font-size="10">{y_lo:.4g}</text>',
           f'<text x="{LEFT - 4}" y="{TOP + 4:.2f}" text-anchor="end" font-size="10">{y_hi:.4g}</text>']
    y_label = ", ".join(series)
    out.append(f'<text x="14" y="{TOP + ph / 2:.2f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 14 {TOP + ph / 2:.2f})">{escape(y_label)}</text>')
    for i, (name, ys) in enumerate(series.items()):
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys) if y is not None)
        color = COLORS[i % len(COLORS)]
        out.append(f'<polyline data-series="{escape(name)}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5" points="{coords}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(csv_path, svg_path, title, x_column):
    """Write one SVG for a metric CSV; returns False (with a warning) when it has no rows."""
    header, cols = read_columns(csv_path)
    if not header or not cols.get(x_column):
        warnings.warn(f"{csv_path}: no rows to plot, skipped", stacklevel=2)
        return False
    series = {h: cols[h] for h in header if h != x_column and any(v is not None for v in cols[h])}
    if not series:
        warnings.warn(f"{csv_path}: no metric columns to plot, skipped", stacklevel=2)
        return False
    Path(svg_path).write_text(line_svg(title, x_column, cols[x_column], series))
    return True


def emit_plots(run_dir):
    """One SVG per known metric CSV present in ``run_dir``; returns the written paths."""
    run_dir = Path(run_dir)
    out_dir = run_dir / "plots"
    written = []
    for name, (title, x_col) in TRACES.items():
        src = run_dir / name
        if not src.exists():
            continue
        out_dir.mkdir(exist_ok=True)
        dst = out_dir / f"{title}.svg"
        if plot_csv(src, dst, title, x_col):
            written.append(dst)
    return written
