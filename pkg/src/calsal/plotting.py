"""A small deterministic SVG plotter: lines, bars, histograms and box plots."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 480, 320
MARGIN = dict(left=60, right=130, top=36, bottom=48)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def _f(v):
    return f"{v:.2f}"


class Figure:
    """Accumulates SVG elements inside one set of axes."""

    def __init__(self, title, xlabel, ylabel, xlim, ylim):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.xlim = _pad_range(xlim)
        self.ylim = _pad_range(ylim)
        self.items = []
        self.legend = []

    def sx(self, x):
        lo, hi = self.xlim
        return MARGIN["left"] + (x - lo) / (hi - lo) * (WIDTH - MARGIN["left"] - MARGIN["right"])

    def sy(self, y):
        lo, hi = self.ylim
        return HEIGHT - MARGIN["bottom"] - (y - lo) / (hi - lo) * (HEIGHT - MARGIN["top"] - MARGIN["bottom"])

    def line(self, xs, ys, label=None, colour=None, dashed=False, markers=False):
        colour = colour or PALETTE[len(self.legend) % len(PALETTE)]
        pts = " ".join(f"{_f(self.sx(x))},{_f(self.sy(y))}" for x, y in zip(xs, ys) if np.isfinite(y))
        dash = ' stroke-dasharray="5,3"' if dashed else ""
        self.items.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5"{dash} points="{pts}"/>')
        if markers:
            for x, y in zip(xs, ys):
                self.point(x, y, colour)
        if label:
            self.legend.append((label, colour))

    def point(self, x, y, colour="#000000", r=3.5):
        self.items.append(f'<circle cx="{_f(self.sx(x))}" cy="{_f(self.sy(y))}" r="{r}" fill="{colour}"/>')

    def rect(self, x0, x1, y0, y1, colour):
        x, w = self.sx(x0), self.sx(x1) - self.sx(x0)
        top, bottom = self.sy(y1), self.sy(y0)
        self.items.append(f'<rect x="{_f(x)}" y="{_f(top)}" width="{_f(w)}" height="{_f(bottom - top)}" '
                          f'fill="{colour}" stroke="#333333" stroke-width="0.5"/>')

    def text(self, x, y, s, anchor="middle", size=10):
        self.items.append(f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" text-anchor="{anchor}">'
                          f'{escape(str(s))}</text>')

    def svg(self) -> str:
        x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
        y0, y1 = MARGIN["top"], HEIGHT - MARGIN["bottom"]
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
               f'viewBox="0 0 {WIDTH} {HEIGHT}">',
               '<rect width="100%" height="100%" fill="#ffffff"/>',
               f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" fill="none" stroke="#000000"/>']
        for v in np.linspace(*self.xlim, 5):
            out.append(f'<text x="{_f(self.sx(v))}" y="{y1 + 14}" font-size="9" text-anchor="middle">{v:.3g}</text>')
        for v in np.linspace(*self.ylim, 5):
            out.append(f'<text x="{x0 - 4}" y="{_f(self.sy(v) + 3)}" font-size="9" text-anchor="end">{v:.3g}</text>')
        out.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 12}" font-size="11" text-anchor="middle">'
                   f'{escape(self.xlabel)}</text>')
        out.append(f'<text x="14" y="{(y0 + y1) / 2}" font-size="11" text-anchor="middle" '
                   f'transform="rotate(-90 14 {(y0 + y1) / 2})">{escape(self.ylabel)}</text>')
        out.append(f'<text x="{(x0 + x1) / 2}" y="20" font-size="12" text-anchor="middle">{escape(self.title)}</text>')
        out.extend(self.items)
        for i, (label, colour) in enumerate(self.legend):
            ly = y0 + 8 + 14 * i
            out.append(f'<rect x="{x1 + 8}" y="{ly - 6}" width="10" height="8" fill="{colour}"/>')
            out.append(f'<text x="{x1 + 22}" y="{ly + 2}" font-size="9">{escape(label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def _pad_range(lim):
    lo, hi = float(lim[0]), float(lim[1])
    if not np.isfinite(lo) or not np.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def _bounds(arrays):
    vals = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays]) if arrays else np.zeros(1)
    vals = vals[np.isfinite(vals)]
    return (vals.min(), vals.max()) if vals.size else (0.0, 1.0)


def line_plot(series, title, xlabel, ylabel, marked=(), dashed=()) -> str:
    """``series`` maps label -> (xs, ys); ``marked`` is a list of (x, y) points to highlight."""
    xs = [s[0] for s in series.values()] + [[p[0] for p in marked]]
    ys = [s[1] for s in series.values()] + [[p[1] for p in marked]]
    fig = Figure(title, xlabel, ylabel, _bounds(xs), _bounds(ys))
    for label, (x, y) in series.items():
        fig.line(x, y, label, dashed=label in dashed, markers=len(x) <= 12)
    for x, y in marked:
        fig.point(x, y, "#000000", r=5)
    return fig.svg()


def bar_chart(groups, title, ylabel) -> str:
    """``groups`` maps group label -> {bar label: value}; bars of each group sit side by side."""
    names = list(groups)
    bars = sorted({b for g in groups.values() for b in g}, key=str)
    values = [v for g in groups.values() for v in g.values()]
    lo, hi = _bounds([values + [0.0]])
    fig = Figure(title, "", ylabel, (0, len(names)), (min(lo, 0.0), hi))
    width = 0.8 / max(len(bars), 1)
    for gi, name in enumerate(names):
        for bi, bar in enumerate(bars):
            if bar in groups[name]:
                x0 = gi + 0.1 + bi * width
                fig.rect(x0, x0 + width, 0.0, groups[name][bar], PALETTE[bi % len(PALETTE)])
        fig.text(fig.sx(gi + 0.5), HEIGHT - MARGIN["bottom"] + 26, name, size=9)
    fig.legend = [(str(b), PALETTE[i % len(PALETTE)]) for i, b in enumerate(bars)]
    return fig.svg()


def histogram(values, title, xlabel, bins=20, value_range=None) -> str:
    values = np.asarray(values, dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    fig = Figure(title, xlabel, "count", (edges[0], edges[-1]), (0, max(int(counts.max()), 1)))
    for c, a, b in zip(counts, edges[:-1], edges[1:]):
        if c:
            fig.rect(a, b, 0, c, PALETTE[0])
    return fig.svg()


def box_plot(groups, title, ylabel) -> str:
    """``groups`` maps label -> (min, q1, median, q3, max)."""
    names = list(groups)
    fig = Figure(title, "", ylabel, (0, len(names)), _bounds([list(v) for v in groups.values()]))
    for i, name in enumerate(names):
        lo, q1, med, q3, hi = groups[name]
        colour = PALETTE[i % len(PALETTE)]
        fig.rect(i + 0.25, i + 0.75, q1, q3, colour)
        fig.line([i + 0.25, i + 0.75], [med, med], colour="#000000")
        fig.line([i + 0.5, i + 0.5], [lo, q1], colour="#000000")
        fig.line([i + 0.5, i + 0.5], [q3, hi], colour="#000000")
        fig.text(fig.sx(i + 0.5), HEIGHT - MARGIN["bottom"] + 26, name, size=8)
    return fig.svg()
