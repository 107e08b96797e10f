"""Deterministic SVG emission for time series and CDFs.

Hand-rolled on purpose: identical inputs must yield byte-identical files,
so every coordinate is formatted with fixed precision and nothing depends
on library versions, ids, or clock time.
"""

from __future__ import annotations

import math
from pathlib import Path

WIDTH, HEIGHT = 640, 360
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 16, 28, 44
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#17becf", "#7f7f7f")


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / n))
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12 * span:
        ticks.append(round(t, 12))
        t += step
    return ticks


class SvgCanvas:
    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.parts: list[str] = []
        self.title = title
        self.xlabel = xlabel
        self.ylabel = ylabel
        self.x_range = (0.0, 1.0)
        self.y_range = (0.0, 1.0)

    def set_ranges(self, xs, ys):
        if xs:
            lo, hi = min(xs), max(xs)
            self.x_range = (lo, hi if hi > lo else lo + 1.0)
        if ys:
            lo, hi = min(ys), max(ys)
            pad = 0.05 * (hi - lo) if hi > lo else max(abs(hi), 1.0) * 0.05
            self.y_range = (lo - pad, hi + pad)

    def _px(self, x: float) -> float:
        lo, hi = self.x_range
        return MARGIN_L + (x - lo) / (hi - lo) * (WIDTH - MARGIN_L - MARGIN_R)

    def _py(self, y: float) -> float:
        lo, hi = self.y_range
        return HEIGHT - MARGIN_B - (y - lo) / (hi - lo) * (HEIGHT - MARGIN_T - MARGIN_B)

    def polyline(self, points, color: str, width: float = 1.5):
        if not points:
            return
        coords = " ".join(f"{_fmt(self._px(x))},{_fmt(self._py(y))}" for x, y in points)
        self.parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="{width}" '
            f'points="{coords}"/>')

    def legend(self, labels_colors):
        x = MARGIN_L + 8
        for i, (label, color) in enumerate(labels_colors):
            y = MARGIN_T + 14 + 16 * i
            self.parts.append(
                f'<rect x="{x}" y="{y - 9}" width="10" height="10" fill="{color}"/>')
            self.parts.append(
                f'<text x="{x + 14}" y="{y}" font-size="11" '
                f'font-family="monospace">{label}</text>')

    def render(self) -> str:
        axes = []
        x0, y0 = MARGIN_L, HEIGHT - MARGIN_B
        x1, y1 = WIDTH - MARGIN_R, MARGIN_T
        axes.append(f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
        axes.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
        axes.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
        for t in _nice_ticks(*self.x_range):
            px = self._px(t)
            if x0 - 0.5 <= px <= x1 + 0.5:
                axes.append(f'<line x1="{_fmt(px)}" y1="{y0}" x2="{_fmt(px)}" '
                            f'y2="{y0 + 4}" stroke="black"/>')
                axes.append(f'<text x="{_fmt(px)}" y="{y0 + 16}" font-size="10" '
                            f'text-anchor="middle" font-family="monospace">{t:g}</text>')
        for t in _nice_ticks(*self.y_range):
            py = self._py(t)
            if y1 - 0.5 <= py <= y0 + 0.5:
                axes.append(f'<line x1="{x0 - 4}" y1="{_fmt(py)}" x2="{x0}" '
                            f'y2="{_fmt(py)}" stroke="black"/>')
                axes.append(f'<text x="{x0 - 7}" y="{_fmt(py + 3)}" font-size="10" '
                            f'text-anchor="end" font-family="monospace">{t:g}</text>')
        axes.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 8}" font-size="12" '
                    f'text-anchor="middle" font-family="monospace">{self.xlabel}</text>')
        axes.append(f'<text x="14" y="{(y0 + y1) / 2}" font-size="12" '
                    f'text-anchor="middle" font-family="monospace" '
                    f'transform="rotate(-90 14 {(y0 + y1) / 2})">{self.ylabel}</text>')
        axes.append(f'<text x="{(x0 + x1) / 2}" y="18" font-size="13" '
                    f'text-anchor="middle" font-family="monospace">{self.title}</text>')
        body = "\n".join(axes + self.parts)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
                f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">\n{body}\n</svg>\n')


def line_plot(series: dict[str, list[tuple[float, float]]], title: str,
              xlabel: str, ylabel: str) -> str:
    canvas = SvgCanvas(title, xlabel, ylabel)
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    canvas.set_ranges(xs, ys)
    labels = []
    for i, (label, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        canvas.polyline(pts, color)
        labels.append((label, color))
    if labels:
        canvas.legend(labels)
    return canvas.render()


def cdf_plot(points: list[tuple[float, float]], title: str, xlabel: str) -> str:
    canvas = SvgCanvas(title, xlabel, "CDF")
    canvas.y_range = (0.0, 1.05)
    if points:
        canvas.set_ranges([x for x, _ in points], [])
        # render as a staircase
        stairs = []
        prev_y = 0.0
        for x, y in points:
            stairs.append((x, prev_y))
            stairs.append((x, y))
            prev_y = y
        canvas.polyline(stairs, PALETTE[0])
    return canvas.render()


def emit_plots(report, trace_rows, out_dir, flow_ids=None) -> list[str]:
    """Write the run's figure set; identical inputs give identical bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    wanted = None if flow_ids is None else set(flow_ids)
    thr_series: dict[str, list] = {}
    rtt_series: dict[str, list] = {}
    est_series: dict[str, list] = {}
    for r in trace_rows:
        if wanted is not None and r[1] not in wanted:
            continue
        fid = f"flow {r[1]}"
        t = r[0] / 1e6
        thr_series.setdefault(fid, []).append((t, r[2] / 1e6))
        if r[3] > 0:
            rtt_series.setdefault(fid, []).append((t, r[3] / 1000.0))
        if r[9] > 0:
            est_series.setdefault(f"{fid} estimate", []).append((t, r[9] / 1000.0))
    truth = [(r[0] / 1e6, r[13] / 1000.0) for r in trace_rows]
    if truth:
        seen = {}
        for t, v in truth:
            seen[t] = v
        est_series["true min rtt"] = sorted(seen.items())

    path = out / "throughput_timeseries.svg"
    path.write_text(line_plot(thr_series, "Delivery rate", "time (s)", "Mbit/s"))
    files.append(str(path))
    path = out / "rtt_timeseries.svg"
    path.write_text(line_plot(rtt_series, "Smoothed RTT", "time (s)", "ms"))
    files.append(str(path))
    path = out / "rtprop_estimate_timeseries.svg"
    path.write_text(line_plot(est_series, "RTprop estimate vs truth", "time (s)", "ms"))
    files.append(str(path))
    path = out / "cdf_rtt_sqerr.svg"
    path.write_text(cdf_plot(report.rtt_sqerr_cdf,
                             "RTT estimation squared error CDF", "squared error (ms^2)"))
    files.append(str(path))
    path = out / "cdf_throughput.svg"
    path.write_text(cdf_plot([(x / 1e6, y) for x, y in report.throughput_cdf],
                             "Throughput CDF", "Mbit/s"))
    files.append(str(path))
    return files
