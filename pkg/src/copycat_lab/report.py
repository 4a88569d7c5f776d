"""SVG figures and Markdown tables built from the results CSV alone."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .config import REFERENCE_METHODS
from .diagnostics import DiagnosticsError, MetricsRecord, Summary, summarize

PANEL_W, PANEL_H, MARGIN = 360, 300, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#000000", "#aec7e8")


@dataclass
class Panel:
    env: str
    points: list[tuple[str, float, float]]     # (method, x=ratio, y=norm reward)


def _panels(summaries: Sequence[Summary]) -> list[Panel]:
    envs = list(dict.fromkeys(s.env for s in summaries))
    return [Panel(e, [(s.method, s.mean["pred_ratio"], s.mean["norm_reward"])
                      for s in summaries if s.env == e]) for e in envs]


def _range(vals: list[float], pad: float = 0.1) -> tuple[float, float]:
    vals = [v for v in vals if math.isfinite(v)]
    if not vals:
        return -1.0, 1.0
    lo, hi = min(vals), max(vals)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


class _Frame:
    """Maps data coordinates into one panel."""

    def __init__(self, index: int, xr, yr):
        self.x0 = index * (PANEL_W + MARGIN) + MARGIN
        self.y0 = MARGIN
        self.xr, self.yr = xr, yr

    def __call__(self, x: float, y: float) -> tuple[float, float]:
        fx = (x - self.xr[0]) / (self.xr[1] - self.xr[0])
        fy = (y - self.yr[0]) / (self.yr[1] - self.yr[0])
        return self.x0 + fx * PANEL_W, self.y0 + (1.0 - fy) * PANEL_H

    def axes(self, title: str) -> list[str]:
        x0, y0 = self.x0, self.y0
        out = [f'<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" '
               f'fill="none" stroke="#333333"/>',
               f'<text x="{x0 + PANEL_W / 2:.1f}" y="{y0 - 15}" text-anchor="middle" '
               f'font-size="14">{escape(title)}</text>',
               f'<text x="{x0 + PANEL_W / 2:.1f}" y="{y0 + PANEL_H + 35}" text-anchor="middle" '
               f'font-size="12">predictability ratio</text>',
               f'<text x="{x0 - 35}" y="{y0 + PANEL_H / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 {x0 - 35} {y0 + PANEL_H / 2:.1f})">normalized reward</text>']
        for frac in (0.0, 0.5, 1.0):
            xv = self.xr[0] + frac * (self.xr[1] - self.xr[0])
            yv = self.yr[0] + frac * (self.yr[1] - self.yr[0])
            px, _ = self(xv, self.yr[0])
            _, py = self(self.xr[0], yv)
            out.append(f'<text x="{px:.1f}" y="{y0 + PANEL_H + 15}" text-anchor="middle" '
                       f'font-size="10">{xv:.2f}</text>')
            out.append(f'<text x="{x0 - 5}" y="{py + 3:.1f}" text-anchor="end" '
                       f'font-size="10">{yv:.2f}</text>')
        return out


def _svg(body: list[str], n_panels: int, defs: str = "") -> str:
    w = n_panels * (PANEL_W + MARGIN) + MARGIN + 120
    h = PANEL_H + 2 * MARGIN + 20
    head = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}">\n')
    return head + (defs + "\n" if defs else "") + "\n".join(body) + "\n</svg>\n"


def _colors(methods: list[str]) -> dict[str, str]:
    return {m: PALETTE[i % len(PALETTE)] for i, m in enumerate(methods)}


def scatter_svg(records: Sequence[MetricsRecord]) -> str:
    """Predictability ratio against normalised reward; one marker per (method, env)."""
    summaries = summarize(records)
    if not summaries:
        raise DiagnosticsError("no results to plot")
    panels = _panels(summaries)
    colors = _colors(list(dict.fromkeys(s.method for s in summaries)))
    body = []
    for i, p in enumerate(panels):
        fr = _Frame(i, _range([x for _, x, _ in p.points]), _range([y for _, _, y in p.points]))
        body += fr.axes(p.env)
        for m, x, y in p.points:
            if not (math.isfinite(x) and math.isfinite(y)):
                continue
            px, py = fr(x, y)
            body.append(f'<circle class="marker" cx="{px:.2f}" cy="{py:.2f}" r="5" '
                        f'fill="{colors[m]}"><title>{escape(m)}</title></circle>')
            body.append(f'<text x="{px + 7:.2f}" y="{py - 6:.2f}" font-size="9">{escape(m)}</text>')
    return _svg(body, len(panels))


ARROW_DEFS = ('<defs><marker id="head" markerWidth="8" markerHeight="8" refX="7" refY="4" '
              'orient="auto"><path d="M0,0 L8,4 L0,8 z" fill="#444444"/></marker></defs>')


def arrow_svg(records: Sequence[MetricsRecord], origin: str = "bc_oh") -> str:
    """An arrow from ``origin``'s mean point to every other learned method's point."""
    learned = [r for r in records if r.method not in REFERENCE_METHODS]
    summaries = summarize(learned)
    panels = _panels(summaries)
    colors = _colors(list(dict.fromkeys(s.method for s in summaries)))
    body = []
    for i, p in enumerate(panels):
        start = [(x, y) for m, x, y in p.points if m == origin]
        if not start:
            raise DiagnosticsError(f"env {p.env} has no {origin} rows to start arrows from")
        fr = _Frame(i, _range([x for _, x, _ in p.points]), _range([y for _, _, y in p.points]))
        body += fr.axes(p.env)
        sx, sy = fr(*start[0])
        body.append(f'<circle class="origin" cx="{sx:.2f}" cy="{sy:.2f}" r="4" fill="#000000">'
                    f'<title>{escape(origin)}</title></circle>')
        for m, x, y in p.points:
            if m == origin:
                continue
            ex, ey = fr(x, y) if math.isfinite(x) and math.isfinite(y) else (sx, sy)
            body.append(f'<line class="arrow" x1="{sx:.2f}" y1="{sy:.2f}" x2="{ex:.2f}" y2="{ey:.2f}" '
                        f'stroke="{colors[m]}" stroke-width="1.5" marker-end="url(#head)">'
                        f'<title>{escape(m)}</title></line>')
            body.append(f'<text x="{ex + 5:.2f}" y="{ey - 5:.2f}" font-size="9">{escape(m)}</text>')
    return _svg(body, len(panels), ARROW_DEFS)


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

TABLES = (
    ("Action predictability (held-out probe MSE, lower = more self-predictable)", "pred_mse"),
    ("Cumulative reward per episode", "reward_mean"),
    ("Excess information about the previous action (probe MSE, higher = less)", "excess_info_mse"),
    ("Held-out BC test MSE", "bc_test_mse"),
    ("Predictability ratio", "pred_ratio"),
    ("Normalized reward", "norm_reward"),
)


def _cell(s: Summary | None, col: str) -> str:
    if s is None or not math.isfinite(s.mean[col]):
        return "n/a"
    m, sd = s.mean[col], s.std[col]
    if abs(m) < 1e-2 and m != 0:
        return f"{m:.3e} ± {sd:.1e}"
    return f"{m:.3f} ± {sd:.3f}"


def markdown_tables(records: Sequence[MetricsRecord]) -> str:
    """One table per metric; one row per method, one column per env."""
    summaries = summarize(records)
    if not summaries:
        raise DiagnosticsError("no results to tabulate")
    methods = list(dict.fromkeys(s.method for s in summaries))
    envs = list(dict.fromkeys(s.env for s in summaries))
    idx = {(s.method, s.env): s for s in summaries}
    lines = []
    for title, col in TABLES:
        lines += [f"### {title}", "", "| method | " + " | ".join(envs) + " |",
                  "|---|" + "---|" * len(envs)]
        for m in methods:
            lines.append(f"| {m} | " + " | ".join(_cell(idx.get((m, e)), col) for e in envs) + " |")
        lines.append("")
    n = {(s.method, s.env): s.n for s in summaries}
    lines.append("Entries are mean ± std over seeds; seeds per cell: "
                 + ", ".join(f"{m}/{e}={k}" for (m, e), k in n.items()) + ".")
    return "\n".join(lines) + "\n"


def write_report(records: Sequence[MetricsRecord], out_dir) -> list[Path]:
    if not records:
        raise DiagnosticsError("results are empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"scatter.svg": scatter_svg(records), "tables.md": markdown_tables(records)}
    if any(r.method == "bc_oh" for r in records):
        files["arrows.svg"] = arrow_svg(records)
    paths = []
    for name, text in files.items():
        (out / name).write_text(text)
        paths.append(out / name)
    return paths
