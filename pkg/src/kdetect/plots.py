"""Dependency-free SVG plots: precision-recall curves and per-class AP bars."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_W, _H = 420, 320
_LEFT, _RIGHT, _TOP, _BOTTOM = 52, 16, 28, 44


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    pw, ph = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{_LEFT}" y="{_TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for i in range(6):
        v = i / 5
        y = _TOP + ph * (1 - v)
        out.append(f'<line x1="{_LEFT - 4}" y1="{y:.1f}" x2="{_LEFT}" y2="{y:.1f}" stroke="#333"/>')
        out.append(f'<text x="{_LEFT - 7}" y="{y + 4:.1f}" text-anchor="end">{v:.1f}</text>')
    out.append(f'<text x="{_W / 2:.1f}" y="{_H - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{_TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {_TOP + ph / 2:.1f})">{escape(ylabel)}</text>')
    return out


def _xy(x: float, y: float) -> tuple[float, float]:
    pw, ph = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM
    return _LEFT + pw * x, _TOP + ph * (1 - y)


def pr_curve_svg(curves: Mapping[str, Sequence[Sequence[float]]], title: str = "Precision-recall") -> str:
    """``curves`` maps a legend label to ``(recall, precision)`` points."""
    out = _frame(title, "recall", "precision")
    pw = _W - _LEFT - _RIGHT
    for i in range(6):
        x, _ = _xy(i / 5, 0)
        out.append(f'<text x="{x:.1f}" y="{_H - _BOTTOM + 14}" text-anchor="middle">{i / 5:.1f}</text>')
    for k, (label, pts) in enumerate(curves.items()):
        colour = PALETTE[k % len(PALETTE)]
        if len(pts):
            path = " ".join(f"{x:.2f},{y:.2f}" for x, y in (_xy(r, p) for r, p in pts))
            out.append(f'<polyline points="{path}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        lx, ly = _LEFT + pw - 120, _TOP + 14 + 14 * k
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 16}" y2="{ly - 4}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 20}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart_svg(values: Mapping[str, float], title: str = "AP50 per class") -> str:
    """Vertical bars for values in ``[0, 1]``, one per key, in the given order."""
    out = _frame(title, "class", "AP")
    pw = _W - _LEFT - _RIGHT
    n = max(1, len(values))
    slot = pw / n
    for k, (label, v) in enumerate(values.items()):
        v = min(max(float(v), 0.0), 1.0)
        x0, y0 = _xy(0, v)
        x = _LEFT + slot * k + slot * 0.2
        _, base = _xy(0, 0)
        out.append(f'<rect x="{x:.1f}" y="{y0:.1f}" width="{slot * 0.6:.1f}" height="{base - y0:.1f}" '
                   f'fill="{PALETTE[k % len(PALETTE)]}"/>')
        out.append(f'<text x="{x + slot * 0.3:.1f}" y="{y0 - 4:.1f}" text-anchor="middle">{v:.3f}</text>')
        out.append(f'<text x="{x + slot * 0.3:.1f}" y="{base + 14:.1f}" text-anchor="middle">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report_plots(report, directory: str | Path, threshold: float = 0.5) -> list[Path]:
    """One PR-curve plot per class plus a per-class AP bar chart."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    key = f"{threshold:.2f}"
    written = []
    for cls in report.class_names:
        pts = report.pr_curves.get(cls, {}).get(key, [])
        p = d / f"pr_{cls}.svg"
        p.write_text(pr_curve_svg({f"{cls} @ IoU {key}": pts}, title=f"{cls}: precision-recall"))
        written.append(p)
    bars = {c: report.per_class_ap.get(c, {}).get(key, 0.0) for c in report.class_names}
    p = d / "ap50_bars.svg"
    p.write_text(bar_chart_svg(bars, title=f"AP at IoU {key} per class"))
    written.append(p)
    return written
