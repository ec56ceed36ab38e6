"""Self-contained SVG line charts (accuracy against attack strength)."""
from __future__ import annotations

from xml.sax.saxutils import escape

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def accuracy_curve_svg(series: dict[str, list[tuple[float, float]]], title: str = "",
                       xlabel: str = "epsilon (x/255)", ylabel: str = "accuracy",
                       width: int = 560, height: int = 380) -> str:
    """One polyline per entry of ``series`` (name -> [(epsilon, accuracy), ...]).

    Epsilons are drawn in /255 units; the y axis spans [0, 1].
    """
    left, right, top, bottom = 60, 150, 36, 48
    pw, ph = width - left - right, height - top - bottom
    xs = [e * 255 for pts in series.values() for e, _ in pts]
    xmax = max(xs) if xs and max(xs) > 0 else 1.0

    def sx(e):
        return left + pw * (e * 255) / xmax

    def sy(a):
        return top + ph * (1.0 - a)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{left + pw / 2:.1f}" y="20" text-anchor="middle" font-size="13">'
                   f'{escape(title)}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for i in range(6):
        a = i / 5
        y = sy(a)
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{a:.1f}</text>')
    ticks = sorted({round(x, 6) for x in xs})
    for t in ticks:
        x = left + pw * t / xmax
        out.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle">{t:g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(e):.2f},{sy(a):.2f}" for e, a in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}">'
                   f'<title>{escape(name)}</title></polyline>')
        for e, a in pts:
            out.append(f'<circle cx="{sx(e):.2f}" cy="{sy(a):.2f}" r="2.5" fill="{color}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
