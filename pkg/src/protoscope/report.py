"""Report emission: stable CSV tables, config hashes, and static SVG curves.

The CSV is the contract (fixed column order, '\\n' line endings, '.'
decimal separator); SVG plots are conveniences rendered directly from
the same rows with no external tooling.
"""

from __future__ import annotations

import hashlib

from .textio import format_float

EVAL_COLUMNS = ("method", "env", "mean_reward", "stderr", "episodes", "seed",
                "config_hash")
ABLATION_COLUMNS = ("parameter", "value", "method", "env", "mean_reward",
                    "stderr", "episodes", "seed", "config_hash", "wall_time_s")


def config_hash(config: dict) -> str:
    """Short stable digest of a flat configuration mapping."""
    canon = "\n".join(f"{k}={config[k]}" for k in sorted(config))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def _cell(value) -> str:
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def format_csv(rows, columns) -> str:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_cell(row[c]) for c in columns))
    return "\n".join(lines) + "\n"


def write_csv(path, rows, columns) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_csv(rows, columns))


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh.read().split("\n") if line]
    columns = lines[0].split(",")
    return [dict(zip(columns, line.split(","))) for line in lines[1:]]


def svg_curve(path, xs, ys, xlabel: str, ylabel: str, title: str,
              width: int = 640, height: int = 420) -> None:
    """Render one x-y curve as a static SVG file."""
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    pad = 60
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x: float) -> float:
        return pad + (x - x_lo) / x_span * (width - 2 * pad)

    def sy(y: float) -> float:
        return height - pad - (y - y_lo) / y_span * (height - 2 * pad)

    pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
        f'y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 16}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{xlabel}</text>',
        f'<text x="18" y="{height / 2:.0f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 18 {height / 2:.0f})">{ylabel}</text>',
        f'<text x="{pad}" y="{height - pad + 16}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="10">{x_lo:g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 16}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="10">{x_hi:g}</text>',
        f'<text x="{pad - 6}" y="{height - pad}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{y_lo:g}</text>',
        f'<text x="{pad - 6}" y="{pad + 4}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{y_hi:g}</text>',
        f'<polyline points="{pts}" fill="none" stroke="#d57b00" stroke-width="2"/>',
    ]
    parts.extend(
        f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3.5" fill="#d57b00"/>'
        for x, y in zip(xs, ys)
    )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
