"""Timeline bars (ground truth over prediction) as plain SVG plus a segment CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .metrics import SegmentSequence

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94",
           "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5"]
BACKGROUND_COLOR = "#f0f0f0"


def class_color(index: int, background: int | None = 0) -> str:
    if background is not None and index == background:
        return BACKGROUND_COLOR
    return PALETTE[index % len(PALETTE)]


def timeline_svg(rows: list[tuple[str, np.ndarray]], names: list[str], width: int = 800, bar: int = 24) -> str:
    """One colour bar per (title, frame labels) row; segments drawn as run-length rectangles."""
    pad, label_w = 4, 90
    height = pad + len(rows) * (bar + pad) + 18
    total = max((len(lab) for _, lab in rows), default=0)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">']
    scale = (width - label_w - pad) / total if total else 0.0
    for r, (title, labels) in enumerate(rows):
        y = pad + r * (bar + pad)
        out.append(f'<text x="2" y="{y + bar * 0.7:.1f}" font-family="monospace" font-size="12">{title}</text>')
        out.append(f'<g class="row" transform="translate(0 {y})">')
        for s, e, c in SegmentSequence.from_labels(labels).segments:
            out.append(f'<rect x="{label_w + s * scale:.3f}" y="0" width="{(e - s) * scale:.3f}" height="{bar}" '
                       f'fill="{class_color(c)}"><title>{names[c]} [{s}, {e})</title></rect>')
        out.append("</g>")
    out.append(f'<text x="{label_w}" y="{height - 4}" font-family="monospace" font-size="10">{total} frames</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def segments_csv(path: str | Path, rows: list[tuple[str, np.ndarray]], names: list[str]) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "start_frame", "end_frame", "class"])
        for title, labels in rows:
            for s, e, c in SegmentSequence.from_labels(labels).segments:
                w.writerow([title, s, e, names[c]])
                n += 1
    return n


def plot_emit(pred: np.ndarray, gt: np.ndarray, names: list[str], out_prefix: str | Path) -> tuple[Path, Path]:
    rows = [("ground", np.asarray(gt)), ("predicted", np.asarray(pred))]
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    svg, table = Path(f"{prefix}.svg"), Path(f"{prefix}_segments.csv")
    svg.write_text(timeline_svg(rows, names))
    segments_csv(table, rows, names)
    return svg, table
