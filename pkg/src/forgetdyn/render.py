"""Diverging blue-to-red rendering of heat maps.

Counts are normalized by the per-image maximum, so renders of different
images are not directly comparable; a sidecar text file records the scale
of every render to keep that explicit.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .core import HeatMap

COLD = (59, 76, 192)
MID = (221, 221, 221)
HOT = (180, 4, 38)
_ANCHORS = np.array([0.0, 0.5, 1.0])
_CHANNELS = tuple(np.array([COLD[c], MID[c], HOT[c]], dtype=np.float64) for c in range(3))


def palette_color(t: float) -> tuple[int, int, int]:
    """Piecewise-linear diverging palette at position t in [0, 1]."""
    t = min(max(float(t), 0.0), 1.0)
    return tuple(int(np.rint(np.interp(t, _ANCHORS, ch))) for ch in _CHANNELS)


def colorize(counts: np.ndarray) -> np.ndarray:
    """Map a count grid to RGB, normalizing by the grid's own maximum.

    An all-zero grid renders uniformly in the coldest color.
    """
    counts = np.asarray(counts, dtype=np.float64)
    peak = counts.max()
    t = counts / peak if peak > 0 else np.zeros_like(counts)
    out = np.empty((*counts.shape, 3), dtype=np.uint8)
    for c, ch in enumerate(_CHANNELS):
        out[..., c] = np.rint(np.interp(t, _ANCHORS, ch)).astype(np.uint8)
    return out


def scale_lines(max_count: int) -> list[str]:
    """Human-readable legend mapping counts to render colors."""
    lines = [
        f"max_count: {max_count}",
        "palette: diverging blue-white-red, normalized per image",
    ]
    steps = sorted({0, max_count // 2, max_count}) if max_count > 0 else [0]
    for count in steps:
        t = count / max_count if max_count > 0 else 0.0
        r, g, b = palette_color(t)
        lines.append(f"count {count}: rgb({r},{g},{b})")
    return lines


def render_heatmap(heatmap: HeatMap, png_path: str | Path) -> Path:
    """Write the colored PNG plus its sidecar scale file.

    Returns the sidecar path (the PNG lands at png_path).
    """
    png_path = Path(png_path)
    Image.fromarray(colorize(heatmap.counts)).save(png_path)
    sidecar = png_path.with_name(png_path.name + ".scale.txt")
    sidecar.write_text(
        "\n".join(scale_lines(int(heatmap.counts.max()))) + "\n", encoding="utf-8"
    )
    return sidecar
