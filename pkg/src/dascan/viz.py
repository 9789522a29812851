"""SVG rendering of scan paths over the patch grid.

The picture is a grid of colored cells (patch-mean colors when an image
is supplied), the traversal drawn on top: one ``circle.marker`` per
visited patch, ``line.seg`` elements joining consecutive visits, a
star-shaped ``polygon.start-marker`` at the first patch and a ring
``circle.end-marker`` at the last. Markers whose pre-clamp sample
coordinates fell outside the valid square are drawn gray — those
patches resampled from (partially) out-of-bounds positions.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .sampling import to_pixel
from .scan import ScanPlan

CELL = 18          # svg pixels per patch cell
OOB_COLOR = "#9e9e9e"
PATH_COLOR = "#e03131"


def _patch_colors(image: np.ndarray | None, h: int, w: int) -> np.ndarray:
    """(h, w, 3) float colors in [0, 1] for the cell backdrop."""
    if image is None:
        # quiet two-tone checkerboard so the path reads well
        yy, xx = np.mgrid[0:h, 0:w]
        base = np.where(((yy + xx) % 2)[..., None], 0.82, 0.90)
        return np.broadcast_to(base, (h, w, 3)).astype(np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"image must be (3, H, W), got {image.shape}")
    ih, iw = image.shape[1], image.shape[2]
    if ih % h == 0 and iw % w == 0:
        blocks = image.reshape(3, h, ih // h, w, iw // w)
        return blocks.mean(axis=(2, 4)).transpose(1, 2, 0)
    ys = np.minimum(((np.arange(h) + 0.5) * ih / h).astype(int), ih - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * iw / w).astype(int), iw - 1)
    return image[:, ys[:, None], xs[None, :]].transpose(1, 2, 0)


def _hex(color) -> str:
    r, g, b = (int(c) for c in np.clip(np.rint(np.asarray(color) * 255),
                                       0, 255))
    return f"#{r:02x}{g:02x}{b:02x}"


def _star_points(cx: float, cy: float, r: float) -> str:
    pts = []
    for i in range(10):
        radius = r if i % 2 == 0 else 0.4 * r
        angle = -np.pi / 2 + i * np.pi / 5
        pts.append(f"{cx + radius * np.cos(angle):.2f},"
                   f"{cy + radius * np.sin(angle):.2f}")
    return " ".join(pts)


def path_points(plan: ScanPlan, cell: float = CELL):
    """Visit-order marker geometry: list of (x, y, out_of_bounds)."""
    h, w = plan.height, plan.width
    coords = plan.source_coords
    raw = plan.raw_coords if plan.raw_coords is not None else coords
    if coords.ndim == 4:       # batched plan: draw the first element
        coords, raw = coords[0], raw[0]
    points = []
    for slot in plan.order:
        gy, gx = divmod(int(slot), w)
        x_n, y_n = coords[gy, gx]
        # round-half-up snap onto the nearest patch for drawing
        col = int(np.clip(np.floor(to_pixel(x_n, w) + 0.5), 0, w - 1))
        row = int(np.clip(np.floor(to_pixel(y_n, h) + 0.5), 0, h - 1))
        oob = bool(np.any(np.abs(raw[gy, gx]) > 1.0))
        points.append(((col + 0.5) * cell, (row + 0.5) * cell, oob))
    return points


def render_scan_svg(plan: ScanPlan, image: np.ndarray | None = None,
                    cell: float = CELL) -> str:
    """Serialize the plan's traversal as a standalone SVG document."""
    h, w = plan.height, plan.width
    colors = _patch_colors(image, h, w)
    width_px, height_px = w * cell, h * cell
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width_px:.0f}" '
        f'height="{height_px:.0f}" '
        f'viewBox="0 0 {width_px:.0f} {height_px:.0f}">',
    ]
    for gy in range(h):
        for gx in range(w):
            parts.append(
                f'<rect class="cell" x="{gx * cell:.2f}" y="{gy * cell:.2f}" '
                f'width="{cell:.2f}" height="{cell:.2f}" '
                f'fill="{_hex(colors[gy, gx])}"/>')

    points = path_points(plan, cell)
    for (x0, y0, _), (x1, y1, _) in zip(points, points[1:]):
        parts.append(
            f'<line class="seg" x1="{x0:.2f}" y1="{y0:.2f}" '
            f'x2="{x1:.2f}" y2="{y1:.2f}" stroke="{PATH_COLOR}" '
            f'stroke-width="{cell / 9:.2f}" stroke-opacity="0.75"/>')
    for x, y, oob in points:
        fill = OOB_COLOR if oob else PATH_COLOR
        parts.append(
            f'<circle class="marker" cx="{x:.2f}" cy="{y:.2f}" '
            f'r="{cell / 5:.2f}" fill="{fill}"/>')
    if points:
        sx, sy, _ = points[0]
        ex, ey, _ = points[-1]
        parts.append(
            f'<polygon class="start-marker" '
            f'points="{_star_points(sx, sy, cell * 0.45)}" '
            f'fill="#1971c2"/>')
        parts.append(
            f'<circle class="end-marker" cx="{ex:.2f}" cy="{ey:.2f}" '
            f'r="{cell / 3:.2f}" fill="none" stroke="#1971c2" '
            f'stroke-width="{cell / 8:.2f}"/>')
    parts.append("</svg>")
    return "\n".join(parts)
