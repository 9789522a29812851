"""Scan-path SVG tests: document structure, marker/segment counts,
geometry of the drawn traversal, and out-of-bounds coloring."""

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from dascan.errors import ContractError
from dascan.sampling import identity_grid
from dascan.scan import ScanPlan, continuous_scan, sweeping_scan
from dascan.viz import OOB_COLOR, path_points, render_scan_svg

SVG_NS = "{http://www.w3.org/2000/svg}"


def by_class(root, name):
    return [el for el in root.iter() if el.get("class") == name]


def render_tree(plan, image=None):
    svg = render_scan_svg(plan, image=image)
    assert svg.startswith('<?xml version="1.0"')
    return ET.fromstring(svg)


def test_svg_structure_counts():
    plan = sweeping_scan(3, 4)
    root = render_tree(plan)
    n = 3 * 4
    assert len(by_class(root, "cell")) == n
    assert len(by_class(root, "marker")) == n
    assert len(by_class(root, "seg")) == n - 1
    assert len(by_class(root, "start-marker")) == 1
    assert len(by_class(root, "end-marker")) == 1


def test_raster_path_points_walk_row_major():
    pts = path_points(sweeping_scan(2, 3), cell=10.0)
    xy = [(x, y) for x, y, _ in pts]
    assert xy == [(5.0, 5.0), (15.0, 5.0), (25.0, 5.0),
                  (5.0, 15.0), (15.0, 15.0), (25.0, 15.0)]
    assert not any(oob for _, _, oob in pts)


def test_snake_segments_join_adjacent_cells():
    plan = continuous_scan(3, 3)
    pts = path_points(plan, cell=8.0)
    for (x0, y0, _), (x1, y1, _) in zip(pts, pts[1:]):
        assert abs(x1 - x0) + abs(y1 - y0) == pytest.approx(8.0)


def test_markers_follow_source_coords_not_slots():
    """A plan that samples every patch from the grid center must stack
    all markers on the center cell."""
    h = w = 3
    coords = np.zeros((h, w, 2))
    plan = ScanPlan(h, w, np.arange(9), coords)
    pts = path_points(plan, cell=10.0)
    assert {(x, y) for x, y, _ in pts} == {(15.0, 15.0)}


def test_out_of_bounds_markers_turn_gray():
    h = w = 2
    coords = identity_grid(h, w)
    raw = coords.copy()
    raw[0, 0] = (-1.7, -0.2)          # clamped slot, flagged via raw
    plan = ScanPlan(h, w, np.arange(4), coords, raw_coords=raw)
    root = render_tree(plan)
    fills = [m.get("fill") for m in by_class(root, "marker")]
    assert fills.count(OOB_COLOR) == 1
    svg_no_raw = render_scan_svg(ScanPlan(h, w, np.arange(4), coords))
    assert OOB_COLOR not in svg_no_raw


def test_image_backdrop_uses_patch_means():
    image = np.zeros((3, 4, 4))
    image[0, :2] = 1.0                 # top half pure red
    root = render_tree(sweeping_scan(2, 2), image=image)
    fills = [c.get("fill") for c in by_class(root, "cell")]
    assert fills == ["#ff0000", "#ff0000", "#000000", "#000000"]


def test_image_backdrop_rejects_bad_shape():
    with pytest.raises(ContractError):
        render_scan_svg(sweeping_scan(2, 2), image=np.zeros((4, 4)))


def test_non_divisible_image_still_renders():
    image = np.random.default_rng(0).random((3, 5, 7))
    root = render_tree(sweeping_scan(2, 2), image=image)
    assert len(by_class(root, "cell")) == 4


def test_batched_plan_draws_first_element():
    h = w = 2
    coords = np.stack([identity_grid(h, w), np.zeros((h, w, 2))])
    plan = ScanPlan(h, w, np.arange(4), coords)
    pts = path_points(plan, cell=10.0)
    assert {(x, y) for x, y, _ in pts} == {(5.0, 5.0), (15.0, 5.0),
                                           (5.0, 15.0), (15.0, 15.0)}
