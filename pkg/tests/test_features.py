"""Occupancy grids, ego compensation, pair features."""

import math

import numpy as np
import pytest
import shapely

from flowtrack.core import Box3D, EgoMotion
from flowtrack.errors import DataFormatError
from flowtrack.features import (
    BevConfig,
    FeatureConfig,
    FvConfig,
    compensate_ego,
    pair_features,
    rasterize_bev,
    rasterize_fv,
)

from helpers import CAMERA, make_box3d, make_detection

BEV = BevConfig()  # 180 x 200 at 0.2 m, x in [0, 40], y in [-18, 18]
FV = FvConfig()


def test_bev_axis_aligned_box_at_grid_center():
    # 4 m x 2 m footprint on a 0.2 m grid covers exactly 20 x 10 cell centers
    box = make_box3d(20.0, 0.0, length=4.0, width=2.0)
    grid = rasterize_bev(box, BEV)
    assert int(grid.cells.sum()) == 200
    rows = np.flatnonzero(grid.cells.any(axis=1))
    cols = np.flatnonzero(grid.cells.any(axis=0))
    assert len(rows) == 10 and len(cols) == 20


def test_bev_box_outside_extent_is_empty():
    box = make_box3d(-30.0, 0.0)
    assert rasterize_bev(box, BEV).cells.sum() == 0


def test_bev_quarter_turn_transposes_footprint():
    straight = rasterize_bev(make_box3d(20.0, 0.0, length=4.0, width=2.0), BEV)
    turned = rasterize_bev(make_box3d(20.0, 0.0, length=4.0, width=2.0,
                                      yaw=math.pi / 2), BEV)
    swapped = rasterize_bev(make_box3d(20.0, 0.0, length=2.0, width=4.0), BEV)
    assert int(turned.cells.sum()) == int(swapped.cells.sum()) == int(straight.cells.sum())
    assert np.array_equal(turned.cells, swapped.cells)


def test_bev_cell_count_within_perimeter_band_of_analytic_area():
    # independent oracle: shapely polygon area clipped to the extent;
    # the discrepancy is bounded by (boundary-touching cells) * cell area
    rng = np.random.default_rng(3)
    xs, ys = None, None
    for _ in range(25):
        box = Box3D(rng.uniform(-5, 45), rng.uniform(-20, 20), 0.8,
                    rng.uniform(1, 6), rng.uniform(1, 3), 1.5,
                    rng.uniform(-math.pi, math.pi))
        grid = rasterize_bev(box, BEV)
        poly = shapely.Polygon(box.footprint_corners())
        x0, x1, y0, y1 = BEV.extent
        clipped = poly.intersection(shapely.box(x0, y0, x1, y1))
        cell_area = BEV.cell_m ** 2
        raster_area = float(grid.cells.sum()) * cell_area
        if xs is None:
            xs = BEV.x_min + (np.arange(BEV.cols) + 0.5) * BEV.cell_m
            ys = BEV.y_min + (np.arange(BEV.rows) + 0.5) * BEV.cell_m
            xx, yy = np.meshgrid(xs, ys)
            centers = shapely.points(np.column_stack([xx.ravel(), yy.ravel()]))
        dist = shapely.distance(centers, poly.boundary)
        half_diag = BEV.cell_m * math.sqrt(2) / 2
        perimeter_cells = int((dist <= half_diag).sum())
        assert abs(raster_area - clipped.area) <= perimeter_cells * cell_area + 1e-9


def test_compensate_ego_sign_and_inverse():
    box = make_box3d(20.0, 3.0)
    moved = compensate_ego(box, EgoMotion(10.0, 0.0, 0.1))
    assert moved.center_x == pytest.approx(19.0)  # observer advanced 1 m
    assert moved.center_y == pytest.approx(3.0)
    assert moved.yaw == box.yaw

    same = compensate_ego(box, EgoMotion(0.0, 0.0, 0.1))
    assert same == box

    there = compensate_ego(box, EgoMotion(7.3, -2.1, 0.1))
    back = compensate_ego(there, EgoMotion(-7.3, 2.1, 0.1))
    assert back.center_x == pytest.approx(box.center_x, abs=1e-12)
    assert back.center_y == pytest.approx(box.center_y, abs=1e-12)


def test_fv_behind_camera_is_empty():
    grid = rasterize_fv(make_box3d(-5.0, 0.0), CAMERA, FV)
    assert grid.cells.sum() == 0


def test_fv_centered_box_fills_centered_rectangle():
    box = Box3D(15.0, 0.0, 0.0, 0.1, 2.0, 1.5, 0.0)
    grid = rasterize_fv(box, CAMERA, FV)
    cols = np.flatnonzero(grid.cells.any(axis=0))
    rows = np.flatnonzero(grid.cells.any(axis=1))
    assert len(cols) > 0 and len(rows) > 0
    # symmetric around the principal point within one cell
    assert abs(cols[0] - (FV.cols - 1 - cols[-1])) <= 1
    assert abs(rows[0] - (FV.rows - 1 - rows[-1])) <= 1


def test_fv_doubling_distance_halves_width():
    # thin slab so the projected width is governed by a single depth
    near = rasterize_fv(Box3D(10.0, 0.0, 0.0, 0.01, 2.0, 1.4, 0.0), CAMERA, FV)
    far = rasterize_fv(Box3D(20.0, 0.0, 0.0, 0.01, 2.0, 1.4, 0.0), CAMERA, FV)
    w_near = int(near.cells.any(axis=0).sum())
    w_far = int(far.cells.any(axis=0).sum())
    assert abs(w_far - w_near / 2) <= 1


def test_pair_features_identical_detections():
    app = np.array([[1.0, 2.0, 0.5], [0.3, 0.0, 1.0]])
    a = make_detection(0, 0, 20.0, 0.0, appearance=app)
    b = make_detection(1, 1, 20.0, 0.0, appearance=app)
    cfg = FeatureConfig(appearance_blocks=2, block_len=3)
    pf = pair_features(a, b, EgoMotion(0.0, 0.0, 0.1), CAMERA, cfg)
    single = rasterize_bev(a.box3d, cfg.bev).flat
    assert np.array_equal(pf.bev_product_flat, single.astype(float))
    assert pf.appearance_sim == pytest.approx([np.dot(r, r) for r in app])


def test_pair_features_disjoint_footprints_zero_product():
    a = make_detection(0, 0, 10.0, -5.0)
    b = make_detection(1, 1, 10.0, 5.0)
    pf = pair_features(a, b, EgoMotion(0.0, 0.0, 0.1), CAMERA,
                       FeatureConfig(appearance_blocks=2, block_len=3))
    assert pf.bev_product_flat.sum() == 0


def test_pair_features_half_overlap_counts_intersection_cells():
    # axis-aligned 4 m x 2 m boxes offset by 2 m along x: intersection is
    # 2 m x 2 m = 10 x 10 cells at 0.2 m (cell centers strictly inside)
    a = make_detection(0, 0, 20.0, 0.0, box3d=make_box3d(20.0, 0.0, width=2.0))
    b = make_detection(1, 1, 22.0, 0.0, box3d=make_box3d(22.0, 0.0, width=2.0))
    pf = pair_features(a, b, EgoMotion(0.0, 0.0, 0.1), CAMERA,
                       FeatureConfig(appearance_blocks=2, block_len=3))
    assert int(pf.bev_product_flat.sum()) == 100


def test_pair_features_rejects_non_adjacent_frames():
    a = make_detection(0, 0, 20.0, 0.0)
    b = make_detection(1, 2, 20.0, 0.0)
    with pytest.raises(DataFormatError):
        pair_features(a, b, EgoMotion(0.0, 0.0, 0.1), CAMERA, FeatureConfig())


def test_appearance_similarity_is_symmetric():
    rng = np.random.default_rng(11)
    app_a = rng.uniform(0, 1, (2, 3))
    app_b = rng.uniform(0, 1, (2, 3))
    a0 = make_detection(0, 0, 20.0, 0.0, appearance=app_a)
    b1 = make_detection(1, 1, 21.0, 0.0, appearance=app_b)
    a1 = make_detection(2, 1, 20.0, 0.0, appearance=app_a)
    b0 = make_detection(3, 0, 21.0, 0.0, appearance=app_b)
    ego = EgoMotion(0.0, 0.0, 0.1)
    cfg = FeatureConfig(appearance_blocks=2, block_len=3)
    fwd = pair_features(a0, b1, ego, CAMERA, cfg)
    rev = pair_features(b0, a1, ego, CAMERA, cfg)
    assert fwd.appearance_sim == pytest.approx(rev.appearance_sim)


def _static_object_pair(ego_v):
    """World-static object seen from an ego moving at ego_v m/s.

    Positions go through world coordinates (object fixed, ego advancing)
    so the two frames' relative positions take different floating-point
    paths, as they would in real data. Returns (a, b, ego).
    """
    dt = 0.1
    world = np.array([220.0, 52.0])
    ego0 = np.array([200.0, 50.0])
    ego1 = ego0 + np.array([ego_v[0] * dt, ego_v[1] * dt])
    rel0 = world - ego0
    rel1 = world - ego1
    a = make_detection(0, 0, rel0[0], rel0[1])
    b = make_detection(1, 1, rel1[0], rel1[1])
    return a, b, EgoMotion(ego_v[0], ego_v[1], dt)


def test_ego_invariance_exact_for_cell_multiple_displacement():
    # displacement 10 m/s * 0.1 s = 1.0 m = 5 cells exactly
    cfg = FeatureConfig(appearance_blocks=2, block_len=3)
    a, b, ego = _static_object_pair((10.0, -4.0))
    moving = pair_features(a, b, ego, CAMERA, cfg)

    # zero-motion reference: same object at its frame-1 relative position
    a0 = make_detection(0, 0, b.box3d.center_x, b.box3d.center_y)
    b0 = make_detection(1, 1, b.box3d.center_x, b.box3d.center_y)
    static = pair_features(a0, b0, EgoMotion(0.0, 0.0, 0.1), CAMERA, cfg)
    assert np.array_equal(moving.bev_product_flat, static.bev_product_flat)

    # and the shifted-pattern view: the moving product equals the
    # frame-0-position product rolled by the integer cell displacement
    at0 = make_detection(0, 0, a.box3d.center_x, a.box3d.center_y)
    bt0 = make_detection(1, 1, a.box3d.center_x, a.box3d.center_y)
    static0 = pair_features(at0, bt0, EgoMotion(0.0, 0.0, 0.1), CAMERA, cfg)
    grid_static = static0.bev_product_flat.reshape(cfg.bev.rows, cfg.bev.cols)
    grid_moving = moving.bev_product_flat.reshape(cfg.bev.rows, cfg.bev.cols)
    shift_cols = round(-1.0 / cfg.bev.cell_m)   # x displacement 1.0 m
    shift_rows = round(0.4 / cfg.bev.cell_m)    # y displacement -(-0.4) m
    rolled = np.roll(np.roll(grid_static, shift_cols, axis=1), shift_rows, axis=0)
    assert np.array_equal(grid_moving, rolled)


def test_ego_invariance_fractional_displacement_within_one_ring():
    cfg = FeatureConfig(appearance_blocks=2, block_len=3)
    a, b, ego = _static_object_pair((10.7, -3.3))   # 1.07 m, -0.33 m: not cell multiples
    moving = pair_features(a, b, ego, CAMERA, cfg)
    a0 = make_detection(0, 0, b.box3d.center_x, b.box3d.center_y)
    b0 = make_detection(1, 1, b.box3d.center_x, b.box3d.center_y)
    static = pair_features(a0, b0, EgoMotion(0.0, 0.0, 0.1), CAMERA, cfg)
    gm = moving.bev_product_flat.reshape(cfg.bev.rows, cfg.bev.cols).astype(bool)
    gs = static.bev_product_flat.reshape(cfg.bev.rows, cfg.bev.cols).astype(bool)
    # disagreement only within a one-cell ring of the static pattern edge
    grown = np.zeros_like(gs)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            grown |= np.roll(np.roll(gs, dr, axis=0), dc, axis=1)
    shrunk = np.ones_like(gs)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            shrunk &= np.roll(np.roll(gs, dr, axis=0), dc, axis=1)
    assert np.all(gm <= grown)
    assert np.all(gm >= shrunk)
