"""Matching inputs: occupancy grids and blocked appearance similarity.

Bird's-eye grids rasterize the yaw-rotated ground footprint of a box onto
a metric grid in front of the ego vehicle; frontal-view grids rasterize
the image-plane bounding rectangle of the projected 3D box. A pair of
detections is compared by element-wise products of their grids (after the
earlier detection is ego-motion compensated into the later frame) and by
per-block dot products of their appearance vectors.

A cell is active iff its center point lies inside the shape; there is no
partial coverage. Grids flatten row-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import sparse

from .assoc import AssociationGraph
from .core import Box3D, CameraModel, Detection, EgoMotion, TrackSequence
from .errors import DataFormatError


@dataclass(frozen=True)
class BevConfig:
    """Bird's-eye grid: rows sweep lateral y, columns sweep forward x."""

    rows: int = 180
    cols: int = 200
    cell_m: float = 0.2
    x_min: float = 0.0
    y_min: float = -18.0

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0 or self.cell_m <= 0:
            raise ValueError("invalid bird's-eye grid config")

    @property
    def extent(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.x_min + self.cols * self.cell_m,
                self.y_min, self.y_min + self.rows * self.cell_m)


@dataclass(frozen=True)
class FvConfig:
    """Frontal-view grid the image plane is scaled down to."""

    rows: int = 120
    cols: int = 300

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("invalid frontal-view grid config")


@dataclass(frozen=True)
class FeatureConfig:
    bev: BevConfig = field(default_factory=BevConfig)
    fv: FvConfig = field(default_factory=FvConfig)
    appearance_blocks: int = 5
    block_len: int = 16


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Binary raster; meters_per_cell is None for image-plane grids."""

    rows: int
    cols: int
    cells: np.ndarray
    meters_per_cell: float | None
    extent: tuple[float, float, float, float]

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.uint8)
        if cells.shape != (self.rows, self.cols):
            raise ValueError(f"cell matrix shape {cells.shape} != ({self.rows}, {self.cols})")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def flat(self) -> np.ndarray:
        return self.cells.reshape(-1)


@dataclass(frozen=True, eq=False)
class PairFeatures:
    """Inputs the match scorer consumes for one candidate link."""

    appearance_sim: np.ndarray    # (blocks,)
    bev_product_flat: np.ndarray  # (rows*cols,), values in {0,1}
    fv_product_flat: np.ndarray   # (rows*cols,), values in {0,1}


@lru_cache(maxsize=8)
def _bev_cell_centers(cfg: BevConfig) -> tuple[np.ndarray, np.ndarray]:
    xs = cfg.x_min + (np.arange(cfg.cols) + 0.5) * cfg.cell_m
    ys = cfg.y_min + (np.arange(cfg.rows) + 0.5) * cfg.cell_m
    return xs, ys


def rasterize_bev(box: Box3D, cfg: BevConfig) -> OccupancyGrid:
    """Mark cells whose center lies inside the box's rotated ground footprint."""
    xs, ys = _bev_cell_centers(cfg)
    dx = xs[None, :] - box.center_x   # (1, cols)
    dy = ys[:, None] - box.center_y   # (rows, 1)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # rotate cell centers into the box frame
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    inside = (np.abs(local_x) <= box.length / 2.0) & (np.abs(local_y) <= box.width / 2.0)
    return OccupancyGrid(cfg.rows, cfg.cols, inside.astype(np.uint8),
                         cfg.cell_m, cfg.extent)


def compensate_ego(box: Box3D, ego: EgoMotion) -> Box3D:
    """Express an earlier-frame box in the later frame's ego coordinates.

    The observer advanced by v*dt between the frames, so a world-fixed
    box moves by -v*dt relative to it; yaw is unchanged (the ego motion
    model is translational).
    """
    return box.translated(-ego.vx * ego.frame_dt, -ego.vy * ego.frame_dt)


def rasterize_fv(box: Box3D, camera: CameraModel, cfg: FvConfig) -> OccupancyGrid:
    """Project the box corners and fill their image bounding rectangle.

    Boxes whose center sits behind the camera give an all-zero grid;
    corners are projected with a near-plane guard so grazing boxes stay
    finite.
    """
    extent = (0.0, camera.image_width, 0.0, camera.image_height)
    if box.center_x <= 0.0:
        return OccupancyGrid(cfg.rows, cfg.cols,
                             np.zeros((cfg.rows, cfg.cols), dtype=np.uint8), None, extent)
    uv = camera.project(box.corners_3d())
    u_min, v_min = uv.min(axis=0)
    u_max, v_max = uv.max(axis=0)
    u_centers = (np.arange(cfg.cols) + 0.5) * (camera.image_width / cfg.cols)
    v_centers = (np.arange(cfg.rows) + 0.5) * (camera.image_height / cfg.rows)
    col_hit = (u_centers >= u_min) & (u_centers <= u_max)
    row_hit = (v_centers >= v_min) & (v_centers <= v_max)
    cells = (row_hit[:, None] & col_hit[None, :]).astype(np.uint8)
    return OccupancyGrid(cfg.rows, cfg.cols, cells, None, extent)


def appearance_similarity(a: Detection, b: Detection) -> np.ndarray:
    """Per-block dot products; the learnable per-block weights live in scoring."""
    return np.einsum("ij,ij->i", a.appearance, b.appearance)


def pair_features(a: Detection, b: Detection, ego: EgoMotion,
                  camera: CameraModel, cfg: FeatureConfig) -> PairFeatures:
    """Features for a candidate link between adjacent-frame detections.

    `ego` is the observer motion over the interval between the two
    frames; a's box is compensated into b's frame before rasterization,
    for both the bird's-eye and the frontal view.
    """
    if b.frame_idx != a.frame_idx + 1:
        raise DataFormatError(
            f"pair features need adjacent frames, got {a.frame_idx} -> {b.frame_idx}"
        )
    box_a = compensate_ego(a.box3d, ego)
    bev = rasterize_bev(box_a, cfg.bev).flat * rasterize_bev(b.box3d, cfg.bev).flat
    fv = rasterize_fv(box_a, camera, cfg.fv).flat * rasterize_fv(b.box3d, camera, cfg.fv).flat
    return PairFeatures(
        appearance_sim=appearance_similarity(a, b),
        bev_product_flat=bev.astype(np.float64),
        fv_product_flat=fv.astype(np.float64),
    )


@dataclass(frozen=True, eq=False)
class GraphFeatures:
    """Per-graph feature bundle: one appearance-sim row and one sparse
    grid-product row per link variable, in link order.

    Products are {0,1}-valued, so they are stored sparse (CSR); the
    scorers consume them through sparse matmuls. Rasters are computed
    once per detection (plain for the target role, ego-compensated for
    the source role) and reused across all incident links.
    """

    app_sims: np.ndarray          # (n_links, blocks)
    bev_products: sparse.csr_matrix   # (n_links, bev rows*cols)
    fv_products: sparse.csr_matrix    # (n_links, fv rows*cols)


def compute_graph_features(graph: AssociationGraph, seq: TrackSequence,
                           cfg: FeatureConfig) -> GraphFeatures:
    layout = graph.layout
    n_links = len(layout.links)
    n_bev = cfg.bev.rows * cfg.bev.cols
    n_fv = cfg.fv.rows * cfg.fv.cols

    dets = [seq.detection(det_id) for _, det_id in layout.det_keys]
    needs_source = {j for j, _ in layout.links}
    needs_target = {k for _, k in layout.links}
    plain_bev: dict[int, np.ndarray] = {}
    plain_fv: dict[int, np.ndarray] = {}
    comp_bev: dict[int, np.ndarray] = {}
    comp_fv: dict[int, np.ndarray] = {}
    for j, det in enumerate(dets):
        if j in needs_target:
            plain_bev[j] = rasterize_bev(det.box3d, cfg.bev).flat
            plain_fv[j] = rasterize_fv(det.box3d, seq.camera, cfg.fv).flat
        if j in needs_source:
            moved = compensate_ego(det.box3d, seq.ego[det.frame_idx])
            comp_bev[j] = rasterize_bev(moved, cfg.bev).flat
            comp_fv[j] = rasterize_fv(moved, seq.camera, cfg.fv).flat

    app_sims = np.zeros((n_links, cfg.appearance_blocks))
    bev_rows, bev_cols = [], []
    fv_rows, fv_cols = [], []
    for l, (j, k) in enumerate(layout.links):
        app_sims[l] = appearance_similarity(dets[j], dets[k])
        hit = np.flatnonzero(comp_bev[j] & plain_bev[k])
        bev_rows.extend([l] * len(hit))
        bev_cols.extend(hit.tolist())
        hit = np.flatnonzero(comp_fv[j] & plain_fv[k])
        fv_rows.extend([l] * len(hit))
        fv_cols.extend(hit.tolist())

    def make_csr(rows, cols, width):
        data = np.ones(len(rows))
        return sparse.csr_matrix(
            (data, (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))),
            shape=(n_links, width))

    return GraphFeatures(
        app_sims=app_sims,
        bev_products=make_csr(bev_rows, bev_cols, n_bev),
        fv_products=make_csr(fv_rows, fv_cols, n_fv),
    )
