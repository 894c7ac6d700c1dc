"""Shared domain types: boxes, detections, sequences, trajectories.

Coordinate conventions (fixed once, used everywhere):
  * ego frame: x forward, y left, z up, meters; yaw rotates about z and is
    stored wrapped to [-pi, pi).
  * image frame: u right, v down, pixels.

All types here are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import InfeasibleAssignmentError

if TYPE_CHECKING:
    from .assoc import AssociationGraph, Assignment


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box in the ego frame; center is the 3D centroid."""

    center_x: float
    center_y: float
    center_z: float
    length: float  # extent along the box x axis (heading)
    width: float   # extent along the box y axis
    height: float  # extent along z
    yaw: float     # heading about z, [-pi, pi)

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0 and self.height > 0):
            raise ValueError(
                f"box dimensions must be positive, got "
                f"{self.length}x{self.width}x{self.height}"
            )
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def translated(self, dx: float, dy: float) -> "Box3D":
        return Box3D(self.center_x + dx, self.center_y + dy, self.center_z,
                     self.length, self.width, self.height, self.yaw)

    def footprint_corners(self) -> np.ndarray:
        """Ground-plane corners, (4, 2) array of (x, y)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.center_x, self.center_y])

    def corners_3d(self) -> np.ndarray:
        """All eight corners, (8, 3) array of (x, y, z)."""
        ground = self.footprint_corners()
        hh = self.height / 2.0
        bottom = np.column_stack([ground, np.full(4, self.center_z - hh)])
        top = np.column_stack([ground, np.full(4, self.center_z + hh)])
        return np.vstack([bottom, top])


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image-plane box in pixels."""

    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self):
        if not (self.right > self.left and self.bottom > self.top):
            raise ValueError(
                f"degenerate 2D box [{self.left},{self.top},{self.right},{self.bottom}]"
            )

    @property
    def area(self) -> float:
        return (self.right - self.left) * (self.bottom - self.top)


def box2d_iou(a: Box2D, b: Box2D) -> float:
    """Intersection over union of two image-plane boxes."""
    iw = min(a.right, b.right) - max(a.left, b.left)
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True, eq=False)
class Detection:
    """One candidate object in one frame.

    `appearance` is a (blocks, block_len) array standing in for per-stage
    pooled activations; block count and length are fixed per sequence.
    """

    det_id: int
    frame_idx: int
    box3d: Box3D
    box2d: Box2D
    appearance: np.ndarray
    raw_score: float | None = None

    def __post_init__(self):
        if self.frame_idx < 0:
            raise ValueError(f"negative frame index {self.frame_idx}")
        app = np.asarray(self.appearance, dtype=np.float64)
        if app.ndim != 2:
            raise ValueError(f"appearance must be 2D (blocks, block_len), got shape {app.shape}")
        app.setflags(write=False)
        object.__setattr__(self, "appearance", app)

    @property
    def appearance_flat(self) -> np.ndarray:
        return self.appearance.reshape(-1)


@dataclass(frozen=True)
class EgoMotion:
    """Observer velocity during one inter-frame interval."""

    vx: float
    vy: float
    frame_dt: float

    def __post_init__(self):
        if not self.frame_dt > 0:
            raise ValueError(f"frame_dt must be positive, got {self.frame_dt}")


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera looking along ego +x; u grows to the right (-y), v downward (-z)."""

    focal_u: float
    focal_v: float
    principal_u: float
    principal_v: float
    image_width: float
    image_height: float

    def __post_init__(self):
        if not (self.focal_u > 0 and self.focal_v > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.principal_u <= self.image_width
                and 0 <= self.principal_v <= self.image_height):
            raise ValueError("principal point outside image")

    def project(self, points: np.ndarray) -> np.ndarray:
        """(n, 3) ego-frame points (x > 0) -> (n, 2) pixel coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        x = np.maximum(pts[:, 0], 1e-9)  # guard near-plane division
        u = self.principal_u + self.focal_u * (-pts[:, 1] / x)
        v = self.principal_v + self.focal_v * (-pts[:, 2] / x)
        return np.column_stack([u, v])


@dataclass(frozen=True, eq=False)
class TrackSequence:
    """Frames of candidate detections plus per-frame ego motion and the camera."""

    frames: tuple[tuple[Detection, ...], ...]
    ego: tuple[EgoMotion, ...]
    camera: CameraModel

    def __post_init__(self):
        frames = tuple(tuple(f) for f in self.frames)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "ego", tuple(self.ego))
        if len(self.ego) != len(frames):
            raise ValueError(
                f"need one EgoMotion per frame, got {len(self.ego)} for {len(frames)} frames"
            )
        by_id: dict[int, Detection] = {}
        app_shape = None
        for i, frame in enumerate(frames):
            for det in frame:
                if det.frame_idx != i:
                    raise ValueError(
                        f"detection {det.det_id} has frame_idx {det.frame_idx}, stored in frame {i}"
                    )
                if det.det_id in by_id:
                    raise ValueError(f"duplicate det_id {det.det_id}")
                if app_shape is None:
                    app_shape = det.appearance.shape
                elif det.appearance.shape != app_shape:
                    raise ValueError(
                        f"appearance shape {det.appearance.shape} for detection "
                        f"{det.det_id} differs from {app_shape}"
                    )
                by_id[det.det_id] = det
        object.__setattr__(self, "_by_id", by_id)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def detection(self, det_id: int) -> Detection:
        return self._by_id[det_id]


@dataclass(frozen=True)
class Trajectory:
    """A decoded track: adjacent-frame chain of (frame_idx, det_id) entries."""

    track_id: int
    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(tuple(e) for e in self.entries))
        if not self.entries:
            raise ValueError("empty trajectory")
        frames = [f for f, _ in self.entries]
        for a, b in zip(frames, frames[1:]):
            if b != a + 1:
                raise ValueError(
                    f"trajectory frames must advance by exactly 1, got {a} -> {b}"
                )

    @property
    def start_frame(self) -> int:
        return self.entries[0][0]

    @property
    def det_ids(self) -> tuple[int, ...]:
        return tuple(d for _, d in self.entries)


@dataclass(frozen=True)
class LabeledBox:
    """One ground-truth box instance in one frame."""

    frame_idx: int
    box3d: Box3D
    box2d: Box2D


@dataclass(frozen=True)
class BoxTrack:
    """A labeled trajectory: per-frame boxes under one identity.

    Unlike Trajectory, frame gaps are allowed (real annotations have
    occlusion holes); frames must be strictly increasing.
    """

    track_id: int
    entries: tuple[LabeledBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise ValueError("empty track")
        frames = [e.frame_idx for e in self.entries]
        for a, b in zip(frames, frames[1:]):
            if b <= a:
                raise ValueError(f"track frames must be strictly increasing, got {a} -> {b}")

    @property
    def frames(self) -> tuple[int, ...]:
        return tuple(e.frame_idx for e in self.entries)


def decode_trajectories(assignment: "Assignment", graph: "AssociationGraph") -> list[Trajectory]:
    """Turn a feasible binary assignment into node-disjoint trajectories.

    Every active detection ends up in exactly one trajectory; each
    trajectory starts at an active entry variable, follows active link
    variables, and terminates at an active exit variable. The walk itself
    re-validates both flow equalities per detection and raises
    InfeasibleAssignmentError naming the first offender.

    Track ids are assigned 1, 2, ... in order of (start frame, detection
    position within the window), so decoding is deterministic.
    """
    layout = graph.layout
    v = assignment.values
    n = layout.n_dets

    successor: list[int | None] = [None] * n
    incoming_new: list[bool] = [False] * n
    for j in range(n):
        det_id = layout.det_keys[j][1]
        active = int(v[layout.det_var(j)])
        n_in = int(v[layout.new_var(j)]) + int(sum(v[i] for i in graph.in_links[j]))
        n_out = int(v[layout.end_var(j)]) + int(sum(v[i] for i in graph.out_links[j]))
        if n_in != active:
            raise InfeasibleAssignmentError(det_id, "incoming")
        if n_out != active:
            raise InfeasibleAssignmentError(det_id, "outgoing")
        incoming_new[j] = bool(v[layout.new_var(j)])
        for var in graph.out_links[j]:
            if v[var]:
                successor[j] = layout.link_target(var)

    trajectories: list[Trajectory] = []
    for j in range(n):
        if not incoming_new[j]:
            continue
        entries = []
        cur: int | None = j
        while cur is not None:
            frame_idx, det_id = layout.det_keys[cur]
            entries.append((frame_idx, det_id))
            cur = successor[cur]
        trajectories.append(Trajectory(len(trajectories) + 1, tuple(entries)))
    return trajectories
