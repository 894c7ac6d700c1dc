"""Hand-built fixtures shared across test modules."""

from __future__ import annotations

import itertools

import numpy as np

from flowtrack.assoc import Assignment, AssociationGraph, build_graph, check_feasible
from flowtrack.core import (
    Box2D,
    Box3D,
    CameraModel,
    Detection,
    EgoMotion,
    TrackSequence,
)

CAMERA = CameraModel(focal_u=720.0, focal_v=720.0, principal_u=621.0,
                     principal_v=187.5, image_width=1242.0, image_height=375.0)


def make_box3d(x, y, z=0.8, length=4.0, width=1.8, height=1.5, yaw=0.0):
    return Box3D(x, y, z, length, width, height, yaw)


def make_box2d(left=100.0, top=120.0, right=200.0, bottom=190.0):
    return Box2D(left, top, right, bottom)


def make_detection(det_id, frame_idx, x, y, appearance=None, blocks=2, block_len=3,
                   box2d=None, yaw=0.0, box3d=None):
    if appearance is None:
        appearance = np.zeros((blocks, block_len))
    if box2d is None:
        # distinct, valid 2D boxes keyed off the id so fixtures stay unique
        off = 5.0 * det_id
        box2d = Box2D(100.0 + off, 120.0, 200.0 + off, 190.0)
    if box3d is None:
        box3d = make_box3d(x, y, yaw=yaw)
    return Detection(det_id, frame_idx, box3d, box2d,
                     np.asarray(appearance, dtype=float))


def make_sequence(frames, ego=None):
    """frames: list of lists of Detection (frame_idx must already match)."""
    n = len(frames)
    if ego is None:
        ego = [EgoMotion(0.0, 0.0, 0.1)] * n
    return TrackSequence(tuple(tuple(f) for f in frames), tuple(ego), CAMERA)


def sequence_from_positions(positions, blocks=2, block_len=3, ego=None):
    """positions: list per frame of (x, y) tuples; det ids assigned frame-major."""
    frames = []
    det_id = 0
    for f, frame_positions in enumerate(positions):
        frame = []
        for (x, y) in frame_positions:
            frame.append(make_detection(det_id, f, x, y, blocks=blocks, block_len=block_len))
            det_id += 1
        frames.append(frame)
    return make_sequence(frames, ego=ego)


def enumerate_feasible(graph: AssociationGraph):
    """Literal all-binary-vectors enumeration filtered by check_feasible.

    The reference oracle for tiny instances; iteration order is
    lexicographic with variable 0 as the most significant position.
    """
    m = graph.n_vars
    assert m <= 16, "literal enumeration is for tiny instances only"
    for bits in itertools.product((0, 1), repeat=m):
        assignment = Assignment(np.array(bits, dtype=np.uint8))
        ok, _ = check_feasible(graph, assignment)
        if ok:
            yield assignment


def brute_force_optimum(graph: AssociationGraph):
    """(objective, assignment) by literal enumeration; lexicographically
    smallest vector wins ties."""
    best = None
    best_obj = None
    for assignment in enumerate_feasible(graph):
        obj = float(np.dot(graph.costs, assignment.values))
        if best is None or obj > best_obj:
            best, best_obj = assignment, obj
    return best_obj, best
