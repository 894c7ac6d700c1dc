"""Association problem construction.

Variable layout, linkable-pair enumeration, the two flow-conservation
equalities per detection, and derivation of gold assignments from labeled
trajectories.

Variable order is dense and fixed: detection variables first (one per
detection, window order, frame-major), then entry variables, then exit
variables, then link variables sorted by (source index, target index).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Box2D, BoxTrack, TrackSequence, Trajectory, box2d_iou
from .errors import DataFormatError


@dataclass(frozen=True)
class GateConfig:
    """Optional link gate: drop candidate links whose 3D centers are far apart.

    radius_m None disables gating (every adjacent-frame pair is linkable).
    """

    radius_m: float | None = None


@dataclass(frozen=True, eq=False)
class VariableLayout:
    """Index bookkeeping for one association problem.

    det j occupies variable j, its entry variable n_dets + j, its exit
    variable 2*n_dets + j; link l occupies 3*n_dets + l.
    """

    det_keys: tuple[tuple[int, int], ...]   # (frame_idx, det_id) per detection
    links: tuple[tuple[int, int], ...]      # (source det index, target det index)

    def __post_init__(self):
        object.__setattr__(self, "_det_index", {k: j for j, k in enumerate(self.det_keys)})

    @property
    def n_dets(self) -> int:
        return len(self.det_keys)

    @property
    def n_vars(self) -> int:
        return 3 * len(self.det_keys) + len(self.links)

    def det_var(self, j: int) -> int:
        return j

    def new_var(self, j: int) -> int:
        return self.n_dets + j

    def end_var(self, j: int) -> int:
        return 2 * self.n_dets + j

    def link_var(self, l: int) -> int:
        return 3 * self.n_dets + l

    def link_source(self, var: int) -> int:
        return self.links[var - 3 * self.n_dets][0]

    def link_target(self, var: int) -> int:
        return self.links[var - 3 * self.n_dets][1]

    def det_index(self, frame_idx: int, det_id: int) -> int:
        return self._det_index[(frame_idx, det_id)]


@dataclass(frozen=True, eq=False)
class AssociationGraph:
    """Layout + per-detection constraint sparsity + cost vector for one window."""

    layout: VariableLayout
    in_links: tuple[tuple[int, ...], ...]   # incoming link variable indices per det
    out_links: tuple[tuple[int, ...], ...]  # outgoing link variable indices per det
    costs: np.ndarray                       # aligned with layout, zeroed at build
    window: tuple[int, int]                 # [start, stop) frame range

    def __post_init__(self):
        costs = np.asarray(self.costs, dtype=np.float64)
        if costs.shape != (self.layout.n_vars,):
            raise ValueError(f"cost vector shape {costs.shape} != ({self.layout.n_vars},)")
        costs.setflags(write=False)
        object.__setattr__(self, "costs", costs)

    @property
    def n_vars(self) -> int:
        return self.layout.n_vars

    def with_costs(self, costs: np.ndarray) -> "AssociationGraph":
        """Same structure, new cost vector (graphs stay immutable)."""
        return replace(self, costs=np.array(costs, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Assignment:
    """Binary value per variable."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.uint8)
        if v.ndim != 1:
            raise ValueError("assignment must be a flat vector")
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("assignment values must be 0 or 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class Violation:
    """First violated flow equality: which detection, which side."""

    det_index: int
    det_id: int
    side: str      # "incoming" or "outgoing"
    lhs: int
    rhs: int


@dataclass(frozen=True, eq=False)
class GoldAssignment:
    """Ground-truth variable values plus the count of GT boxes left unmatched."""

    assignment: Assignment
    unmatched_gt_count: int


def build_graph(seq: TrackSequence, window: tuple[int, int],
                gate: GateConfig = GateConfig()) -> AssociationGraph:
    """Lay out variables and constraints for the detections in a frame window.

    One detection/entry/exit variable triple per detection; one link
    variable per adjacent-frame ordered pair passing the gate. Costs are
    zeroed; scoring fills them in later via `with_costs`.
    """
    start, stop = window
    if not (0 <= start < stop <= seq.n_frames):
        raise DataFormatError(
            f"window [{start}, {stop}) empty or outside sequence of {seq.n_frames} frames"
        )

    det_keys: list[tuple[int, int]] = []
    frame_slices: list[list[int]] = []
    for f in range(start, stop):
        indices = []
        for det in seq.frames[f]:
            indices.append(len(det_keys))
            det_keys.append((f, det.det_id))
        frame_slices.append(indices)

    def center(j: int) -> np.ndarray:
        f, det_id = det_keys[j]
        b = seq.detection(det_id).box3d
        return np.array([b.center_x, b.center_y, b.center_z])

    links: list[tuple[int, int]] = []
    for fi in range(len(frame_slices) - 1):
        for j in frame_slices[fi]:
            for k in frame_slices[fi + 1]:
                if gate.radius_m is not None:
                    if float(np.linalg.norm(center(j) - center(k))) > gate.radius_m:
                        continue
                links.append((j, k))

    layout = VariableLayout(tuple(det_keys), tuple(links))
    n = layout.n_dets
    in_links: list[list[int]] = [[] for _ in range(n)]
    out_links: list[list[int]] = [[] for _ in range(n)]
    for l, (j, k) in enumerate(links):
        out_links[j].append(layout.link_var(l))
        in_links[k].append(layout.link_var(l))

    return AssociationGraph(
        layout=layout,
        in_links=tuple(tuple(x) for x in in_links),
        out_links=tuple(tuple(x) for x in out_links),
        costs=np.zeros(layout.n_vars),
        window=(start, stop),
    )


def check_feasible(graph: AssociationGraph, assignment: Assignment) -> tuple[bool, Violation | None]:
    """Do both flow equalities hold at every detection?

    Returns (True, None) or (False, first violation) scanning detections
    in window order, incoming equality before outgoing.
    """
    v = assignment.values
    layout = graph.layout
    if len(v) != layout.n_vars:
        raise DataFormatError(
            f"assignment length {len(v)} != variable count {layout.n_vars}"
        )
    for j in range(layout.n_dets):
        det = int(v[layout.det_var(j)])
        inc = int(v[layout.new_var(j)]) + int(sum(int(v[i]) for i in graph.in_links[j]))
        if inc != det:
            return False, Violation(j, layout.det_keys[j][1], "incoming", inc, det)
        out = int(v[layout.end_var(j)]) + int(sum(int(v[i]) for i in graph.out_links[j]))
        if out != det:
            return False, Violation(j, layout.det_keys[j][1], "outgoing", out, det)
    return True, None


def encode_trajectories(graph: AssociationGraph, trajectories: list[Trajectory]) -> Assignment:
    """Inverse of decode: set the variables a set of trajectories implies.

    Trajectories must be node-disjoint and every consecutive entry pair
    must correspond to an existing link variable.
    """
    layout = graph.layout
    v = np.zeros(layout.n_vars, dtype=np.uint8)
    for traj in trajectories:
        indices = [layout.det_index(f, d) for f, d in traj.entries]
        for j in indices:
            if v[layout.det_var(j)]:
                raise DataFormatError(
                    f"detection {layout.det_keys[j][1]} appears in two trajectories"
                )
            v[layout.det_var(j)] = 1
        v[layout.new_var(indices[0])] = 1
        v[layout.end_var(indices[-1])] = 1
        for j, k in zip(indices, indices[1:]):
            try:
                l = layout.links.index((j, k))
            except ValueError:
                raise DataFormatError(
                    f"no link variable between detections "
                    f"{layout.det_keys[j][1]} and {layout.det_keys[k][1]}"
                ) from None
            v[layout.link_var(l)] = 1
    return Assignment(v)


def derive_gold(graph: AssociationGraph, seq: TrackSequence,
                gt_tracks: list[BoxTrack], iou_threshold: float = 0.5) -> GoldAssignment:
    """Derive ground-truth variable values from labeled trajectories.

    Per frame, candidates are matched to GT boxes by maximum-weight
    bipartite matching on 2D IoU; pairs below `iou_threshold` are
    discarded. Matched candidates become active; consecutive-frame
    candidates matched to the same track id are linked when the link
    variable exists (gating or coverage holes split a track into
    fragments, each with its own entry/exit). Feasible by construction.
    """
    layout = graph.layout
    start, stop = graph.window

    # (frame -> [(track_id, box2d)]) within the window
    gt_by_frame: dict[int, list[tuple[int, Box2D]]] = {f: [] for f in range(start, stop)}
    for track in gt_tracks:
        for entry in track.entries:
            if start <= entry.frame_idx < stop:
                gt_by_frame[entry.frame_idx].append((track.track_id, entry.box2d))

    # det index -> matched GT track id
    matched_track: dict[int, int] = {}
    unmatched_gt = 0
    for f in range(start, stop):
        cand_indices = [j for j, (fj, _) in enumerate(layout.det_keys) if fj == f]
        gt_list = gt_by_frame[f]
        if not gt_list:
            continue
        if not cand_indices:
            unmatched_gt += len(gt_list)
            continue
        iou = np.zeros((len(cand_indices), len(gt_list)))
        for a, j in enumerate(cand_indices):
            box = seq.detection(layout.det_keys[j][1]).box2d
            for b, (_, gt_box) in enumerate(gt_list):
                iou[a, b] = box2d_iou(box, gt_box)
        rows, cols = linear_sum_assignment(-iou)
        taken_gt = set()
        for a, b in zip(rows, cols):
            if iou[a, b] >= iou_threshold:
                matched_track[cand_indices[a]] = gt_list[b][0]
                taken_gt.add(b)
        unmatched_gt += len(gt_list) - len(taken_gt)

    link_index = {pair: l for l, pair in enumerate(layout.links)}
    v = np.zeros(layout.n_vars, dtype=np.uint8)
    has_in: dict[int, bool] = {}
    has_out: dict[int, bool] = {}
    for j, track_id in matched_track.items():
        v[layout.det_var(j)] = 1
        has_in[j] = False
        has_out[j] = False
    for j, track_id in matched_track.items():
        f = layout.det_keys[j][0]
        for k, other_track in matched_track.items():
            if other_track != track_id or layout.det_keys[k][0] != f + 1:
                continue
            l = link_index.get((j, k))
            if l is not None:
                v[layout.link_var(l)] = 1
                has_out[j] = True
                has_in[k] = True
    for j in matched_track:
        if not has_in[j]:
            v[layout.new_var(j)] = 1
        if not has_out[j]:
            v[layout.end_var(j)] = 1

    gold = Assignment(v)
    ok, violation = check_feasible(graph, gold)
    assert ok, f"gold assignment infeasible: {violation}"
    return GoldAssignment(gold, unmatched_gt)
