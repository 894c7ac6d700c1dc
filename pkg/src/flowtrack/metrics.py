"""Tracking evaluation: CLEAR MOT bookkeeping, MT/ML coverage, matching accuracy.

Per-frame correspondence keeps the previous frame's ground-truth/hypothesis
matches while they still overlap (the CLEAR persistence rule) and resolves
the rest by maximum-similarity bipartite matching. Accuracy folds misses,
false positives and identity switches into one number; precision averages
the overlap (or distance similarity) of matched pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BoxTrack, LabeledBox, TrackSequence, Trajectory, box2d_iou
from .errors import DataFormatError


@dataclass(frozen=True)
class MotReport:
    mota: float
    motp: float
    ids: int
    frag: int
    fp: int
    fn: int
    mt_fraction: float
    ml_fraction: float
    n_gt_boxes: int
    n_gt_tracks: int
    matches_per_frame: dict[int, list[tuple[int, int, float]]]  # frame -> (gt, hyp, sim)


def trajectories_to_box_tracks(trajectories: list[Trajectory],
                               seq: TrackSequence) -> list[BoxTrack]:
    """Resolve decoded det-id chains into per-frame boxes for evaluation."""
    out = []
    for traj in trajectories:
        entries = []
        for frame_idx, det_id in traj.entries:
            det = seq.detection(det_id)
            entries.append(LabeledBox(frame_idx, det.box3d, det.box2d))
        out.append(BoxTrack(traj.track_id, entries))
    return out


def _similarity(g: LabeledBox, h: LabeledBox, mode: str, dist_threshold: float) -> float:
    """Similarity in [0, 1]; values below the validity cut return 0-."""
    if mode == "iou2d":
        return box2d_iou(g.box2d, h.box2d)
    dist = float(np.hypot(g.box3d.center_x - h.box3d.center_x,
                          g.box3d.center_y - h.box3d.center_y))
    return max(0.0, 1.0 - dist / dist_threshold)


def evaluate(hyp_tracks: list[BoxTrack], gt_tracks: list[BoxTrack],
             iou_threshold: float = 0.5, mode: str = "iou2d",
             dist_threshold_m: float = 1.0) -> MotReport:
    """CLEAR MOT evaluation of hypothesis tracks against ground truth.

    mode "iou2d" matches on image-plane IoU with validity cut
    `iou_threshold`; mode "dist3d" matches on ground-plane center distance
    within `dist_threshold_m`, with similarity 1 - d/threshold.
    """
    if mode not in ("iou2d", "dist3d"):
        raise DataFormatError(f"unknown evaluation mode {mode!r}")
    n_gt_boxes = sum(len(t.entries) for t in gt_tracks)
    if n_gt_boxes == 0:
        raise DataFormatError("empty ground truth: accuracy is undefined")
    min_sim = iou_threshold if mode == "iou2d" else 0.0

    def valid(sim: float) -> bool:
        if mode == "iou2d":
            return sim >= iou_threshold
        return sim > 0.0

    gt_by_frame: dict[int, list[tuple[int, LabeledBox]]] = {}
    for t in gt_tracks:
        for e in t.entries:
            gt_by_frame.setdefault(e.frame_idx, []).append((t.track_id, e))
    hyp_by_frame: dict[int, list[tuple[int, LabeledBox]]] = {}
    for t in hyp_tracks:
        for e in t.entries:
            hyp_by_frame.setdefault(e.frame_idx, []).append((t.track_id, e))

    frames = sorted(set(gt_by_frame) | set(hyp_by_frame))
    last_match: dict[int, int] = {}    # gt id -> last hyp id it was matched to
    prev_frame: dict[int, int] = {}    # gt id -> hyp id matched in previous frame
    covered: dict[int, set[int]] = {t.track_id: set() for t in gt_tracks}
    fp = fn = ids = 0
    sim_sum = 0.0
    sim_count = 0
    matches_per_frame: dict[int, list[tuple[int, int, float]]] = {}

    for f in frames:
        gts = gt_by_frame.get(f, [])
        hyps = hyp_by_frame.get(f, [])
        gt_boxes = {gid: box for gid, box in gts}
        hyp_boxes = {hid: box for hid, box in hyps}

        matches: dict[int, int] = {}
        # persistence: keep yesterday's pairs that still overlap
        for gid, hid in prev_frame.items():
            if gid in gt_boxes and hid in hyp_boxes and hid not in matches.values():
                sim = _similarity(gt_boxes[gid], hyp_boxes[hid], mode, dist_threshold_m)
                if valid(sim):
                    matches[gid] = hid

        free_gt = [gid for gid in gt_boxes if gid not in matches]
        taken = set(matches.values())
        free_hyp = [hid for hid in hyp_boxes if hid not in taken]
        if free_gt and free_hyp:
            sim_matrix = np.zeros((len(free_gt), len(free_hyp)))
            for i, gid in enumerate(free_gt):
                for j, hid in enumerate(free_hyp):
                    sim_matrix[i, j] = _similarity(gt_boxes[gid], hyp_boxes[hid],
                                                   mode, dist_threshold_m)
            rows, cols = linear_sum_assignment(-sim_matrix)
            for i, j in zip(rows, cols):
                if valid(sim_matrix[i, j]):
                    matches[free_gt[i]] = free_hyp[j]

        frame_matches = []
        for gid, hid in sorted(matches.items()):
            sim = _similarity(gt_boxes[gid], hyp_boxes[hid], mode, dist_threshold_m)
            sim_sum += sim
            sim_count += 1
            covered[gid].add(f)
            if gid in last_match and last_match[gid] != hid:
                ids += 1
            last_match[gid] = hid
            frame_matches.append((gid, hid, sim))
        matches_per_frame[f] = frame_matches

        fn += len(gt_boxes) - len(matches)
        fp += len(hyp_boxes) - len(matches)
        prev_frame = matches

    frag = 0
    mt = ml = 0
    for t in gt_tracks:
        track_frames = [e.frame_idx for e in t.entries]
        hits = [f in covered[t.track_id] for f in track_frames]
        # coverage interruptions: covered -> hole -> covered again
        in_gap = False
        seen_hit = False
        for hit in hits:
            if hit:
                if seen_hit and in_gap:
                    frag += 1
                seen_hit = True
                in_gap = False
            elif seen_hit:
                in_gap = True
        frac = sum(hits) / len(hits)
        if frac > 0.8:
            mt += 1
        if frac < 0.2:
            ml += 1

    motp = sim_sum / sim_count if sim_count else 0.0
    return MotReport(
        mota=1.0 - (fn + fp + ids) / n_gt_boxes,
        motp=motp,
        ids=ids,
        frag=frag,
        fp=fp,
        fn=fn,
        mt_fraction=mt / len(gt_tracks),
        ml_fraction=ml / len(gt_tracks),
        n_gt_boxes=n_gt_boxes,
        n_gt_tracks=len(gt_tracks),
        matches_per_frame=matches_per_frame,
    )


def aggregate_reports(reports: list[MotReport]) -> MotReport:
    """Pool per-sequence reports: counts add, ratios recompute.

    Precision is weighted by match count, MT/ML by track count. Per-frame
    match lists are dropped (frame indices collide across sequences).
    """
    if not reports:
        raise DataFormatError("nothing to aggregate")
    fn = sum(r.fn for r in reports)
    fp = sum(r.fp for r in reports)
    ids = sum(r.ids for r in reports)
    frag = sum(r.frag for r in reports)
    n_gt = sum(r.n_gt_boxes for r in reports)
    n_tracks = sum(r.n_gt_tracks for r in reports)
    matches = [sum(len(m) for m in r.matches_per_frame.values()) for r in reports]
    total_matches = sum(matches)
    motp = (sum(r.motp * c for r, c in zip(reports, matches)) / total_matches
            if total_matches else 0.0)
    return MotReport(
        mota=1.0 - (fn + fp + ids) / n_gt,
        motp=motp,
        ids=ids,
        frag=frag,
        fp=fp,
        fn=fn,
        mt_fraction=sum(r.mt_fraction * r.n_gt_tracks for r in reports) / n_tracks,
        ml_fraction=sum(r.ml_fraction * r.n_gt_tracks for r in reports) / n_tracks,
        n_gt_boxes=n_gt,
        n_gt_tracks=n_tracks,
        matches_per_frame={},
    )


def matching_accuracy(scores, labels) -> float:
    """Fraction of pair predictions misclassified at score threshold 0."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.size == 0:
        raise DataFormatError("no pairs to score")
    if scores.shape != labels.shape:
        raise DataFormatError("scores and labels differ in length")
    predicted = scores > 0.0
    return float(np.mean(predicted != labels))


_REPORT_FIELDS = ("mota", "motp", "ids", "frag", "fp", "fn",
                  "mt_fraction", "ml_fraction", "n_gt_boxes", "n_gt_tracks")


def report_to_text(report: MotReport) -> str:
    """Flat key = value rendering, one metric per line."""
    lines = []
    for name in _REPORT_FIELDS:
        value = getattr(report, name)
        if isinstance(value, float):
            lines.append(f"{name} = {value:.6f}")
        else:
            lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def report_to_json(report: MotReport) -> str:
    payload = {name: getattr(report, name) for name in _REPORT_FIELDS}
    payload["matches_per_frame"] = {
        str(f): [[g, h, round(s, 6)] for g, h, s in m]
        for f, m in sorted(report.matches_per_frame.items())
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
