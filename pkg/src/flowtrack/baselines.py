"""Handcrafted pair affinities and cross-validated binary thresholds.

Histogram-style metrics (Bhattacharyya, chi-square) treat the concatenated
appearance vector as an unnormalized histogram; inputs must be
nonnegative and are normalized to sum 1 internally. Affinity values keep
their textbook orientation (chi-square is a distance), so a fitted
threshold rule carries a direction bit along with the cut point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Detection, box2d_iou
from .errors import DataFormatError

AFFINITY_KINDS = (
    "cosine",
    "correlation",
    "bhattacharyya",
    "chi_square",
    "bbox_size",
    "bbox_position",
    "bbox_overlap",
    "orientation",
)

_EPS = 1e-12


def _histogram(det: Detection) -> np.ndarray:
    v = det.appearance_flat
    if np.any(v < 0):
        raise DataFormatError(
            "histogram-style affinities need nonnegative appearance vectors"
        )
    total = v.sum()
    return v / total if total > 0 else np.zeros_like(v)


def affinity(a: Detection, b: Detection, kind: str) -> float:
    """One scalar affinity for a detection pair; see AFFINITY_KINDS."""
    if kind == "cosine":
        va, vb = a.appearance_flat, b.appearance_flat
        return float(np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb) + _EPS))
    if kind == "correlation":
        va = a.appearance_flat - a.appearance_flat.mean()
        vb = b.appearance_flat - b.appearance_flat.mean()
        return float(np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb) + _EPS))
    if kind == "bhattacharyya":
        return float(np.sqrt(_histogram(a) * _histogram(b)).sum())
    if kind == "chi_square":
        p, q = _histogram(a), _histogram(b)
        return float(((p - q) ** 2 / (p + q + _EPS)).sum())
    if kind == "bbox_size":
        area_a, area_b = a.box2d.area, b.box2d.area
        return float(min(area_a, area_b) / max(area_a, area_b))
    if kind == "bbox_position":
        pa, pb = a.box3d, b.box3d
        return -float(np.sqrt((pa.center_x - pb.center_x) ** 2
                              + (pa.center_y - pb.center_y) ** 2
                              + (pa.center_z - pb.center_z) ** 2))
    if kind == "bbox_overlap":
        return box2d_iou(a.box2d, b.box2d)
    if kind == "orientation":
        return float(np.cos(a.box3d.yaw - b.box3d.yaw))
    raise DataFormatError(f"unknown affinity kind {kind!r}")


@dataclass(frozen=True)
class ThresholdRule:
    """Binary decision on an affinity: positive iff value >= threshold when
    predict_above, else positive iff value < threshold."""

    threshold: float
    predict_above: bool

    def predict(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        above = values >= self.threshold
        return above if self.predict_above else ~above


def rule_error(rule: ThresholdRule, values, labels) -> float:
    labels = np.asarray(labels, dtype=bool)
    return float(np.mean(rule.predict(values) != labels))


def fit_threshold(affinities, labels,
                  split: tuple[np.ndarray, np.ndarray]) -> ThresholdRule:
    """Pick the threshold (and direction) minimizing validation error.

    `split` is (train indices, validation indices). Candidate cut points
    are the midpoints between consecutive sorted distinct train values;
    ties resolve to the predict-above direction first, then the lowest
    threshold.
    """
    affinities = np.asarray(affinities, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if affinities.shape != labels.shape:
        raise DataFormatError("affinities and labels differ in length")
    if labels.all() or not labels.any():
        raise DataFormatError("threshold fitting needs both classes present")
    train_idx, val_idx = split
    train_values = np.unique(affinities[train_idx])
    if len(train_values) >= 2:
        candidates = (train_values[:-1] + train_values[1:]) / 2.0
    else:
        candidates = train_values
    val_values = affinities[val_idx]
    val_labels = labels[val_idx]

    best_rule = None
    best_err = None
    for predict_above in (True, False):
        for thr in candidates:
            rule = ThresholdRule(float(thr), predict_above)
            err = rule_error(rule, val_values, val_labels)
            if best_err is None or err < best_err:
                best_rule, best_err = rule, err
    return best_rule
