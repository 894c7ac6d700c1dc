"""Affinity metrics and threshold fitting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtrack.baselines import (
    AFFINITY_KINDS,
    ThresholdRule,
    affinity,
    fit_threshold,
    rule_error,
)
from flowtrack.core import Box2D
from flowtrack.errors import DataFormatError

from helpers import make_box3d, make_detection


def _det_with_hist(det_id, frame, hist, box2d=None, x=10.0, y=0.0, yaw=0.0):
    app = np.asarray(hist, dtype=float).reshape(2, -1)
    return make_detection(det_id, frame, x, y, appearance=app, box2d=box2d, yaw=yaw)


def test_identical_histograms():
    h = [0.1, 0.2, 0.3, 0.25, 0.1, 0.05]
    a = _det_with_hist(0, 0, h)
    b = _det_with_hist(1, 1, h)
    assert affinity(a, b, "bhattacharyya") == pytest.approx(1.0)
    assert affinity(a, b, "chi_square") == pytest.approx(0.0, abs=1e-9)
    assert affinity(a, b, "cosine") == pytest.approx(1.0)


def test_disjoint_support_histograms():
    a = _det_with_hist(0, 0, [1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    b = _det_with_hist(1, 1, [0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
    assert affinity(a, b, "bhattacharyya") == pytest.approx(0.0)
    assert affinity(a, b, "cosine") == pytest.approx(0.0)


def test_histogram_metric_rejects_negative_appearance():
    a = _det_with_hist(0, 0, [0.5, -0.1, 0.2, 0.1, 0.2, 0.1])
    b = _det_with_hist(1, 1, [0.5, 0.1, 0.2, 0.1, 0.05, 0.05])
    with pytest.raises(DataFormatError):
        affinity(a, b, "bhattacharyya")


def test_bbox_overlap_analytic_value():
    # 30-wide boxes overlapping by 15 horizontally: IoU = 15/45 = 1/3
    box_a = Box2D(100.0, 100.0, 130.0, 160.0)
    box_b = Box2D(115.0, 100.0, 145.0, 160.0)
    a = make_detection(0, 0, 10.0, 0.0, box2d=box_a)
    b = make_detection(1, 1, 10.0, 0.0, box2d=box_b)
    assert affinity(a, b, "bbox_overlap") == pytest.approx(1.0 / 3.0, abs=1e-9)


def test_bbox_size_and_position_and_orientation():
    a = make_detection(0, 0, 10.0, 0.0, box2d=Box2D(0, 0, 10, 10))
    b = make_detection(1, 1, 13.0, 4.0, box2d=Box2D(0, 0, 20, 10))
    assert affinity(a, b, "bbox_size") == pytest.approx(0.5)
    assert affinity(a, b, "bbox_position") == pytest.approx(-5.0)
    c = make_detection(2, 1, 10.0, 0.0, yaw=np.pi / 3)
    assert affinity(a, c, "orientation") == pytest.approx(0.5)


def test_unknown_kind_rejected():
    a = make_detection(0, 0, 10.0, 0.0)
    with pytest.raises(DataFormatError):
        affinity(a, a, "histogram_of_vibes")


def test_affinities_symmetric():
    rng = np.random.default_rng(5)
    a = _det_with_hist(0, 0, rng.uniform(0, 1, 6), box2d=Box2D(10, 10, 60, 40),
                       x=12.0, y=1.0, yaw=0.3)
    b = _det_with_hist(1, 1, rng.uniform(0, 1, 6), box2d=Box2D(20, 12, 80, 42),
                       x=14.0, y=-1.0, yaw=-0.2)
    for kind in AFFINITY_KINDS:
        assert affinity(a, b, kind) == pytest.approx(affinity(b, a, kind), abs=1e-12), kind


@given(st.floats(min_value=0.1, max_value=100.0))
@settings(max_examples=30, deadline=None)
def test_cosine_invariant_to_rescaling(scale):
    rng = np.random.default_rng(17)
    va = rng.uniform(0.1, 1, 6)
    vb = rng.uniform(0.1, 1, 6)
    a = _det_with_hist(0, 0, va)
    b = _det_with_hist(1, 1, vb)
    b_scaled = _det_with_hist(2, 1, vb * scale)
    assert affinity(a, b_scaled, "cosine") == pytest.approx(
        affinity(a, b, "cosine"), rel=1e-9)


def test_fit_threshold_separable():
    values = np.array([0.1, 0.2, 0.3, 0.7, 0.8, 0.9] * 4)
    labels = values > 0.5
    idx = np.arange(len(values))
    rule = fit_threshold(values, labels, (idx[::2], idx[1::2]))
    assert rule_error(rule, values, labels) == 0.0
    assert rule.predict_above


def test_fit_threshold_on_distance_valued_affinity():
    # chi-square style: small value means same object
    values = np.array([0.05, 0.1, 0.15, 1.2, 1.5, 1.9] * 4)
    labels = values < 0.5
    idx = np.arange(len(values))
    rule = fit_threshold(values, labels, (idx[::2], idx[1::2]))
    assert not rule.predict_above
    assert rule_error(rule, values, labels) == 0.0


def test_fit_threshold_single_class_errors():
    values = np.array([0.1, 0.2, 0.3, 0.4])
    with pytest.raises(DataFormatError):
        fit_threshold(values, np.ones(4, dtype=bool), (np.arange(2), np.arange(2, 4)))


def test_fit_threshold_matches_scripted_sweep():
    rng = np.random.default_rng(123)
    pos = rng.normal(1.0, 0.5, 60)
    neg = rng.normal(0.0, 0.5, 60)
    values = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(60, bool), np.zeros(60, bool)])
    order = rng.permutation(120)
    values, labels = values[order], labels[order]
    train_idx, val_idx = np.arange(0, 80), np.arange(80, 120)

    rule = fit_threshold(values, labels, (train_idx, val_idx))

    # independent sweep scripted from scratch
    tv = np.unique(values[train_idx])
    mids = (tv[:-1] + tv[1:]) / 2.0
    best = None
    for above in (True, False):
        for thr in mids:
            pred = values[val_idx] >= thr
            if not above:
                pred = ~pred
            err = float(np.mean(pred != labels[val_idx]))
            if best is None or err < best[0]:
                best = (err, above, float(thr))
    assert rule.predict_above == best[1]
    assert rule.threshold == best[2]
    assert rule_error(rule, values[val_idx], labels[val_idx]) == best[0]


def test_chance_level_labels_give_chance_error():
    rng = np.random.default_rng(7)
    values = rng.uniform(0, 1, 400)
    labels = rng.uniform(0, 1, 400) < 0.3   # labels independent of score
    idx = rng.permutation(400)
    rule = fit_threshold(values, labels, (idx[:200], idx[200:300]))
    err = rule_error(rule, values[idx[300:]], labels[idx[300:]])
    minority = min(labels[idx[300:]].mean(), 1 - labels[idx[300:]].mean())
    assert err <= minority + 0.05
