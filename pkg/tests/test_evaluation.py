import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wireglue.evaluation import (MatchCounts, average_precision, error_auc, line_repeatability,
                                 pooled_precision_recall_ap, precision_recall_ap,
                                 rotation_error_deg, rotation_summary, svg_curve)
from wireglue.estimators import rotation_about
from wireglue.features import FeatureSet, Homography, default_line_scores
from wireglue.groundtruth import Labels
from conftest import random_features


def test_exact_predictions_give_ap_one():
    gt = Labels([(0, 1), (1, 0), (2, 2)], [], [], [], [])
    pr = precision_recall_ap([(0, 1, 0.9), (1, 0, 0.5), (2, 2, 0.7)], gt)
    assert pr.average_precision == 1.0
    assert all(p == 1.0 for p in pr.precision) and pr.recall[-1] == 1.0


def test_no_predictions_ap_zero():
    assert precision_recall_ap([], Labels([(0, 0)], [], [], [], [])).average_precision == 0.0


def test_hand_enumerated_ap():
    gt = Labels([(k, k) for k in range(12)], [], [], [], [])
    # 10 predictions by descending score; wrong ones at ranks 2, 5 and 9
    wrong = {2, 5, 9}
    preds = [(k, k if k not in wrong else k + 1, 1.0 - 0.05 * k) for k in range(10)]
    pr = precision_recall_ap(preds, gt)
    # hits at ranks 1,2,4,5,7,8,9,10 (1-based positions 0,1,3,4,6,7,8,9)
    # interpolated precision at each hit: 1, 1, 5/7... envelope over later points
    hits = [0, 1, 3, 4, 6, 7, 8]
    prec = [(i + 1) / (r + 1) for i, r in enumerate(hits)]
    env = [max(prec[i:]) for i in range(len(prec))]
    ref = sum(e / 12 for e in env)
    assert math.isclose(pr.average_precision, ref, rel_tol=1e-12)


def test_ignored_features_are_dropped():
    gt = Labels([(0, 0)], [], [], [1], [])
    pr = precision_recall_ap([(1, 1, 0.9), (0, 0, 0.5)], gt)
    assert pr.average_precision == 1.0 and len(pr.precision) == 1
    counts = MatchCounts().add([(1, 1, 0.9), (0, 0, 0.5)], gt)
    assert (counts.correct, counts.predicted, counts.ground_truth) == (1, 1, 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_invariant_under_monotone_score_maps(seed):
    rng = np.random.default_rng(seed)
    gt = Labels([(k, k) for k in range(8)], [], [], [], [])
    preds = [(k, int(rng.integers(0, 8)), float(rng.uniform(0.01, 1))) for k in range(8)]
    base = precision_recall_ap(preds, gt).average_precision
    mapped = [(i, j, math.log(s) * 3 + 7) for i, j, s in preds]
    assert precision_recall_ap(mapped, gt).average_precision == base


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_pr_curve_invariants(seed):
    rng = np.random.default_rng(seed)
    gt = Labels([(k, k) for k in range(6)], [], [], [], [])
    preds = [(k, int(rng.integers(0, 6)), float(rng.random())) for k in range(6)]
    pr = precision_recall_ap(preds, gt)
    assert all(0 <= p <= 1 for p in pr.precision) and all(0 <= r <= 1 for r in pr.recall)
    assert np.all(np.diff(pr.recall) >= 0)
    assert 0.0 <= pr.average_precision <= 1.0
    gt_pred = [(i, j, float(rng.random())) for i, j in gt.matches]
    assert precision_recall_ap(gt_pred, gt).average_precision == 1.0


def test_pooled_equals_single_when_one_pair():
    gt = Labels([(0, 0), (1, 1)], [], [], [], [])
    preds = [(0, 0, 0.8), (1, 0, 0.6)]
    assert pooled_precision_recall_ap([(preds, gt)]).to_dict() == precision_recall_ap(preds, gt).to_dict()
    assert average_precision([], []) == 0.0


def test_repeatability_identity_and_disjoint():
    fs = random_features(np.random.default_rng(0), 0, 6, w=200, h=150, min_len=20)
    assert line_repeatability(fs, fs, Homography(np.eye(3))) == 100.0
    far = Homography(np.array([[1.0, 0, 500], [0, 1, 0], [0, 0, 1]]))
    assert line_repeatability(fs, fs, far) == 0.0


def test_repeatability_half_overlap():
    # A: ten horizontal lines; B keeps five of them and replaces the rest with
    # vertical lines far from every A line
    def fset(lines):
        lines = np.array(lines, dtype=float)
        desc = np.zeros((len(lines), 2, 2))
        desc[..., 0] = 1.0
        return FeatureSet(200, 150, np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)),
                          lines, default_line_scores(lines, 200, 150), desc)

    a_lines = [[[10, 10 + 12 * k], [90, 10 + 12 * k]] for k in range(10)]
    b_lines = a_lines[:5] + [[[120 + 15 * k, 10], [120 + 15 * k, 140]] for k in range(5)]
    rep = line_repeatability(fset(a_lines), fset(b_lines), Homography(np.eye(3)))
    assert rep == 50.0


def test_rotation_error_examples():
    rng = np.random.default_rng(2)
    R = rotation_about(rng.normal(size=3), 33.0)
    assert rotation_error_deg(R, R) == 0.0
    for _ in range(10):
        S = R @ rotation_about(rng.normal(size=3), 10.0)
        assert abs(rotation_error_deg(S, R) - 10.0) < 1e-9
        assert rotation_error_deg(S, R) == pytest.approx(rotation_error_deg(R, S), abs=1e-12)
    with pytest.raises(ValueError):
        rotation_error_deg(2 * R, R)
    with pytest.raises(ValueError):
        rotation_error_deg(-np.eye(3), R)


@pytest.mark.parametrize("t", [0.25, 1.0, 10.0])
def test_auc_closed_form(t):
    # curve through (0,0), (0,2/3), (t,1): area = t*(2/3+1)/2, normalised by t
    assert error_auc([0.0, 0.0, t], [t])[0] == pytest.approx(5.0 / 6.0, abs=1e-12)


def test_auc_basic_properties():
    assert error_auc([], [1.0]) == [0.0]
    assert error_auc([0.0, 0.0], [1.0]) == [1.0]
    assert error_auc([5.0], [1.0]) == [0.0]
    s = rotation_summary([0.1, 0.2, 3.0])
    assert s["median"] == 0.2 and set(s["auc"]) == {"0.25", "0.5", "1.0", "2.0", "5.0", "10.0"}


def test_svg_is_deterministic():
    a = svg_curve({"x": ([0, 0.5, 1], [1, 0.5, 0.2])}, "recall", "precision")
    assert a == svg_curve({"x": ([0, 0.5, 1], [1, 0.5, 0.2])}, "recall", "precision")
    assert a.startswith("<svg") and "polyline" in a
