"""Matching metrics: precision/recall, AP, line repeatability, rotation AUC."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .groundtruth import GtConfig, Labels, label_lines
from .features import FeatureSet, Geometry

ROTATION_AUC_THRESHOLDS = (0.25, 0.5, 1.0, 2.0, 5.0, 10.0)


@dataclass
class PrCurve:
    thresholds: list = field(default_factory=list)
    precision: list = field(default_factory=list)
    recall: list = field(default_factory=list)
    average_precision: float = 0.0
    num_gt: int = 0

    def to_dict(self) -> dict:
        return {"thresholds": self.thresholds, "precision": self.precision,
                "recall": self.recall, "average_precision": self.average_precision,
                "num_gt": self.num_gt}


def _score_predictions(predicted, gt: Labels):
    """Drop predictions touching IGNORE features; flag the correct ones."""
    ign_a, ign_b = set(gt.ignore_a), set(gt.ignore_b)
    truth = set((int(i), int(j)) for i, j in gt.matches)
    kept = [(float(s), (int(i), int(j)) in truth)
            for i, j, s in predicted if int(i) not in ign_a and int(j) not in ign_b]
    return kept, len(truth)


def _curve(kept, num_gt: int) -> PrCurve:
    if not kept:
        return PrCurve([], [], [], 0.0, num_gt)
    order = sorted(range(len(kept)), key=lambda k: -kept[k][0])  # stable on ties
    scores = np.array([kept[k][0] for k in order])
    hits = np.array([kept[k][1] for k in order], dtype=np.float64)
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / num_gt if num_gt else np.zeros_like(tp)
    return PrCurve(scores.tolist(), precision.tolist(), recall.tolist(),
                   average_precision(precision, recall), num_gt)


def average_precision(precision: Sequence[float], recall: Sequence[float]) -> float:
    """All-points interpolated AP: sum of recall steps times the best
    precision reachable at or beyond each step."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    if p.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(p[::-1])[::-1]
    # merge runs of equal envelope so recall differences telescope exactly
    ends = np.flatnonzero(np.append(envelope[1:] != envelope[:-1], True))
    r_end = r[ends]
    r_start = np.concatenate([[0.0], r_end[:-1]])
    return float(((r_end - r_start) * envelope[ends]).sum())


def precision_recall_ap(predicted: Iterable, gt: Labels) -> PrCurve:
    """PR curve of ``(i, j, score)`` predictions against ground truth."""
    kept, num_gt = _score_predictions(predicted, gt)
    return _curve(kept, num_gt)


def pooled_precision_recall_ap(pairs: Iterable[tuple[Iterable, Labels]]) -> PrCurve:
    """PR curve over predictions pooled from many image pairs."""
    kept_all, gt_total = [], 0
    for predicted, gt in pairs:
        kept, num_gt = _score_predictions(predicted, gt)
        kept_all.extend(kept)
        gt_total += num_gt
    return _curve(kept_all, gt_total)


@dataclass
class MatchCounts:
    correct: int = 0
    predicted: int = 0
    ground_truth: int = 0

    def add(self, predicted, gt: Labels) -> "MatchCounts":
        kept, num_gt = _score_predictions(predicted, gt)
        self.correct += sum(1 for _, ok in kept if ok)
        self.predicted += len(kept)
        self.ground_truth += num_gt
        return self

    @property
    def precision(self) -> float:
        return self.correct / self.predicted if self.predicted else 1.0

    @property
    def recall(self) -> float:
        return self.correct / self.ground_truth if self.ground_truth else 1.0


def line_repeatability(fa: FeatureSet, fb: FeatureSet, geom: Geometry,
                       cfg: GtConfig | None = None) -> float:
    """Line correspondences as a percentage of the mean line count."""
    labels = label_lines(fa.lines, fb.lines, geom, (fa.width, fa.height),
                         (fb.width, fb.height), cfg)
    denom = max(1.0, (fa.num_lines + fb.num_lines) / 2.0)
    return 100.0 * len(labels.matches) / denom


# ---------------------------------------------------------------- rotations

def _check_rotation(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or np.linalg.det(r) <= 0:
        raise ValueError("not a rotation matrix")
    return r


def rotation_error_deg(r_est, r_gt) -> float:
    r_est, r_gt = _check_rotation(r_est), _check_rotation(r_gt)
    d = r_gt.T @ r_est
    cos = (np.trace(d) - 1.0) / 2.0
    # same angle as arccos(cos), but atan2 keeps precision near zero
    sin = 0.5 * math.sqrt((d[2, 1] - d[1, 2]) ** 2 + (d[0, 2] - d[2, 0]) ** 2
                          + (d[1, 0] - d[0, 1]) ** 2)
    return math.degrees(math.atan2(sin, cos))


def error_auc(errors: Sequence[float], thresholds: Sequence[float] = ROTATION_AUC_THRESHOLDS) -> list[float]:
    """Area under the cumulative error curve up to each threshold, divided by
    the threshold.

    The curve is piecewise linear through ``(0, 0)`` and ``(e_k, k / n)`` for
    the sorted errors; errors equal to a threshold count as within it.
    """
    errs = np.sort(np.asarray(errors, dtype=np.float64))
    n = len(errs)
    if n == 0:
        return [0.0 for _ in thresholds]
    recall = np.arange(1, n + 1) / n
    errs = np.concatenate([[0.0], errs])
    recall = np.concatenate([[0.0], recall])
    out = []
    for t in thresholds:
        last = int(np.searchsorted(errs, t, side="right"))
        x = np.concatenate([errs[:last], [t]])
        y = np.concatenate([recall[:last], [recall[last - 1]]])
        out.append(float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0) / t))
    return out


def rotation_summary(errors: Sequence[float],
                     thresholds: Sequence[float] = ROTATION_AUC_THRESHOLDS) -> dict:
    errs = np.asarray(errors, dtype=np.float64)
    return {
        "mean": float(errs.mean()) if errs.size else float("nan"),
        "median": float(np.median(errs)) if errs.size else float("nan"),
        "auc": {str(t): a for t, a in zip(thresholds, error_auc(errs, thresholds))},
    }


# ---------------------------------------------------------------- plots

def svg_curve(series: dict[str, tuple[Sequence[float], Sequence[float]]], xlabel: str,
              ylabel: str, xmax: float = 1.0, ymax: float = 1.0) -> str:
    """Minimal deterministic SVG line plot."""
    w, h, pad = 360, 300, 40
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<rect x="{pad}" y="{pad // 2}" width="{w - 1.5 * pad:.0f}" '
             f'height="{h - 1.5 * pad:.0f}" fill="none" stroke="black"/>',
             f'<text x="{w / 2:.0f}" y="{h - 8}" text-anchor="middle" font-size="12">{xlabel}</text>',
             f'<text x="12" y="{h / 2:.0f}" font-size="12" transform="rotate(-90 12 {h / 2:.0f})" '
             f'text-anchor="middle">{ylabel}</text>']
    for k, (name, (xs, ys)) in enumerate(series.items()):
        pts = " ".join(
            f"{pad + (w - 1.5 * pad) * min(x, xmax) / xmax:.2f},"
            f"{pad / 2 + (h - 1.5 * pad) * (1 - min(y, ymax) / ymax):.2f}"
            for x, y in zip(xs, ys))
        colour = colours[k % len(colours)]
        parts.append(f'<polyline fill="none" stroke="{colour}" points="{pts}"/>')
        parts.append(f'<text x="{pad + 8}" y="{pad + 14 * k + 4}" font-size="11" '
                     f'fill="{colour}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
