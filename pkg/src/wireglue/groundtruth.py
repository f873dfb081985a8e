"""Ground-truth point and line correspondences from two-view geometry."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .features import (DepthPose, FeatureSet, Geometry, Homography, in_bounds,
                       project_with_depth, warp_points)
from .wireframe import Wireframe

MATCHED, UNMATCHED, IGNORE = "MATCHED", "UNMATCHED", "IGNORE"


@dataclass
class GtConfig:
    occlusion: float = 0.1        # relative depth tolerance
    dist: float = 5.0             # pixels, sample-to-line distance
    overlap: float = 0.2          # fraction of the K samples
    samples: int = 10             # K
    point_radius: float = 3.0     # pixels
    invalid_fraction: float = 0.5

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("samples must be >= 2")
        for name in ("occlusion", "dist", "overlap", "point_radius", "invalid_fraction"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def min_overlap_count(self) -> float:
        return self.overlap * self.samples


@dataclass
class Labels:
    """Labels of one feature kind for an image pair."""

    matches: list = field(default_factory=list)  # [(i, j)]
    unmatched_a: list = field(default_factory=list)
    unmatched_b: list = field(default_factory=list)
    ignore_a: list = field(default_factory=list)
    ignore_b: list = field(default_factory=list)

    def label_of_a(self, i: int) -> str:
        if i in self.ignore_a:
            return IGNORE
        return MATCHED if any(a == i for a, _ in self.matches) else UNMATCHED

    def partner_map(self) -> dict[int, int]:
        return {int(i): int(j) for i, j in self.matches}

    def to_dict(self) -> dict:
        return {
            "matches": [[int(i), int(j)] for i, j in self.matches],
            "unmatched_a": [int(i) for i in self.unmatched_a],
            "unmatched_b": [int(i) for i in self.unmatched_b],
            "ignore_a": [int(i) for i in self.ignore_a],
            "ignore_b": [int(i) for i in self.ignore_b],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Labels":
        return cls([(int(i), int(j)) for i, j in raw.get("matches", [])],
                   [int(i) for i in raw.get("unmatched_a", [])],
                   [int(i) for i in raw.get("unmatched_b", [])],
                   [int(i) for i in raw.get("ignore_a", [])],
                   [int(i) for i in raw.get("ignore_b", [])])

    def check(self, n_a: int, n_b: int) -> None:
        """Raise if indices are out of range or the partition is broken."""
        for side, n, idx in (("a", n_a, [i for i, _ in self.matches] + self.unmatched_a + self.ignore_a),
                             ("b", n_b, [j for _, j in self.matches] + self.unmatched_b + self.ignore_b)):
            if sorted(idx) != list(range(n)):
                raise ValueError(f"side {side} labels do not partition range({n})")


@dataclass
class GtLabels:
    points: Labels
    lines: Labels

    def to_dict(self) -> dict:
        return {"points": self.points.to_dict(), "lines": self.lines.to_dict()}

    @classmethod
    def from_dict(cls, raw: dict) -> "GtLabels":
        return cls(Labels.from_dict(raw["points"]), Labels.from_dict(raw["lines"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


# ---------------------------------------------------------------- assignment

def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment using only finite entries.

    ``+inf`` marks forbidden pairs. Rows and columns may stay unassigned, so
    pairs with positive cost are never taken. The rectangular problem is
    padded to a square one of size ``M + N`` where every real row and column
    owns a zero-cost dummy partner and forbidden entries carry a sentinel
    larger than any achievable finite total.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a matrix")
    finite = np.isfinite(c)
    if np.isnan(c).any():
        raise ValueError("cost contains NaN")
    rows = np.flatnonzero(finite.any(axis=1))
    cols = np.flatnonzero(finite.any(axis=0))
    if rows.size == 0:
        return []
    sub = c[np.ix_(rows, cols)]
    sub_finite = finite[np.ix_(rows, cols)]
    m, n = sub.shape
    big = 1.0 + 2.0 * float(np.abs(sub[sub_finite]).sum())
    square = np.zeros((m + n, m + n))
    square[:m, :n] = np.where(sub_finite, sub, big)
    col_for_row = kernels.lsap_square(square)
    out = []
    for r in range(m):
        k = int(col_for_row[r])
        if k < n and sub_finite[r, k]:
            out.append((int(rows[r]), int(cols[k])))
    return out


# ---------------------------------------------------------------- projection

def _size(obj) -> tuple[float, float]:
    return float(obj.width), float(obj.height)


def reproject(points, geom: Geometry, size_b, cfg: GtConfig):
    """Project A-image points into B; returns ``(xy_b, valid)``.

    With depth geometry a point is invalid when either depth is missing, it
    leaves image B, or it is occluded (relative depth gap above tolerance).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if isinstance(geom, Homography):
        xy = warp_points(geom.H, points)
        return xy, in_bounds(xy, *size_b)
    proj = project_with_depth(points, geom)
    valid = proj.valid.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        gap = np.abs(proj.z_target - proj.depth_target) / proj.depth_target
    valid &= gap <= cfg.occlusion
    return proj.xy, valid


def _inverse(geom: Geometry) -> Geometry:
    return geom.inverse()


def gt_point_matches(points_a, points_b, geom: Geometry, size_a, size_b,
                     cfg: GtConfig | None = None) -> Labels:
    """Mutual reprojection matches resolved one-to-one by Hungarian.

    A pair is a candidate when each point reprojects within
    ``cfg.point_radius`` of the other. Among candidate matchings the largest
    one wins, ties broken by the smallest summed mean reprojection distance.
    """
    cfg = cfg or GtConfig()
    pa = np.asarray(points_a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(points_b, dtype=np.float64).reshape(-1, 2)
    proj_a, valid_a = reproject(pa, geom, size_b, cfg)
    proj_b, valid_b = reproject(pb, _inverse(geom), size_a, cfg)
    matches: list[tuple[int, int]] = []
    if len(pa) and len(pb):
        with np.errstate(invalid="ignore"):
            d_ab = np.linalg.norm(proj_a[:, None, :] - pb[None, :, :], axis=2)
            d_ba = np.linalg.norm(pa[:, None, :] - proj_b[None, :, :], axis=2)
            r = cfg.point_radius
            cand = (valid_a[:, None] & valid_b[None, :] & (d_ab <= r) & (d_ba <= r))
        mean_d = np.where(cand, 0.5 * (d_ab + d_ba), 0.0)
        # offset exceeds any possible distance total: cardinality first
        offset = (min(len(pa), len(pb)) + 1) * r + 1.0
        cost = np.where(cand, mean_d - offset, np.inf)
        matches = sorted(hungarian(cost))
    ma = {i for i, _ in matches}
    mb = {j for _, j in matches}
    return Labels(
        matches,
        [i for i in range(len(pa)) if valid_a[i] and i not in ma],
        [j for j in range(len(pb)) if valid_b[j] and j not in mb],
        [i for i in range(len(pa)) if not valid_a[i]],
        [j for j in range(len(pb)) if not valid_b[j]],
    )


@dataclass
class LineSamples:
    points: np.ndarray     # (M, K, 2) in the source image
    projected: np.ndarray  # (M, K, 2) in the target image
    valid: np.ndarray      # (M, K)

    @property
    def invalid_fraction(self) -> np.ndarray:
        if self.valid.shape[1] == 0:
            return np.zeros(len(self.valid))
        return 1.0 - self.valid.mean(axis=1)


def sample_lines(lines, k: int) -> np.ndarray:
    """``k`` evenly spaced points per segment, endpoints included."""
    lines = np.asarray(lines, dtype=np.float64).reshape(-1, 2, 2)
    t = np.linspace(0.0, 1.0, k)
    return lines[:, None, 0, :] + t[None, :, None] * (lines[:, None, 1, :] - lines[:, None, 0, :])


def validate_line_samples(lines, geom: Geometry, size_b, cfg: GtConfig | None = None) -> LineSamples:
    cfg = cfg or GtConfig()
    pts = sample_lines(lines, cfg.samples)
    m, k = pts.shape[:2]
    xy, valid = reproject(pts.reshape(-1, 2), geom, size_b, cfg)
    return LineSamples(pts, xy.reshape(m, k, 2), valid.reshape(m, k))


@dataclass
class Closeness:
    """Counts aligned as ``[line in A, line in B]`` in both directions."""

    a_to_b: np.ndarray  # samples of A-line i landing near B-line j
    b_to_a: np.ndarray  # samples of B-line j landing near A-line i
    invalid_fraction_a: np.ndarray
    invalid_fraction_b: np.ndarray


def closeness_matrices(lines_a, lines_b, geom: Geometry, size_a, size_b,
                       cfg: GtConfig | None = None) -> Closeness:
    cfg = cfg or GtConfig()
    lines_a = np.asarray(lines_a, dtype=np.float64).reshape(-1, 2, 2)
    lines_b = np.asarray(lines_b, dtype=np.float64).reshape(-1, 2, 2)
    sa = validate_line_samples(lines_a, geom, size_b, cfg)
    sb = validate_line_samples(lines_b, _inverse(geom), size_a, cfg)
    ab = kernels.closeness_counts(sa.projected, sa.valid, lines_b, cfg.dist)
    ba = kernels.closeness_counts(sb.projected, sb.valid, lines_a, cfg.dist).T
    return Closeness(np.ascontiguousarray(ab), np.ascontiguousarray(ba),
                     sa.invalid_fraction, sb.invalid_fraction)


def line_cost_matrix(close: Closeness, cfg: GtConfig | None = None) -> np.ndarray:
    cfg = cfg or GtConfig()
    t = cfg.min_overlap_count
    ab = close.a_to_b.astype(np.float64)
    ba = close.b_to_a.astype(np.float64)
    cost = np.where((ab < t) | (ba < t), np.inf, -ab * ba)
    cost[close.invalid_fraction_a > cfg.invalid_fraction, :] = np.inf
    cost[:, close.invalid_fraction_b > cfg.invalid_fraction] = np.inf
    return cost


def line_labels(close: Closeness, cfg: GtConfig | None = None) -> Labels:
    cfg = cfg or GtConfig()
    m, n = close.a_to_b.shape
    ign_a = close.invalid_fraction_a > cfg.invalid_fraction
    ign_b = close.invalid_fraction_b > cfg.invalid_fraction
    matches = sorted(hungarian(line_cost_matrix(close, cfg)))
    ma = {i for i, _ in matches}
    mb = {j for _, j in matches}
    return Labels(
        matches,
        [i for i in range(m) if not ign_a[i] and i not in ma],
        [j for j in range(n) if not ign_b[j] and j not in mb],
        [int(i) for i in np.flatnonzero(ign_a)],
        [int(j) for j in np.flatnonzero(ign_b)],
    )


def label_lines(lines_a, lines_b, geom: Geometry, size_a, size_b,
                cfg: GtConfig | None = None) -> Labels:
    cfg = cfg or GtConfig()
    return line_labels(closeness_matrices(lines_a, lines_b, geom, size_a, size_b, cfg), cfg)


def label_pair(wa: Wireframe, wb: Wireframe, geom: Geometry,
               cfg: GtConfig | None = None) -> GtLabels:
    """Labels over wireframe nodes (points) and original line segments."""
    cfg = cfg or GtConfig()
    sa, sb = _size(wa), _size(wb)
    points = gt_point_matches(wa.node_xy, wb.node_xy, geom, sa, sb, cfg)
    lines = label_lines(wa.line_xy, wb.line_xy, geom, sa, sb, cfg)
    return GtLabels(points, lines)


def label_features(fa: FeatureSet, fb: FeatureSet, geom: Geometry,
                   cfg: GtConfig | None = None) -> GtLabels:
    """Labels over raw keypoints and lines, before any wireframe processing."""
    cfg = cfg or GtConfig()
    sa, sb = _size(fa), _size(fb)
    points = gt_point_matches(fa.keypoints, fb.keypoints, geom, sa, sb, cfg)
    lines = label_lines(fa.lines, fb.lines, geom, sa, sb, cfg)
    return GtLabels(points, lines)
