"""Pure rotation from point and line matches between calibrated views.

Points lift to unit bearings, lines to the unit normal of the plane through
the camera centre and the segment. Both kinds are aligned with a weighted
Kabsch solve inside a RANSAC loop that samples mixed minimal sets.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import svd3

POINT, LINE_NORMAL = "POINT", "LINE_NORMAL"


class DegenerateConfiguration(ValueError):
    pass


def _inv_k(K) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    if K.shape != (3, 3):
        raise ValueError("K must be 3x3")
    if abs(np.linalg.det(K)) < 1e-12 * max(1.0, np.abs(K).max()) ** 3:
        raise ValueError("K is singular")
    return np.linalg.inv(K)


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def lift_point(x, K) -> np.ndarray:
    """Unit bearing(s) ``normalize(K^-1 [x, y, 1])``; accepts (2,) or (n, 2)."""
    x = np.asarray(x, dtype=np.float64)
    h = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
    return _normalize(h @ _inv_k(K).T)


def lift_line(endpoints, K) -> np.ndarray:
    """Unit normal(s) of the plane through the centre and the segment.

    Accepts (2, 2) or (n, 2, 2). Swapping endpoints negates the normal.
    """
    e = np.asarray(endpoints, dtype=np.float64)
    kinv = _inv_k(K)
    h = np.concatenate([e, np.ones(e.shape[:-1] + (1,))], axis=-1) @ kinv.T
    n = np.cross(h[..., 0, :], h[..., 1, :])
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(norm <= 1e-15):
        raise ValueError("line endpoints coincide")
    return n / norm


def fix_normal_signs(n_a, n_b) -> tuple[np.ndarray, np.ndarray]:
    """Flip ``n_b`` where it points away from ``n_a``; a zero dot keeps it."""
    n_a = np.asarray(n_a, dtype=np.float64)
    n_b = np.asarray(n_b, dtype=np.float64)
    dot = np.sum(n_a * n_b, axis=-1, keepdims=True)
    return n_a, np.where(dot < 0, -n_b, n_b)


@dataclass
class BearingPair:
    v_a: np.ndarray
    v_b: np.ndarray
    kind: str = POINT
    weight: float = 1.0

    def __post_init__(self):
        self.v_a = np.asarray(self.v_a, dtype=np.float64)
        self.v_b = np.asarray(self.v_b, dtype=np.float64)
        for v in (self.v_a, self.v_b):
            if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ValueError("bearings must be unit 3-vectors")
        if self.kind not in (POINT, LINE_NORMAL):
            raise ValueError(f"unknown kind {self.kind!r}")


def kabsch_rotation(v_a, v_b, weights=None) -> np.ndarray:
    """``argmin_R sum w ||v_b - R v_a||^2`` over proper rotations."""
    v_a = np.asarray(v_a, dtype=np.float64).reshape(-1, 3)
    v_b = np.asarray(v_b, dtype=np.float64).reshape(-1, 3)
    if len(v_a) != len(v_b) or len(v_a) < 2:
        raise ValueError("need at least two vector pairs")
    w = np.ones(len(v_a)) if weights is None else np.asarray(weights, dtype=np.float64)
    cov = (v_b * w[:, None]).T @ v_a
    u, s, v = svd3(cov)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateConfiguration("vector pairs are collinear")
    # U diag(1, 1, det) V^T with the third axes taken as cross products, which
    # stays exact when the covariance has rank two (the minimal case)
    u3 = np.cross(u[:, 0], u[:, 1])
    v3 = np.cross(v[:, 0], v[:, 1])
    R = np.outer(u[:, 0], v[:, 0]) + np.outer(u[:, 1], v[:, 1]) + np.outer(u3, v3)
    return R


def kabsch_pairs(pairs: list[BearingPair]) -> np.ndarray:
    return kabsch_rotation([p.v_a for p in pairs], [p.v_b for p in pairs],
                           [p.weight for p in pairs])


def angular_residuals_deg(R, v_a, v_b, kinds) -> np.ndarray:
    """Angle between ``R v_a`` and ``v_b``; line normals are compared up to sign."""
    rv = np.asarray(v_a).reshape(-1, 3) @ np.asarray(R).T
    cos = np.sum(rv * np.asarray(v_b).reshape(-1, 3), axis=1)
    is_line = np.asarray(kinds) == LINE_NORMAL
    cos = np.where(is_line, np.abs(cos), cos)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


@dataclass
class RansacConfig:
    iterations: int = 200
    threshold_deg: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0 or self.threshold_deg <= 0:
            raise ValueError("iterations and threshold must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RansacResult:
    success: bool
    R: np.ndarray | None
    point_inliers: list = field(default_factory=list)
    line_inliers: list = field(default_factory=list)

    @property
    def num_inliers(self) -> int:
        return len(self.point_inliers) + len(self.line_inliers)


def hybrid_ransac_rotation(points_a, points_b, lines_a, lines_b, K_a, K_b,
                           cfg: RansacConfig | None = None) -> RansacResult:
    """Rotation from matched pixel points ``(n, 2)`` and segments ``(m, 2, 2)``.

    Each iteration draws two matches: the kind of each draw follows the match
    counts, points are uniform and lines are weighted by the square root of
    their length in A.
    """
    cfg = cfg or RansacConfig()
    pa = np.asarray(points_a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(points_b, dtype=np.float64).reshape(-1, 2)
    la = np.asarray(lines_a, dtype=np.float64).reshape(-1, 2, 2)
    lb = np.asarray(lines_b, dtype=np.float64).reshape(-1, 2, 2)
    if len(pa) != len(pb) or len(la) != len(lb):
        raise ValueError("match arrays differ in length")
    n_p, n_l = len(pa), len(la)
    if n_p + n_l < 2:
        raise ValueError("need at least two matches")

    va = np.concatenate([lift_point(pa, K_a).reshape(-1, 3), lift_line(la, K_a).reshape(-1, 3)])
    vb = np.concatenate([lift_point(pb, K_b).reshape(-1, 3), lift_line(lb, K_b).reshape(-1, 3)])
    # sign-fix the line normals once so every minimal solve sees consistent pairs
    va[n_p:], vb[n_p:] = fix_normal_signs(va[n_p:], vb[n_p:])
    kinds = np.array([POINT] * n_p + [LINE_NORMAL] * n_l)
    lengths = np.linalg.norm(la[:, 0] - la[:, 1], axis=1) if n_l else np.zeros(0)
    line_w = np.sqrt(lengths)
    line_p = line_w / line_w.sum() if n_l and line_w.sum() > 0 else None
    p_point = n_p / (n_p + n_l)

    best_count, best_mask = 1, None
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        chosen: list[int] = []
        for _ in range(50):
            if len(chosen) == 2:
                break
            if rng.random() < p_point:
                k = int(rng.integers(n_p))
            else:
                k = n_p + int(rng.choice(n_l, p=line_p))
            if k not in chosen:
                chosen.append(k)
        if len(chosen) < 2:
            continue
        try:
            R = kabsch_rotation(va[chosen], vb[chosen])
        except DegenerateConfiguration:
            continue
        mask = angular_residuals_deg(R, va, vb, kinds) < cfg.threshold_deg
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None:
        return RansacResult(False, None)
    try:
        R = kabsch_rotation(va[best_mask], vb[best_mask])
    except DegenerateConfiguration:
        return RansacResult(False, None)
    idx = np.flatnonzero(best_mask)
    return RansacResult(True, R, [int(i) for i in idx if i < n_p],
                        [int(i - n_p) for i in idx if i >= n_p])


def rotation_about(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation, handy for planted scenes."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    t = math.radians(angle_deg)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(t) * k + (1 - math.cos(t)) * (k @ k)
