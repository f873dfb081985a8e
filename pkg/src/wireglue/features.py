"""Per-image features, two-view geometry and their JSON files."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .numerics import atomic_write_text

UNIT_TOL = 1e-6


class FeatureFileError(ValueError):
    """Raised for malformed or inconsistent feature/geometry/match files."""


@dataclass
class FeatureSet:
    """Keypoints and line segments detected in one image.

    Arrays: ``keypoints`` (P, 2), ``kp_scores`` (P,), ``kp_desc`` (P, D),
    ``lines`` (M, 2, 2) as [[x1, y1], [x2, y2]], ``line_scores`` (M,),
    ``line_desc`` (M, 2, D) holding one descriptor per endpoint.
    """

    width: float
    height: float
    keypoints: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    kp_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kp_desc: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    lines: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    line_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    line_desc: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 0)))

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        self.kp_scores = np.asarray(self.kp_scores, dtype=np.float64).reshape(-1)
        self.lines = np.asarray(self.lines, dtype=np.float64).reshape(-1, 2, 2)
        self.line_scores = np.asarray(self.line_scores, dtype=np.float64).reshape(-1)
        dim = self.desc_dim_hint()
        self.kp_desc = np.asarray(self.kp_desc, dtype=np.float64).reshape(len(self.keypoints), dim)
        self.line_desc = np.asarray(self.line_desc, dtype=np.float64).reshape(len(self.lines), 2, dim)

    def desc_dim_hint(self) -> int:
        arrays = [np.asarray(a) for a in (self.kp_desc, self.line_desc)]
        for arr in arrays:
            if arr.size:
                return arr.shape[-1]
        for arr, ndim in zip(arrays, (2, 3)):
            if arr.ndim == ndim:  # empty but shaped
                return arr.shape[-1]
        return 0

    @property
    def desc_dim(self) -> int:
        return self.kp_desc.shape[1]

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)

    @property
    def num_lines(self) -> int:
        return len(self.lines)

    def validate(self) -> None:
        w, h = self.width, self.height
        if not (w > 0 and h > 0):
            raise FeatureFileError(f"image size must be positive, got {w}x{h}")
        for i, (x, y) in enumerate(self.keypoints):
            if not (0 <= x < w and 0 <= y < h):
                raise FeatureFileError(f"keypoint {i} at ({x}, {y}) is outside the {w}x{h} image")
        for i, seg in enumerate(self.lines):
            for x, y in seg:
                if not (0 <= x < w and 0 <= y < h):
                    raise FeatureFileError(f"line {i} endpoint ({x}, {y}) is outside the image")
            if np.all(seg[0] == seg[1]):
                raise FeatureFileError(f"line {i} has zero length")
        norms = np.linalg.norm(self.kp_desc, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
        if bad.size:
            raise FeatureFileError(f"keypoint {bad[0]} descriptor is not unit length")
        norms = np.linalg.norm(self.line_desc, axis=2)
        bad = np.argwhere(np.abs(norms - 1.0) > UNIT_TOL)
        if bad.size:
            raise FeatureFileError(f"line {bad[0][0]} endpoint descriptor is not unit length")


def default_line_scores(lines: np.ndarray, width: float, height: float) -> np.ndarray:
    """Segment length over the image diagonal."""
    lines = np.asarray(lines, dtype=np.float64).reshape(-1, 2, 2)
    return np.linalg.norm(lines[:, 1] - lines[:, 0], axis=1) / np.hypot(width, height)


# ---------------------------------------------------------------- geometry

@dataclass
class Homography:
    H: np.ndarray

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(self.H)) < 1e-12:
            raise FeatureFileError("homography is singular")

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.H))


@dataclass
class DepthPose:
    """Pinhole cameras with z-depth maps; ``R, t`` map A-frame points to B."""

    K_a: np.ndarray
    K_b: np.ndarray
    R: np.ndarray
    t: np.ndarray
    depth_a: np.ndarray
    depth_b: np.ndarray

    def __post_init__(self):
        self.K_a = np.asarray(self.K_a, dtype=np.float64).reshape(3, 3)
        self.K_b = np.asarray(self.K_b, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.depth_a = np.asarray(self.depth_a, dtype=np.float64)
        self.depth_b = np.asarray(self.depth_b, dtype=np.float64)
        for name in ("K_a", "K_b"):
            k = getattr(self, name)
            if np.any(np.tril(k, -1) != 0) or np.any(np.diag(k) <= 0):
                raise FeatureFileError(f"{name} must be upper-triangular with positive diagonal")
        if (np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-6
                or np.linalg.det(self.R) <= 0):
            raise FeatureFileError("R is not a rotation")

    def inverse(self) -> "DepthPose":
        return DepthPose(self.K_b, self.K_a, self.R.T, -self.R.T @ self.t,
                         self.depth_b, self.depth_a)


Geometry = Union[Homography, DepthPose]


def warp_points(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.asarray(H).T
    return hom[:, :2] / hom[:, 2:3]


def sample_depth(depth: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Nearest-neighbour lookup; pixel (c, r) covers [c-0.5, c+0.5)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    h, w = depth.shape
    out = np.zeros(len(pts))
    finite = np.all(np.isfinite(pts), axis=1)
    cols = np.floor(np.where(finite, pts[:, 0], -1.0) + 0.5).astype(np.int64)
    rows = np.floor(np.where(finite, pts[:, 1], -1.0) + 0.5).astype(np.int64)
    inside = finite & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    out[inside] = depth[rows[inside], cols[inside]]
    return out


@dataclass
class Projection:
    xy: np.ndarray          # (n, 2) position in the target image
    X: np.ndarray           # (n, 3) unprojected point, source camera frame
    z_target: np.ndarray    # (n,) depth of X seen from the target camera
    depth_target: np.ndarray  # (n,) depth map value at xy (<= 0 if missing)
    valid: np.ndarray       # (n,) bool


def in_bounds(xy: np.ndarray, width: float, height: float) -> np.ndarray:
    xy = np.asarray(xy).reshape(-1, 2)
    with np.errstate(invalid="ignore"):
        return ((xy[:, 0] >= 0) & (xy[:, 0] < width)
                & (xy[:, 1] >= 0) & (xy[:, 1] < height))


def project_with_depth(pts, geom: DepthPose) -> Projection:
    """Project pixel points of image A into image B through depth and pose.

    For the B-to-A direction pass ``geom.inverse()``.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    d_a = sample_depth(geom.depth_a, pts)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    rays = hom @ np.linalg.inv(geom.K_a).T
    X = rays * d_a[:, None]
    Xb = X @ geom.R.T + geom.t
    z_b = Xb[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = Xb @ geom.K_b.T
        xy = proj[:, :2] / proj[:, 2:3]
    hb, wb = geom.depth_b.shape
    ok = (d_a > 0) & (z_b > 0)
    xy = np.where(ok[:, None], xy, np.nan)
    ok &= in_bounds(xy, wb, hb)
    d_b = sample_depth(geom.depth_b, np.where(ok[:, None], xy, -1.0))
    ok &= d_b > 0
    return Projection(xy, X, z_b, d_b, ok)


def plane_homography(K_a, K_b, R, t, normal, distance) -> np.ndarray:
    """Homography induced by the plane ``normal . X = distance`` (A frame)."""
    n = np.asarray(normal, dtype=np.float64).reshape(3)
    H = np.asarray(K_b) @ (np.asarray(R) + np.outer(np.asarray(t).reshape(3), n) / distance) \
        @ np.linalg.inv(K_a)
    return H / H[2, 2]


# ---------------------------------------------------------------- JSON I/O

def _num(x) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise TypeError(f"expected a number, got {x!r}")
    return float(x)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=False) + "\n"


def _clean(x: float):
    x = float(x)
    return int(x) if x.is_integer() and abs(x) < 2 ** 53 else x


def feature_set_to_dict(fs: FeatureSet) -> dict:
    return {
        "width": _clean(fs.width),
        "height": _clean(fs.height),
        "keypoints": [
            {"x": float(p[0]), "y": float(p[1]), "score": float(s), "desc": [float(v) for v in d]}
            for p, s, d in zip(fs.keypoints, fs.kp_scores, fs.kp_desc)
        ],
        "lines": [
            {"x1": float(seg[0, 0]), "y1": float(seg[0, 1]),
             "x2": float(seg[1, 0]), "y2": float(seg[1, 1]),
             "score": float(s),
             "desc1": [float(v) for v in d[0]], "desc2": [float(v) for v in d[1]]}
            for seg, s, d in zip(fs.lines, fs.line_scores, fs.line_desc)
        ],
    }


def feature_set_from_dict(raw: dict) -> FeatureSet:
    if not isinstance(raw, dict):
        raise FeatureFileError("feature file must hold a JSON object")
    try:
        width, height = _num(raw["width"]), _num(raw["height"])
    except (KeyError, TypeError) as exc:
        raise FeatureFileError(f"bad or missing image size: {exc}") from None
    dim = None

    def desc(vec, where):
        nonlocal dim
        if not isinstance(vec, list):
            raise FeatureFileError(f"{where}: descriptor must be a list")
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise FeatureFileError(
                f"{where}: descriptor length {len(vec)} does not match {dim}")
        return [_num(v) for v in vec]

    kps, kp_s, kp_d = [], [], []
    for i, rec in enumerate(raw.get("keypoints", [])):
        where = f"keypoint {i}"
        try:
            kps.append((_num(rec["x"]), _num(rec["y"])))
            kp_s.append(_num(rec["score"]))
            kp_d.append(desc(rec["desc"], where))
        except (KeyError, TypeError) as exc:
            raise FeatureFileError(f"{where}: malformed record ({exc})") from None
    segs, l_s, l_d = [], [], []
    for i, rec in enumerate(raw.get("lines", [])):
        where = f"line {i}"
        try:
            segs.append(((_num(rec["x1"]), _num(rec["y1"])), (_num(rec["x2"]), _num(rec["y2"]))))
            l_s.append(_num(rec["score"]))
            l_d.append((desc(rec["desc1"], where), desc(rec["desc2"], where)))
        except (KeyError, TypeError) as exc:
            raise FeatureFileError(f"{where}: malformed record ({exc})") from None
    dim = dim or 0
    fs = FeatureSet(
        width, height,
        np.array(kps, dtype=np.float64).reshape(-1, 2),
        np.array(kp_s, dtype=np.float64),
        np.array(kp_d, dtype=np.float64).reshape(len(kps), dim),
        np.array(segs, dtype=np.float64).reshape(-1, 2, 2),
        np.array(l_s, dtype=np.float64),
        np.array(l_d, dtype=np.float64).reshape(len(segs), 2, dim),
    )
    fs.validate()
    return fs


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FeatureFileError(f"{path}: invalid JSON ({exc})") from None


def load_feature_set(path) -> FeatureSet:
    try:
        return feature_set_from_dict(_read_json(path))
    except FeatureFileError as exc:
        raise FeatureFileError(f"{path}: {exc}") from None


def save_feature_set(fs: FeatureSet, path) -> None:
    atomic_write_text(path, _dumps(feature_set_to_dict(fs)))


def _depth_to_dict(depth: np.ndarray) -> dict:
    h, w = depth.shape
    return {"width": w, "height": h, "data": [float(v) for v in depth.reshape(-1)]}


def _depth_from_dict(raw) -> np.ndarray:
    w, h = int(raw["width"]), int(raw["height"])
    data = np.array(raw["data"], dtype=np.float64)
    if data.size != w * h:
        raise FeatureFileError(f"depth map has {data.size} values for {w}x{h}")
    return data.reshape(h, w)


def geometry_to_dict(geom: Geometry) -> dict:
    if isinstance(geom, Homography):
        return {"type": "homography", "H": geom.H.tolist()}
    return {
        "type": "depth_pose",
        "K_a": geom.K_a.tolist(), "K_b": geom.K_b.tolist(),
        "R": geom.R.tolist(), "t": geom.t.tolist(),
        "depth_a": _depth_to_dict(geom.depth_a),
        "depth_b": _depth_to_dict(geom.depth_b),
    }


def geometry_from_dict(raw: dict) -> Geometry:
    try:
        kind = raw["type"]
        if kind == "homography":
            return Homography(np.array(raw["H"], dtype=np.float64))
        if kind == "depth_pose":
            return DepthPose(raw["K_a"], raw["K_b"], raw["R"], raw["t"],
                             _depth_from_dict(raw["depth_a"]), _depth_from_dict(raw["depth_b"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FeatureFileError(f"malformed geometry: {exc}") from None
    raise FeatureFileError(f"unknown geometry type {raw.get('type')!r}")


def load_geometry(path) -> Geometry:
    return geometry_from_dict(_read_json(path))


def save_geometry(geom: Geometry, path) -> None:
    atomic_write_text(path, _dumps(geometry_to_dict(geom)))


# ---------------------------------------------------------------- match files

@dataclass
class MatchFile:
    points: list = field(default_factory=list)  # [(i, j, score)]
    lines: list = field(default_factory=list)
    unmatched_points_a: list = field(default_factory=list)
    unmatched_points_b: list = field(default_factory=list)
    unmatched_lines_a: list = field(default_factory=list)
    unmatched_lines_b: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "points": [[int(i), int(j), float(s)] for i, j, s in self.points],
            "lines": [[int(i), int(j), float(s)] for i, j, s in self.lines],
            "unmatched": {
                "points_a": [int(i) for i in self.unmatched_points_a],
                "points_b": [int(i) for i in self.unmatched_points_b],
                "lines_a": [int(i) for i in self.unmatched_lines_a],
                "lines_b": [int(i) for i in self.unmatched_lines_b],
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MatchFile":
        def triples(key):
            out = []
            for k, rec in enumerate(raw.get(key, [])):
                if not (isinstance(rec, list) and len(rec) == 3):
                    raise FeatureFileError(f"{key} entry {k} must be [i, j, score]")
                i, j, s = int(rec[0]), int(rec[1]), _num(rec[2])
                if i < 0 or j < 0 or not 0.0 <= s <= 1.0:
                    raise FeatureFileError(f"{key} entry {k} out of range")
                out.append((i, j, s))
            return out

        un = raw.get("unmatched", {})
        return cls(triples("points"), triples("lines"),
                   list(un.get("points_a", [])), list(un.get("points_b", [])),
                   list(un.get("lines_a", [])), list(un.get("lines_b", [])))


def load_match_file(path) -> MatchFile:
    return MatchFile.from_dict(_read_json(path))


def save_match_file(mf: MatchFile, path) -> None:
    atomic_write_text(path, _dumps(mf.to_dict()))
