"""Synthetic homography pairs with planted correspondences.

A canonical scene holds a small wireframe (vertices joined by segments) and
isolated keypoints, each carrying a persistent identity descriptor. View A
observes the scene through the identity, view B through a random homography
whose magnitude grows with ``difficulty``. Both views add positional jitter,
descriptor noise, dropout and distractors.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .features import FeatureSet, Homography, default_line_scores, in_bounds, warp_points
from .groundtruth import GtLabels, Labels, sample_lines
from . import kernels


@dataclass
class SynthConfig:
    width: float = 320.0
    height: float = 240.0
    desc_dim: int = 32
    vertices: int = 16
    lines: int = 18
    keypoints: int = 30
    min_spacing: float = 18.0
    min_line_length: float = 25.0
    max_line_length: float = 140.0
    keypoint_clearance: float = 10.0
    jitter: float = 0.4              # px std, per view and per detection
    desc_noise: float = 0.1          # noise norm at difficulty 0
    desc_noise_hard: float = 0.4     # extra noise norm at difficulty 1
    dropout_a: float = 0.1
    dropout_b: float = 0.1
    distractor_keypoints: int = 3
    distractor_lines: int = 2
    palette: int = 0                 # >0: identities share this many base patterns
    palette_mix: float = 0.3         # weight of the unique part of a palette identity
    max_rotation_deg: float = 30.0
    max_log_scale: float = 0.3
    max_translation: float = 0.15    # fraction of the image size
    max_perspective: float = 0.4     # max relative change of w over the image
    line_samples: int = 10

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticPair:
    features_a: FeatureSet
    features_b: FeatureSet
    geometry: Homography
    planted: GtLabels


# ---------------------------------------------------------------- homographies

def _translate(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def _acceptable(H: np.ndarray, w: float, h: float) -> bool:
    corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    hom = np.concatenate([corners, np.ones((4, 1))], axis=1) @ H.T
    if np.any(hom[:, 2] < 0.2):
        return False
    quad = hom[:, :2] / hom[:, 2:3]
    edges = np.roll(quad, -1, axis=0) - quad
    cross = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
    if not (np.all(cross > 0) or np.all(cross < 0)):
        return False
    area = 0.5 * abs(np.sum(quad[:, 0] * np.roll(quad[:, 1], -1) - np.roll(quad[:, 0], -1) * quad[:, 1]))
    return 0.3 < area / (w * h) < 3.0 and np.linalg.cond(H) < 1e8


def sample_homography(cfg: SynthConfig, difficulty: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation, scale, translation and perspective about the image centre,
    each drawn uniformly within ``difficulty`` times its maximum."""
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must be in [0, 1]")
    w, h = cfg.width, cfg.height
    for _ in range(1000):
        u = rng.uniform(-1.0, 1.0, size=6)
        ang = math.radians(cfg.max_rotation_deg) * difficulty * u[0]
        s = math.exp(cfg.max_log_scale * difficulty * u[1])
        tx = cfg.max_translation * difficulty * u[2] * w
        ty = cfg.max_translation * difficulty * u[3] * h
        px = cfg.max_perspective * difficulty * u[4] / (w / 2.0)
        py = cfg.max_perspective * difficulty * u[5] / (h / 2.0)
        sim = np.array([[s * math.cos(ang), -s * math.sin(ang), 0.0],
                        [s * math.sin(ang), s * math.cos(ang), 0.0],
                        [0.0, 0.0, 1.0]])
        persp = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]])
        H = _translate(w / 2.0 + tx, h / 2.0 + ty) @ persp @ sim @ _translate(-w / 2.0, -h / 2.0)
        H = H / H[2, 2]
        if _acceptable(H, w, h):
            return H
    raise RuntimeError("could not sample a non-degenerate homography")


def corner_displacement(H: np.ndarray, w: float, h: float) -> float:
    corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    return float(np.linalg.norm(warp_points(H, corners) - corners, axis=1).mean())


# ---------------------------------------------------------------- scenes

def _unit(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _identities(cfg: SynthConfig, n: int, rng) -> np.ndarray:
    unique = _unit(rng, n, cfg.desc_dim)
    if cfg.palette <= 0:
        return unique
    base = _unit(rng, cfg.palette, cfg.desc_dim)
    mixed = base[rng.integers(0, cfg.palette, size=n)] + cfg.palette_mix * unique
    return mixed / np.linalg.norm(mixed, axis=1, keepdims=True)


def _place(rng, n, w, h, margin, avoid, spacing, tries=4000):
    pts = []
    avoid = list(avoid)
    for _ in range(tries):
        if len(pts) == n:
            break
        p = rng.uniform([margin, margin], [w - margin, h - margin])
        if all(np.hypot(*(p - q)) >= spacing for q in avoid + pts):
            pts.append(p)
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def _runs_alongside(seg, other, guard_pts, tol=7.0, guard=12.0) -> bool:
    """True when two segments run close together away from shared vertices."""
    for a, b in ((seg, other), (other, seg)):
        smp = sample_lines(a[None], 10)[0]
        near = np.zeros(len(smp), dtype=bool)
        for g in guard_pts:
            near |= np.hypot(*(smp - g).T) < guard
        d = kernels.point_segment_distance(smp, b[None])[:, 0]
        if np.count_nonzero((d < tol) & ~near) >= 2:
            return True
    return False


def _sample_edges(cfg: SynthConfig, verts: np.ndarray, rng) -> list[tuple[int, int]]:
    """Greedy random segments between vertices: degree <= 3, at least 25
    degrees between segments sharing a vertex, no near-parallel overlaps."""
    n = len(verts)
    cand = [(i, j) for i in range(n) for j in range(i + 1, n)
            if cfg.min_line_length <= np.hypot(*(verts[i] - verts[j])) <= cfg.max_line_length]
    degree = np.zeros(n, dtype=int)
    chosen: list[tuple[int, int]] = []
    min_cos = math.cos(math.radians(25.0))
    for k in rng.permutation(len(cand)):
        if len(chosen) == cfg.lines:
            break
        i, j = cand[k]
        if degree[i] >= 3 or degree[j] >= 3:
            continue
        seg = verts[[i, j]]
        ok = True
        for a, b in chosen:
            shared = {i, j} & {a, b}
            if len(shared) == 1:
                v = shared.pop()
                d1 = verts[i + j - v] - verts[v]
                d2 = verts[a + b - v] - verts[v]
                if d1 @ d2 / (np.linalg.norm(d1) * np.linalg.norm(d2)) > min_cos:
                    ok = False
                    break
            if _runs_alongside(seg, verts[[a, b]], [verts[v] for v in {i, j} & {a, b}]):
                ok = False
                break
        if ok:
            chosen.append((i, j))
            degree[i] += 1
            degree[j] += 1
    return chosen


@dataclass
class _Scene:
    verts: np.ndarray
    edges: list
    keypoints: np.ndarray
    vert_id: np.ndarray
    kp_id: np.ndarray
    kp_score: np.ndarray


def _sample_scene(cfg: SynthConfig, rng) -> _Scene:
    w, h = cfg.width, cfg.height
    verts = _place(rng, cfg.vertices, w, h, 6.0, [], cfg.min_spacing)
    edges = _sample_edges(cfg, verts, rng)
    kps = _place(rng, cfg.keypoints, w, h, 4.0, list(verts), cfg.keypoint_clearance)
    ident = _identities(cfg, len(verts) + len(kps), rng)
    return _Scene(verts, edges, kps, ident[:len(verts)], ident[len(verts):],
                  rng.uniform(0.3, 1.0, size=len(kps)))


def _noisy(ident: np.ndarray, sigma: float, rng) -> np.ndarray:
    if len(ident) == 0:
        return ident.reshape(0, ident.shape[-1])
    noise = rng.normal(size=ident.shape) * (sigma / math.sqrt(ident.shape[-1]))
    v = ident + noise
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _render(cfg: SynthConfig, scene: _Scene, H: np.ndarray, difficulty: float,
            dropout: float, rng):
    """One view of the scene; returns the features and per-feature identity
    indices (-1 for distractors)."""
    w, h = cfg.width, cfg.height
    sigma = cfg.desc_noise + cfg.desc_noise_hard * difficulty
    dim = cfg.desc_dim

    # keypoints
    kp_xy = warp_points(H, scene.keypoints) + rng.normal(scale=cfg.jitter, size=scene.keypoints.shape)
    keep = (rng.random(len(kp_xy)) >= dropout) & in_bounds(kp_xy, w, h)
    kp_ids = list(np.flatnonzero(keep))
    kp_xy = kp_xy[keep]
    kp_desc = _noisy(scene.kp_id[keep], sigma, rng)
    kp_score = np.clip(scene.kp_score[keep] + rng.normal(scale=0.05, size=keep.sum()), 0.0, 1.0)

    # lines between warped vertices, each endpoint detected independently
    wv = warp_points(H, scene.verts)
    segs, seg_ids, seg_desc = [], [], []
    for k, (i, j) in enumerate(scene.edges):
        ends = (i, j) if rng.random() < 0.5 else (j, i)
        seg = wv[list(ends)] + rng.normal(scale=cfg.jitter, size=(2, 2))
        drop = rng.random() < dropout
        desc = _noisy(scene.vert_id[list(ends)], sigma, rng)
        if drop or not in_bounds(seg, w, h).all() or np.allclose(seg[0], seg[1]):
            continue
        segs.append(seg)
        seg_ids.append(k)
        seg_desc.append(desc)

    # distractors
    dk = cfg.distractor_keypoints
    d_xy = rng.uniform([0, 0], [w, h], size=(dk, 2))
    d_desc = _unit(rng, dk, dim)
    d_score = rng.uniform(0.3, 1.0, size=dk)
    for _ in range(cfg.distractor_lines):
        p = rng.uniform([0, 0], [w, h])
        ang = rng.uniform(0, math.pi)
        length = rng.uniform(cfg.min_line_length, cfg.max_line_length)
        q = p + length * np.array([math.cos(ang), math.sin(ang)])
        seg = np.array([p, q])
        desc = _unit(rng, 2, dim)
        if in_bounds(seg, w, h).all():
            segs.append(seg)
            seg_ids.append(-1)
            seg_desc.append(desc)

    kp_xy = np.concatenate([kp_xy, d_xy]).reshape(-1, 2)
    kp_desc = np.concatenate([kp_desc.reshape(-1, dim), d_desc]).reshape(-1, dim)
    kp_score = np.concatenate([kp_score, d_score])
    kp_ids = kp_ids + [-1] * dk

    kp_perm = rng.permutation(len(kp_xy))
    line_perm = rng.permutation(len(segs))
    lines = np.array(segs, dtype=np.float64).reshape(-1, 2, 2)[line_perm]
    line_desc = np.array(seg_desc, dtype=np.float64).reshape(-1, 2, dim)[line_perm]
    fs = FeatureSet(w, h, kp_xy[kp_perm], kp_score[kp_perm], kp_desc[kp_perm],
                    lines, default_line_scores(lines, w, h), line_desc)
    return fs, np.array(kp_ids, dtype=np.int64)[kp_perm], np.array(seg_ids, dtype=np.int64)[line_perm]


def _plant(ids_a, ids_b, valid_a, valid_b) -> Labels:
    where_b = {int(k): j for j, k in enumerate(ids_b) if k >= 0}
    matches = [(i, where_b[int(k)]) for i, k in enumerate(ids_a) if k >= 0 and int(k) in where_b]
    ma = {i for i, _ in matches}
    mb = {j for _, j in matches}
    return Labels(
        matches,
        [i for i in range(len(ids_a)) if valid_a[i] and i not in ma],
        [j for j in range(len(ids_b)) if valid_b[j] and j not in mb],
        [i for i in range(len(ids_a)) if not valid_a[i] and i not in ma],
        [j for j in range(len(ids_b)) if not valid_b[j] and j not in mb],
    )


def _line_valid(lines, H, w, h, k):
    smp = sample_lines(lines, k)
    if len(smp) == 0:
        return np.zeros(0, dtype=bool)
    inside = in_bounds(warp_points(H, smp.reshape(-1, 2)), w, h).reshape(len(lines), k)
    return inside.mean(axis=1) >= 0.5


def generate_synthetic_pair(cfg: SynthConfig, difficulty: float,
                            rng: np.random.Generator) -> SyntheticPair:
    """One pair; view A is the scene itself, view B its homographic warp."""
    H = sample_homography(cfg, difficulty, rng)
    scene = _sample_scene(cfg, rng)
    fa, kp_a, ln_a = _render(cfg, scene, np.eye(3), difficulty, cfg.dropout_a, rng)
    fb, kp_b, ln_b = _render(cfg, scene, H, difficulty, cfg.dropout_b, rng)
    Hinv = np.linalg.inv(H)
    w, h = cfg.width, cfg.height
    points = _plant(kp_a, kp_b,
                    in_bounds(warp_points(H, fa.keypoints), w, h),
                    in_bounds(warp_points(Hinv, fb.keypoints), w, h))
    lines = _plant(ln_a, ln_b,
                   _line_valid(fa.lines, H, w, h, cfg.line_samples),
                   _line_valid(fb.lines, Hinv, w, h, cfg.line_samples))
    return SyntheticPair(fa, fb, Homography(H), GtLabels(points, lines))


def pair_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per pair so generation order does not matter."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
