import sys
import numpy as np
import pytest

from wireglue import _pykernels, kernels
from wireglue.features import DepthPose, FeatureSet, default_line_scores

try:
    from wireglue import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = [pytest.param(_pykernels, id="python")]
if _ckernels is not None:
    BACKENDS.append(pytest.param(_ckernels, id="cython"))


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture(params=BACKENDS)
def use_backend(request, monkeypatch):
    """Route ``wireglue.kernels`` through one backend for the test."""
    mod = request.param
    for name in ("lsap_square", "cluster_labels", "point_segment_distance", "closeness_counts"):
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return mod


def unit_rows(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_features(rng, n_kp=6, n_lines=4, dim=8, w=100.0, h=80.0, min_len=5.0):
    kps = rng.uniform([0, 0], [w, h], size=(n_kp, 2))
    lines = []
    while len(lines) < n_lines:
        seg = rng.uniform([0, 0], [w, h], size=(2, 2))
        if np.linalg.norm(seg[0] - seg[1]) >= min_len:
            lines.append(seg)
    lines = np.array(lines).reshape(-1, 2, 2)
    return FeatureSet(w, h, kps, rng.uniform(0.1, 1.0, n_kp), unit_rows(rng, n_kp, dim),
                      lines, default_line_scores(lines, w, h),
                      unit_rows(rng, n_lines * 2, dim).reshape(n_lines, 2, dim))


def two_plane_scene(rot_deg=5.0, t=(0.3, 0.0, 0.05)):
    K = np.array([[80.0, 0, 32], [0, 80.0, 24], [0, 0, 1]])
    ang = np.radians(rot_deg)
    R = np.array([[np.cos(ang), 0, np.sin(ang)], [0, 1, 0], [-np.sin(ang), 0, np.cos(ang)]])
    t = np.array(t, dtype=np.float64)

    def depth_map(Kc, Rw, tw, h=48, w=64):
        # camera sees planes z = 4 (left half of the world) and z = 6 (x > 0)
        ys, xs = np.mgrid[0:h, 0:w]
        rays = np.stack([xs, ys, np.ones_like(xs)], -1).reshape(-1, 3) @ np.linalg.inv(Kc).T
        out = np.zeros(len(rays))
        best = np.full(len(rays), np.inf)
        c = -Rw.T @ tw                       # camera centre in world frame
        dirs = rays @ Rw                       # ray directions in world frame
        for z0, side in ((4.0, -1), (6.0, 1)):
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = (z0 - c[2]) / dirs[:, 2]
            hit = c + lam[:, None] * dirs
            ok = (lam > 0) & (side * hit[:, 0] >= 0) & (lam < best)
            best = np.where(ok, lam, best)
        out = np.where(np.isfinite(best), best, 0.0)  # z-depth since rays have z = 1
        return out.reshape(h, w)

    d_a = depth_map(K, np.eye(3), np.zeros(3))
    d_b = depth_map(K, R, t)
    return DepthPose(K, K, R, t, d_a, d_b)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
