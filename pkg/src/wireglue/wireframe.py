"""Turn keypoints and line segments into a connected wireframe graph."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .features import FeatureSet


@dataclass
class WireframeConfig:
    merge_distance: float = 3.0

    def __post_init__(self):
        if self.merge_distance < 0:
            raise ValueError("merge_distance must be >= 0")


@dataclass
class Wireframe:
    width: float
    height: float
    node_xy: np.ndarray           # (N, 2)
    node_score: np.ndarray        # (N,)
    node_desc: np.ndarray         # (N, D)
    node_is_endpoint: np.ndarray  # (N,) bool
    node_keypoint: np.ndarray     # (N,) source keypoint index, -1 for endpoint nodes
    edges: np.ndarray             # (M, 2) node indices, endpoint order of the input line
    edge_score: np.ndarray        # (M,)
    line_xy: np.ndarray           # (M, 2, 2) original sub-pixel endpoints
    adjacency: list = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.node_xy)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        np.add.at(deg, self.edges.reshape(-1), 1)
        return deg

    def incidences(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per (node, incident edge): anchor node, opposite node, edge index.

        Edge ``e`` contributes incidence ``2e`` anchored at its first node and
        ``2e + 1`` anchored at its second.
        """
        m = self.num_edges
        anchor = self.edges.reshape(-1)
        other = self.edges[:, ::-1].reshape(-1)
        edge = np.repeat(np.arange(m), 2)
        return anchor, other, edge

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "nodes": [
                {"x": float(p[0]), "y": float(p[1]), "score": float(s),
                 "is_endpoint": bool(e), "keypoint": int(k)}
                for p, s, e, k in zip(self.node_xy, self.node_score,
                                      self.node_is_endpoint, self.node_keypoint)
            ],
            "edges": [
                {"nodes": [int(a), int(b)], "score": float(s),
                 "endpoints": seg.tolist()}
                for (a, b), s, seg in zip(self.edges, self.edge_score, self.line_xy)
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def _dissolve_conflicts(labels: np.ndarray, num_lines: int) -> np.ndarray:
    """Split any cluster that would swallow both endpoints of one line."""
    labels = labels.copy()
    if num_lines == 0:
        return labels
    ends = labels.reshape(num_lines, 2)
    bad = np.unique(ends[ends[:, 0] == ends[:, 1], 0])
    if bad.size:
        members = np.isin(labels, bad)
        labels[members] = np.flatnonzero(members)
    return labels


def build_wireframe(features: FeatureSet, cfg: WireframeConfig | None = None) -> Wireframe:
    """Drop keypoints near endpoints, merge close endpoints, emit the graph.

    Node order: surviving keypoints (input order), then endpoint clusters
    ordered by their smallest member endpoint index (line ``i`` owns
    endpoints ``2i`` and ``2i + 1``).
    """
    cfg = cfg or WireframeConfig()
    d = float(cfg.merge_distance)
    dim = features.desc_dim
    m = features.num_lines
    endpoints = features.lines.reshape(-1, 2)

    kps = features.keypoints
    if m and len(kps):
        dist = np.sqrt(((kps[:, None, :] - endpoints[None, :, :]) ** 2).sum(axis=2))
        keep = ~(dist <= d).any(axis=1)
    else:
        keep = np.ones(len(kps), dtype=bool)
    kept = np.flatnonzero(keep)

    labels = _dissolve_conflicts(kernels.cluster_labels(endpoints, d), m)
    roots, endpoint_cluster = np.unique(labels, return_inverse=True)
    k = len(roots)

    ep_scores = np.repeat(features.line_scores, 2)
    ep_desc = features.line_desc.reshape(-1, dim)
    counts = np.bincount(endpoint_cluster, minlength=k).astype(np.float64)
    centroid = np.zeros((k, 2))
    np.add.at(centroid, endpoint_cluster, endpoints)
    centroid /= np.maximum(counts, 1.0)[:, None]
    score = np.full(k, -np.inf)
    np.maximum.at(score, endpoint_cluster, ep_scores)
    desc = np.zeros((k, dim))
    np.add.at(desc, endpoint_cluster, ep_desc)
    norms = np.linalg.norm(desc, axis=1)
    degenerate = norms < 1e-12
    if degenerate.any():
        # opposite descriptors cancel: fall back to the first member
        desc[degenerate] = ep_desc[roots[degenerate]]
        norms[degenerate] = np.linalg.norm(desc[degenerate], axis=1)
    desc = desc / np.where(norms > 0, norms, 1.0)[:, None]

    p = len(kept)
    node_xy = np.concatenate([kps[kept], centroid], axis=0).reshape(-1, 2)
    node_score = np.concatenate([features.kp_scores[kept], score])
    node_desc = np.concatenate([features.kp_desc[kept].reshape(p, dim), desc], axis=0)
    node_is_endpoint = np.concatenate([np.zeros(p, bool), np.ones(k, bool)])
    node_keypoint = np.concatenate([kept, -np.ones(k, dtype=np.int64)]).astype(np.int64)
    edges = (p + endpoint_cluster).reshape(m, 2).astype(np.int64)

    adjacency = [[] for _ in range(p + k)]
    for a, b in edges:
        adjacency[a].append(int(b))
        adjacency[b].append(int(a))

    return Wireframe(
        width=features.width, height=features.height,
        node_xy=node_xy, node_score=node_score, node_desc=node_desc,
        node_is_endpoint=node_is_endpoint, node_keypoint=node_keypoint,
        edges=edges, edge_score=features.line_scores.copy(),
        line_xy=features.lines.copy(), adjacency=adjacency,
    )


def connectivity_histogram(w: Wireframe) -> dict[int, int]:
    return dict(sorted(Counter(int(x) for x in w.degrees()).items()))
