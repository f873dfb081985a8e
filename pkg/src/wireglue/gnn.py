"""Attention graph network over a pair of wireframes.

Parameters live in a flat ``{name: array}`` dict (the checkpoint layout).
Every function here works on either raw arrays or tape ``Var`` values, so
the same code serves inference and training.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import MlpParams, Var
from .wireframe import Wireframe

SELF, CROSS = "self", "cross"


@dataclass
class GnnConfig:
    dim: int = 32
    blocks: int = 3
    heads: int = 4
    desc_dim: int = 32
    mlp_layers: int = 3
    use_lmp: bool = True

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.mlp_layers < 1 or self.desc_dim < 1:
            raise ValueError("mlp_layers and desc_dim must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- parameters

def _xavier(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _mlp_dims(in_dim, hidden, out_dim, layers):
    return [in_dim] + [hidden] * (layers - 1) + [out_dim]


def _add_mlp(params, rng, prefix, dims):
    for k in range(len(dims) - 1):
        params[f"{prefix}.{k}.w"] = _xavier(rng, dims[k], dims[k + 1])
        params[f"{prefix}.{k}.b"] = np.zeros(dims[k + 1])


def _add_linear(params, rng, prefix, fan_in, fan_out):
    params[f"{prefix}.w"] = _xavier(rng, fan_in, fan_out)
    params[f"{prefix}.b"] = np.zeros(fan_out)


def init_params(cfg: GnnConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Xavier-uniform weights, zero biases, both dustbins at 1."""
    D, n = cfg.dim, cfg.mlp_layers
    p: dict[str, np.ndarray] = {}
    _add_linear(p, rng, "input_proj", cfg.desc_dim, D)
    _add_mlp(p, rng, "pe_point", _mlp_dims(3, D, D, n))
    _add_mlp(p, rng, "pe_edge", _mlp_dims(5, D, D, n))
    for m in range(cfg.blocks):
        for kind in (SELF, CROSS):
            for proj in "qkvo":
                _add_linear(p, rng, f"blocks.{m}.{kind}.{proj}", D, D)
            _add_mlp(p, rng, f"blocks.{m}.{kind}.psi", _mlp_dims(2 * D, D, D, n))
        _add_mlp(p, rng, f"blocks.{m}.line.phi", _mlp_dims(3 * D, D, D, n))
    _add_linear(p, rng, "final", D, D)
    p["bin_point"] = np.array(1.0)
    p["bin_line"] = np.array(1.0)
    return p


def check_params(params, cfg: GnnConfig) -> None:
    """Raise ``ValueError`` when a checkpoint does not fit ``cfg``."""
    expected = init_params(cfg, np.random.default_rng(0))
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(f"checkpoint/config mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, v in expected.items():
        if nx.value_of(params[k]).shape != v.shape:
            raise ValueError(f"checkpoint/config mismatch for {k}: shape "
                             f"{nx.value_of(params[k]).shape} vs {v.shape}")


def mlp_params(params, prefix: str) -> MlpParams:
    layers = []
    k = 0
    while f"{prefix}.{k}.w" in params:
        layers.append((params[f"{prefix}.{k}.w"], params[f"{prefix}.{k}.b"]))
        k += 1
    if not layers:
        raise KeyError(f"no MLP named {prefix!r}")
    return MlpParams(layers, "relu")


# ---------------------------------------------------------------- inputs

@dataclass
class GraphInput:
    """Network-ready arrays for one wireframe."""

    pos: np.ndarray       # (N, 3) normalised x, y and node score
    desc: np.ndarray      # (N, D_desc)
    edge_feat: np.ndarray  # (2M, 5) per incidence
    anchor: np.ndarray    # (2M,) node the incidence is anchored at
    other: np.ndarray     # (2M,) opposite endpoint
    inv_degree: np.ndarray  # (N,) 1/|N_i|, 0 for isolated nodes
    edges: np.ndarray     # (M, 2)

    @property
    def num_nodes(self) -> int:
        return len(self.pos)


def normalize_coords(xy: np.ndarray, width: float, height: float) -> np.ndarray:
    """Map pixel coordinates to [-1, 1] by the image half-extent."""
    half = np.array([width / 2.0, height / 2.0])
    return (np.asarray(xy, dtype=np.float64) - half) / half


def prepare(w: Wireframe) -> GraphInput:
    xy = normalize_coords(w.node_xy, w.width, w.height).reshape(-1, 2)
    pos = np.concatenate([xy, w.node_score.reshape(-1, 1)], axis=1)
    anchor, other, edge = w.incidences()
    edge_feat = np.concatenate([
        xy[anchor], xy[other] - xy[anchor], w.edge_score[edge].reshape(-1, 1)], axis=1
    ).reshape(-1, 5)
    deg = w.degrees().astype(np.float64)
    inv_degree = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
    return GraphInput(pos, w.node_desc, edge_feat, anchor, other, inv_degree,
                      w.edges.reshape(-1, 2))


# ---------------------------------------------------------------- layers

def encode_positions(g: GraphInput, params):
    """Spatial descriptor per node and directional descriptor per incidence."""
    d_p = nx.mlp_forward(mlp_params(params, "pe_point"), g.pos)
    d_e = nx.mlp_forward(mlp_params(params, "pe_edge"), g.edge_feat) if len(g.edge_feat) else None
    return d_p, d_e


def multi_head_attention(x_src, x_tgt, params, prefix: str, heads: int):
    """Softmax attention from ``x_src`` queries onto ``x_tgt`` keys/values.

    An empty target set yields a zero message.
    """
    n = nx.value_of(x_src).shape[0]
    t = nx.value_of(x_tgt).shape[0]
    dim = nx.value_of(params[f"{prefix}.q.w"]).shape[1]
    if t == 0:
        return nx.Var(np.zeros((n, dim)))
    dh = dim // heads
    q = nx.linear(x_src, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"])
    k = nx.linear(x_tgt, params[f"{prefix}.k.w"], params[f"{prefix}.k.b"])
    v = nx.linear(x_tgt, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"])
    qh = nx.transpose(nx.reshape(q, (n, heads, dh)), (1, 0, 2))   # (h, n, dh)
    kh = nx.transpose(nx.reshape(k, (t, heads, dh)), (1, 2, 0))   # (h, dh, t)
    vh = nx.transpose(nx.reshape(v, (t, heads, dh)), (1, 0, 2))   # (h, t, dh)
    scores = nx.scale(nx.matmul(qh, kh), 1.0 / math.sqrt(dh))
    prob = nx.softmax(scores, axis=-1)
    out = nx.reshape(nx.transpose(nx.matmul(prob, vh), (1, 0, 2)), (n, dim))
    return nx.linear(out, params[f"{prefix}.o.w"], params[f"{prefix}.o.b"])


def attention_update(x_src, x_tgt, params, prefix: str, heads: int):
    """Residual update ``x + psi([x || attention(x; targets)])``."""
    msg = multi_head_attention(x_src, x_tgt, params, prefix, heads)
    delta = nx.mlp_forward(mlp_params(params, f"{prefix}.psi"), nx.concat([x_src, msg], axis=1))
    return nx.add(x_src, delta)


def line_message_passing(x, g: GraphInput, d_e, params, prefix: str):
    """``x_i += mean_j phi([x_i || x_j || d^e_j])`` over line neighbours ``j``.

    ``d^e_j`` is the incidence anchored at ``j`` pointing towards ``i``. A pair
    of nodes joined by two lines counts as two neighbours.
    """
    if d_e is None or len(g.anchor) == 0:
        return x
    n = g.num_nodes
    feats = nx.concat([nx.take_rows(x, g.other), nx.take_rows(x, g.anchor), d_e], axis=1)
    msgs = nx.mlp_forward(mlp_params(params, prefix), feats)
    agg = nx.mul(nx.segment_sum(msgs, g.other, n), g.inv_degree.reshape(-1, 1))
    return nx.add(x, agg)


def gnn_forward(ga: GraphInput, gb: GraphInput, params, cfg: GnnConfig):
    """Final matching features ``(f_a, f_b)`` for both images."""
    xs, des = [], []
    for g in (ga, gb):
        d_p, d_e = encode_positions(g, params)
        vis = nx.linear(g.desc, params["input_proj.w"], params["input_proj.b"])
        xs.append(nx.add(d_p, vis))
        des.append(d_e)
    xa, xb = xs
    for m in range(cfg.blocks):
        pre = f"blocks.{m}"
        xa, xb = (attention_update(xa, xa, params, f"{pre}.self", cfg.heads),
                  attention_update(xb, xb, params, f"{pre}.self", cfg.heads))
        if cfg.use_lmp:
            xa = line_message_passing(xa, ga, des[0], params, f"{pre}.line.phi")
            xb = line_message_passing(xb, gb, des[1], params, f"{pre}.line.phi")
        xa, xb = (attention_update(xa, xb, params, f"{pre}.cross", cfg.heads),
                  attention_update(xb, xa, params, f"{pre}.cross", cfg.heads))
    fa = nx.linear(xa, params["final.w"], params["final.b"])
    fb = nx.linear(xb, params["final.w"], params["final.b"])
    return fa, fb
