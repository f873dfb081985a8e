"""Matching loss and the training loop on synthetic pairs."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .assignment import DEFAULT_THRESHOLD, extract_matches, match_log_scores
from .evaluation import MatchCounts, pooled_precision_recall_ap
from .features import FeatureSet, Geometry
from .gnn import GnnConfig, GraphInput, check_params, gnn_forward, init_params, prepare
from .groundtruth import GtConfig, GtLabels, Labels, label_pair
from .synthetic import SynthConfig, generate_synthetic_pair, pair_rng
from .wireframe import Wireframe, WireframeConfig, build_wireframe


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- loss

def nll_indices(labels: Labels, m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Entries of the ``(m+1) x (n+1)`` log matrix that enter the loss.

    Matched pairs, the dustbin column for unmatched A features and the dustbin
    row for unmatched B features. IGNORE features contribute nothing.
    """
    rows = [i for i, _ in labels.matches] + list(labels.unmatched_a) + [m] * len(labels.unmatched_b)
    cols = [j for _, j in labels.matches] + [n] * len(labels.unmatched_a) + list(labels.unmatched_b)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    bad_a = [i for i, _ in labels.matches] + list(labels.unmatched_a)
    bad_b = [j for _, j in labels.matches] + list(labels.unmatched_b)
    if any(not 0 <= i < m for i in bad_a) or any(not 0 <= j < n for j in bad_b):
        raise IndexError(f"label index out of range for a {m} x {n} problem")
    return rows, cols


def _nll(log_final, labels: Labels, normalize: bool):
    m, n = (s - 1 for s in nx.value_of(log_final).shape)
    rows, cols = nll_indices(labels, m, n)
    if rows.size == 0:
        return nx.Var(np.array(0.0))
    s = nx.total(nx.pick(log_final, rows, cols))
    return nx.scale(s, -1.0 / rows.size if normalize else -1.0)


def nll_loss(log_point, log_line, labels: GtLabels, normalize: bool = True):
    """``0.5 * (NLL_points + NLL_lines)`` from log final assignment matrices.

    With ``normalize`` each NLL is the mean over its terms instead of the sum.
    """
    return nx.scale(nx.add(_nll(log_point, labels.points, normalize),
                           _nll(log_line, labels.lines, normalize)), 0.5)


# ---------------------------------------------------------------- examples

@dataclass
class Example:
    """A labelled pair in network-ready form."""

    graph_a: GraphInput
    graph_b: GraphInput
    labels: GtLabels | None
    wireframe_a: Wireframe
    wireframe_b: Wireframe


def make_example(fa: FeatureSet, fb: FeatureSet, geom: Geometry | None,
                 wf_cfg: WireframeConfig | None = None,
                 gt_cfg: GtConfig | None = None) -> Example:
    """Wireframes, graph inputs and (with a geometry) node-level labels."""
    wa = build_wireframe(fa, wf_cfg)
    wb = build_wireframe(fb, wf_cfg)
    labels = label_pair(wa, wb, geom, gt_cfg) if geom is not None else None
    return Example(prepare(wa), prepare(wb), labels, wa, wb)


def forward_example(ex: Example, params, cfg: GnnConfig):
    fa, fb = gnn_forward(ex.graph_a, ex.graph_b, params, cfg)
    return match_log_scores(fa, fb, ex.graph_a.edges, ex.graph_b.edges,
                            params["bin_point"], params["bin_line"])


def predict(ex: Example, params, cfg: GnnConfig, threshold: float = DEFAULT_THRESHOLD):
    """Point (node) and line match sets of one example."""
    log_p, log_l = forward_example(ex, params, cfg)
    return (extract_matches(np.exp(nx.value_of(log_p)), threshold),
            extract_matches(np.exp(nx.value_of(log_l)), threshold))


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    iterations: int = 3000
    lr: float = 1e-3
    num_pairs: int = 50            # fixed training set; 0 draws a fresh pair per step
    difficulty: float = 0.3        # maximum difficulty
    curriculum: bool = True        # ramp difficulty over the first half (fresh pairs only)
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0
    normalize_loss: bool = True
    threshold: float = DEFAULT_THRESHOLD
    max_keypoints: int = 60
    max_lines: int = 20
    gnn: GnnConfig = field(default_factory=GnnConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    gt: GtConfig = field(default_factory=GtConfig)
    wireframe: WireframeConfig = field(default_factory=WireframeConfig)

    def __post_init__(self):
        if self.iterations < 0 or self.lr < 0 or self.num_pairs < 0:
            raise ValueError("iterations, lr and num_pairs must be non-negative")
        if self.max_keypoints <= 0 or self.max_lines <= 0:
            raise ValueError("feature caps must be positive")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ValueError("difficulty must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        subs = {"gnn": GnnConfig, "synth": SynthConfig, "gt": GtConfig, "wireframe": WireframeConfig}
        for key, typ in subs.items():
            if key in raw:
                raw[key] = build_dataclass(typ, raw[key], key)
        return build_dataclass(cls, raw, "train")


def build_dataclass(typ, raw: dict, where: str):
    """Construct ``typ`` from a dict, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ValueError(f"{where}: expected an object")
    known = set(typ.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    return typ(**raw)


def curriculum(it: int, iterations: int, max_difficulty: float) -> float:
    """Linear ramp from 0 to ``max_difficulty`` over the first half, then flat."""
    half = iterations / 2.0
    if half <= 0:
        return max_difficulty
    return max_difficulty * min(1.0, it / half)


def cap_features(fs: FeatureSet, max_keypoints: int, max_lines: int) -> FeatureSet:
    """Keep the highest scoring features; ties keep the lower index."""
    kp = np.sort(np.argsort(-fs.kp_scores, kind="stable")[:max_keypoints])
    ln = np.sort(np.argsort(-fs.line_scores, kind="stable")[:max_lines])
    if len(kp) == fs.num_keypoints and len(ln) == fs.num_lines:
        return fs
    return FeatureSet(fs.width, fs.height, fs.keypoints[kp], fs.kp_scores[kp], fs.kp_desc[kp],
                      fs.lines[ln], fs.line_scores[ln], fs.line_desc[ln])


def synthetic_examples(cfg: TrainConfig, count: int, difficulty: float, seed: int,
                       start: int = 0) -> list[Example]:
    out = []
    for k in range(start, start + count):
        pair = generate_synthetic_pair(cfg.synth, difficulty, pair_rng(seed, k))
        fa = cap_features(pair.features_a, cfg.max_keypoints, cfg.max_lines)
        fb = cap_features(pair.features_b, cfg.max_keypoints, cfg.max_lines)
        out.append(make_example(fa, fb, pair.geometry, cfg.wireframe, cfg.gt))
    return out


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    params: dict
    losses: list
    log: list


def _counts(ex: Example, log_p, log_l, threshold):
    mp = extract_matches(np.exp(nx.value_of(log_p)), threshold)
    ml = extract_matches(np.exp(nx.value_of(log_l)), threshold)
    return (MatchCounts().add(mp.matches, ex.labels.points),
            MatchCounts().add(ml.matches, ex.labels.lines))


def _dump_pair(ex: Example, path: Path, it: int) -> None:
    wa, wb = ex.wireframe_a, ex.wireframe_b
    payload = {"iteration": it, "wireframe_a": wa.to_dict(), "wireframe_b": wb.to_dict(),
               "labels": ex.labels.to_dict()}
    nx.atomic_write_text(path, json.dumps(payload, indent=1) + "\n")


def train(cfg: TrainConfig, examples: Sequence[Example] | None = None,
          out_dir: str | os.PathLike | None = None,
          params: dict | None = None,
          on_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on one pair per step.

    ``examples`` overrides the synthetic training set. With ``out_dir`` the
    JSON-lines log and checkpoints are written there.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    init_rng, order_rng = (np.random.default_rng(s) for s in seeds)
    if params is None:
        params = init_params(cfg.gnn, init_rng)
    else:
        check_params(params, cfg.gnn)
        params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    opt = nx.Adam(params, lr=cfg.lr)

    fixed = list(examples) if examples is not None else None
    if fixed is None and cfg.num_pairs > 0:
        fixed = synthetic_examples(cfg, cfg.num_pairs, cfg.difficulty, cfg.seed)
    if fixed is not None and not fixed:
        raise ValueError("empty training set")

    out = Path(out_dir) if out_dir is not None else None
    log_lines: list[str] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    losses, log = [], []
    acc = None
    for it in range(cfg.iterations):
        if fixed is not None:
            ex = fixed[int(order_rng.integers(len(fixed)))]
            diff = cfg.difficulty
        else:
            diff = curriculum(it, cfg.iterations, cfg.difficulty) if cfg.curriculum else cfg.difficulty
            ex = synthetic_examples(cfg, 1, diff, cfg.seed + 1, start=it)[0]

        tape = nx.GradTape()
        tape.watch(opt.params)
        log_p, log_l = forward_example(ex, tape.params, cfg.gnn)
        loss = nll_loss(log_p, log_l, ex.labels, cfg.normalize_loss)
        value = float(loss.value)
        if not math.isfinite(value):
            if out is not None:
                _dump_pair(ex, out / "nonfinite_pair.json", it)
            raise TrainingError(f"non-finite loss at iteration {it}")
        if loss.tape is None:  # nothing to supervise in this pair
            grads = {k: np.zeros_like(v) for k, v in opt.params.items()}
        else:
            grads = tape.backward(loss)
        opt.step(grads)
        losses.append(value)

        cp, cl = _counts(ex, log_p, log_l, cfg.threshold)
        if acc is None:
            acc = [0.0, 0, MatchCounts(), MatchCounts()]
        acc[0] += value
        acc[1] += 1
        for mine, new in ((acc[2], cp), (acc[3], cl)):
            mine.correct += new.correct
            mine.predicted += new.predicted
            mine.ground_truth += new.ground_truth
        last = it == cfg.iterations - 1
        if cfg.log_every and ((it + 1) % cfg.log_every == 0 or last):
            rec = {"iter": it + 1, "loss": acc[0] / acc[1],
                   "point_precision": acc[2].precision, "point_recall": acc[2].recall,
                   "line_precision": acc[3].precision, "line_recall": acc[3].recall,
                   "difficulty": diff}
            log.append(rec)
            log_lines.append(json.dumps(rec, sort_keys=True))
            if on_log is not None:
                on_log(rec)
            acc = None
        if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            nx.save_checkpoint(opt.params, out / f"checkpoint_{it + 1:06d}.json")

    if out is not None:
        nx.save_checkpoint(opt.params, out / "checkpoint.json")
        nx.atomic_write_text(out / "train_log.jsonl", "".join(s + "\n" for s in log_lines))
        nx.atomic_write_text(out / "config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    return TrainResult(opt.params, losses, log)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalSummary:
    point_precision: float
    point_recall: float
    line_precision: float
    line_recall: float
    point_ap: float
    line_ap: float

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_examples(examples: Sequence[Example], params, cfg: GnnConfig,
                      threshold: float = DEFAULT_THRESHOLD) -> EvalSummary:
    """Pooled precision/recall at ``threshold`` and AP over all mutual matches."""
    cp, cl = MatchCounts(), MatchCounts()
    ap_p, ap_l = [], []
    for ex in examples:
        mp, ml = predict(ex, params, cfg, threshold=0.0)
        cp.add([m for m in mp.matches if m[2] >= threshold], ex.labels.points)
        cl.add([m for m in ml.matches if m[2] >= threshold], ex.labels.lines)
        ap_p.append((mp.matches, ex.labels.points))
        ap_l.append((ml.matches, ex.labels.lines))
    return EvalSummary(cp.precision, cp.recall, cl.precision, cl.recall,
                       pooled_precision_recall_ap(ap_p).average_precision,
                       pooled_precision_recall_ap(ap_l).average_precision)
