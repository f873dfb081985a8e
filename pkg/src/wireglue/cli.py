"""Command line entry point: ``wireglue <command> [options]``.

Commands work on single files or on a dataset directory laid out as
``pairs/NNNN/{a.features.json, b.features.json, geometry.json, gt.json}``.
Every run echoes its resolved configuration into the output directory.
Failures print a JSON object on stderr and exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .assignment import DEFAULT_THRESHOLD
from .estimators import RansacConfig, hybrid_ransac_rotation
from .evaluation import (MatchCounts, line_repeatability, pooled_precision_recall_ap,
                         rotation_error_deg, rotation_summary, svg_curve, ROTATION_AUC_THRESHOLDS)
from .features import (DepthPose, FeatureFileError, MatchFile, load_feature_set, load_geometry,
                       load_match_file, save_feature_set, save_geometry, save_match_file)
from .gnn import GnnConfig, check_params
from .groundtruth import GtConfig, GtLabels, label_features
from .synthetic import SynthConfig, generate_synthetic_pair, pair_rng
from .training import TrainConfig, build_dataclass, cap_features, make_example, predict, train
from .wireframe import WireframeConfig

A_FILE, B_FILE, GEOM_FILE, GT_FILE, MATCH_FILE = (
    "a.features.json", "b.features.json", "geometry.json", "gt.json", "matches.json")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# ---------------------------------------------------------------- configs

@dataclass
class SynthRun:
    num_pairs: int = 10
    difficulty: float = 0.3
    seed: int = 0
    max_keypoints: int = 60
    max_lines: int = 20
    synth: SynthConfig = field(default_factory=SynthConfig)
    gt: GtConfig = field(default_factory=GtConfig)


@dataclass
class MatchRun:
    checkpoint: str = ""
    threshold: float = DEFAULT_THRESHOLD
    gnn: GnnConfig | None = None      # default: config.json beside the checkpoint
    wireframe: WireframeConfig = field(default_factory=WireframeConfig)
    seed: int = 0


@dataclass
class GtRun:
    gt: GtConfig = field(default_factory=GtConfig)
    seed: int = 0


@dataclass
class EvalRun:
    threshold: float = DEFAULT_THRESHOLD
    gt: GtConfig = field(default_factory=GtConfig)
    seed: int = 0


@dataclass
class RotationRun:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    seed: int = 0


NESTED = {"synth": SynthConfig, "gt": GtConfig, "gnn": GnnConfig,
          "wireframe": WireframeConfig, "ransac": RansacConfig}


def _to_dict(obj):
    if is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in fields(obj)}
    return obj


def resolve_config(kind, raw: dict, seed: int | None):
    """Defaults, then the config file, then flags."""
    raw = dict(raw)
    if seed is not None:
        raw["seed"] = seed
    if kind is TrainConfig:
        return TrainConfig.from_dict(raw)
    for key, typ in NESTED.items():
        if key in raw and raw[key] is not None:
            raw[key] = build_dataclass(typ, raw[key], key)
    cfg = build_dataclass(kind, raw, kind.__name__)
    if isinstance(cfg, RotationRun) and seed is not None:
        cfg.ransac.seed = seed
    return cfg


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise CliError("missing_file", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError("schema", f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise CliError("schema", "config must be a JSON object")
    return raw


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    nx.atomic_write_text(path, _dump(obj))


def _echo_config(out: Path, command: str, cfg) -> None:
    _write_json(out / "config.json", {"command": command, "config": _to_dict(cfg)})


# ---------------------------------------------------------------- dataset helpers

def _pair_dirs(data: Path) -> list[Path]:
    root = data / "pairs"
    if not root.is_dir():
        raise CliError("missing_file", f"no pairs/ directory in {data}")
    return sorted(p for p in root.iterdir() if p.is_dir())


def _need(path: Path) -> Path:
    if not path.is_file():
        raise CliError("missing_file", f"file not found: {path}")
    return path


def _map(fn, items, jobs: int):
    """Order-preserving map; each item writes only its own files."""
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _load_labels(path: Path) -> GtLabels:
    with open(_need(path), encoding="utf-8") as fh:
        try:
            return GtLabels.from_dict(json.load(fh))
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError("schema", f"{path}: {exc}") from None


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: SynthRun) -> dict:
    out = Path(args.out)

    def one(k: int):
        pair = generate_synthetic_pair(cfg.synth, cfg.difficulty, pair_rng(cfg.seed, k))
        fa = cap_features(pair.features_a, cfg.max_keypoints, cfg.max_lines)
        fb = cap_features(pair.features_b, cfg.max_keypoints, cfg.max_lines)
        d = out / "pairs" / f"{k:04d}"
        d.mkdir(parents=True, exist_ok=True)
        save_feature_set(fa, d / A_FILE)
        save_feature_set(fb, d / B_FILE)
        save_geometry(pair.geometry, d / GEOM_FILE)
        nx.atomic_write_text(d / GT_FILE, label_features(fa, fb, pair.geometry, cfg.gt).dumps())
        return k

    done = _map(one, range(cfg.num_pairs), args.jobs)
    return {"pairs": len(done)}


def _dataset_examples(data: Path, cfg: TrainConfig):
    exs = []
    for d in _pair_dirs(data):
        fa = load_feature_set(_need(d / A_FILE))
        fb = load_feature_set(_need(d / B_FILE))
        geom = load_geometry(_need(d / GEOM_FILE))
        exs.append(make_example(cap_features(fa, cfg.max_keypoints, cfg.max_lines),
                                cap_features(fb, cfg.max_keypoints, cfg.max_lines),
                                geom, cfg.wireframe, cfg.gt))
    return exs


def cmd_train(args, cfg: TrainConfig) -> dict:
    examples = _dataset_examples(Path(args.data), cfg) if args.data else None
    res = train(cfg, examples=examples, out_dir=args.out)
    return {"iterations": cfg.iterations, "final_loss": res.losses[-1] if res.losses else None}


def _load_model(cfg: MatchRun):
    if not cfg.checkpoint:
        raise CliError("schema", "match needs a checkpoint (config key or --checkpoint)")
    ckpt = _need(Path(cfg.checkpoint))
    gnn = cfg.gnn
    if gnn is None:
        side = ckpt.parent / "config.json"
        if not side.is_file():
            raise CliError("schema", "no gnn config given and no config.json beside the checkpoint")
        raw = _read_config(side)
        raw = raw.get("config", raw)
        gnn = build_dataclass(GnnConfig, raw.get("gnn", {}), "gnn")
    try:
        params = nx.load_checkpoint(ckpt)
        check_params(params, gnn)
    except ValueError as exc:
        raise CliError("checkpoint", str(exc)) from None
    return params, gnn


def _match_pair(fa, fb, params, gnn, cfg: MatchRun) -> MatchFile:
    """Keypoint-level point matches and line matches for one pair.

    Node matches between merged line endpoints are not reported as point
    matches: they have no keypoint index.
    """
    ex = make_example(fa, fb, None, cfg.wireframe)
    wa, wb = ex.wireframe_a, ex.wireframe_b
    mp, ml = predict(ex, params, gnn, cfg.threshold)
    ka, kb = wa.node_keypoint, wb.node_keypoint
    points = [(int(ka[i]), int(kb[j]), s) for i, j, s in mp.matches if ka[i] >= 0 and kb[j] >= 0]
    used_a = {i for i, _, _ in points}
    used_b = {j for _, j, _ in points}
    return MatchFile(points, ml.matches,
                     [i for i in range(fa.num_keypoints) if i not in used_a],
                     [j for j in range(fb.num_keypoints) if j not in used_b],
                     ml.unmatched_a, ml.unmatched_b)


def cmd_match(args, cfg: MatchRun) -> dict:
    params, gnn = _load_model(cfg)
    out = Path(args.out)
    if args.data:
        dirs = _pair_dirs(Path(args.data))

        def one(d: Path):
            mf = _match_pair(load_feature_set(_need(d / A_FILE)), load_feature_set(_need(d / B_FILE)),
                             params, gnn, cfg)
            save_match_file(mf, _mkdir(out / "pairs" / d.name) / MATCH_FILE)
            return len(mf.points), len(mf.lines)

        counts = _map(one, dirs, args.jobs)
        return {"pairs": len(counts), "point_matches": sum(c[0] for c in counts),
                "line_matches": sum(c[1] for c in counts)}
    fa = load_feature_set(_need(Path(_required(args.a, "--a"))))
    fb = load_feature_set(_need(Path(_required(args.b, "--b"))))
    mf = _match_pair(fa, fb, params, gnn, cfg)
    save_match_file(mf, _mkdir(out) / MATCH_FILE)
    return {"point_matches": len(mf.points), "line_matches": len(mf.lines)}


def cmd_gt(args, cfg: GtRun) -> dict:
    out = Path(args.out)

    def one(src: tuple[Path, Path, Path, Path]):
        pa, pb, pg, dst = src
        fa, fb = load_feature_set(_need(pa)), load_feature_set(_need(pb))
        labels = label_features(fa, fb, load_geometry(_need(pg)), cfg.gt)
        nx.atomic_write_text(_mkdir(dst.parent) / dst.name, labels.dumps())
        return len(labels.points.matches), len(labels.lines.matches)

    if args.data:
        jobs = [(d / A_FILE, d / B_FILE, d / GEOM_FILE, out / "pairs" / d.name / GT_FILE)
                for d in _pair_dirs(Path(args.data))]
    else:
        jobs = [(Path(_required(args.a, "--a")), Path(_required(args.b, "--b")),
                 Path(_required(args.geometry, "--geometry")), out / GT_FILE)]
    counts = _map(one, jobs, args.jobs)
    return {"pairs": len(counts), "point_matches": sum(c[0] for c in counts),
            "line_matches": sum(c[1] for c in counts)}


def _check_indices(mf: MatchFile, gt: GtLabels, where: str) -> None:
    for name, preds, labels in (("points", mf.points, gt.points), ("lines", mf.lines, gt.lines)):
        n_a = len(labels.matches) + len(labels.unmatched_a) + len(labels.ignore_a)
        n_b = len(labels.matches) + len(labels.unmatched_b) + len(labels.ignore_b)
        for i, j, _ in preds:
            if i >= n_a or j >= n_b:
                raise CliError("schema", f"{where}: {name} match ({i}, {j}) outside the labelled range")


def cmd_eval(args, cfg: EvalRun) -> dict:
    out = Path(args.out)
    if args.data:
        dirs = _pair_dirs(Path(args.data))
        match_root = Path(args.matches) if args.matches else Path(args.data)
        items = [(match_root / "pairs" / d.name / MATCH_FILE, d / GT_FILE, d) for d in dirs]
    else:
        items = [(Path(_required(args.matches, "--matches")), Path(_required(args.gt, "--gt")), None)]
    pts, lns = [], []
    cp, cl = MatchCounts(), MatchCounts()
    repeat = []
    for mpath, gpath, d in items:
        mf = load_match_file(_need(mpath))
        gt = _load_labels(gpath)
        _check_indices(mf, gt, str(mpath))
        pts.append((mf.points, gt.points))
        lns.append((mf.lines, gt.lines))
        cp.add([m for m in mf.points if m[2] >= cfg.threshold], gt.points)
        cl.add([m for m in mf.lines if m[2] >= cfg.threshold], gt.lines)
        if d is not None and (d / GEOM_FILE).is_file():
            repeat.append(line_repeatability(load_feature_set(_need(d / A_FILE)),
                                             load_feature_set(_need(d / B_FILE)),
                                             load_geometry(d / GEOM_FILE), cfg.gt))
    pr_p = pooled_precision_recall_ap(pts)
    pr_l = pooled_precision_recall_ap(lns)
    report = {
        "pairs": len(items),
        "threshold": cfg.threshold,
        "points": {"precision": cp.precision, "recall": cp.recall,
                   "average_precision": pr_p.average_precision, "num_gt": pr_p.num_gt},
        "lines": {"precision": cl.precision, "recall": cl.recall,
                  "average_precision": pr_l.average_precision, "num_gt": pr_l.num_gt},
        "pr_curves": {"points": pr_p.to_dict(), "lines": pr_l.to_dict()},
    }
    if repeat:
        report["line_repeatability"] = float(np.mean(repeat))
    _write_json(out / "report.json", report)
    nx.atomic_write_text(out / "pr_curves.svg", svg_curve(
        {"points": (pr_p.recall, pr_p.precision), "lines": (pr_l.recall, pr_l.precision)},
        "recall", "precision"))
    return {"points_ap": pr_p.average_precision, "lines_ap": pr_l.average_precision}


def _rotation_one(mpath: Path, pa: Path, pb: Path, gpath: Path | None, intr: dict | None,
                  cfg: RotationRun) -> dict:
    mf = load_match_file(_need(mpath))
    fa, fb = load_feature_set(_need(pa)), load_feature_set(_need(pb))
    geom = load_geometry(_need(gpath)) if gpath is not None else None
    if intr is not None:
        K_a, K_b = np.asarray(intr["K_a"], dtype=float), np.asarray(intr["K_b"], dtype=float)
    elif isinstance(geom, DepthPose):
        K_a, K_b = geom.K_a, geom.K_b
    else:
        raise CliError("schema", "rotation needs intrinsics or a depth_pose geometry")
    for name, preds, n_a, n_b in (("points", mf.points, fa.num_keypoints, fb.num_keypoints),
                                  ("lines", mf.lines, fa.num_lines, fb.num_lines)):
        if any(i >= n_a or j >= n_b for i, j, _ in preds):
            raise CliError("schema", f"{mpath}: {name} match index outside the feature file")
    pi = np.array([[i, j] for i, j, _ in mf.points], dtype=np.intp).reshape(-1, 2)
    li = np.array([[i, j] for i, j, _ in mf.lines], dtype=np.intp).reshape(-1, 2)
    if len(pi) + len(li) < 2:
        return {"success": False, "R": None, "num_inliers": 0}
    res = hybrid_ransac_rotation(fa.keypoints[pi[:, 0]], fb.keypoints[pi[:, 1]],
                                 fa.lines[li[:, 0]], fb.lines[li[:, 1]], K_a, K_b, cfg.ransac)
    rec = {"success": res.success, "R": res.R.tolist() if res.success else None,
           "num_inliers": res.num_inliers, "point_inliers": res.point_inliers,
           "line_inliers": res.line_inliers}
    if res.success and isinstance(geom, DepthPose):
        rec["angular_error_deg"] = rotation_error_deg(res.R, geom.R)
    return rec


def cmd_rotation(args, cfg: RotationRun) -> dict:
    out = Path(args.out)
    intr = _read_config(args.intrinsics) if args.intrinsics else None
    if args.data:
        dirs = _pair_dirs(Path(args.data))
        match_root = Path(args.matches) if args.matches else Path(args.data)

        def one(d: Path):
            rec = _rotation_one(match_root / "pairs" / d.name / MATCH_FILE, d / A_FILE, d / B_FILE,
                                d / GEOM_FILE, intr, cfg)
            _write_json(out / "pairs" / d.name / "rotation.json", rec)
            return rec

        recs = _map(one, dirs, args.jobs)
        errs = [r["angular_error_deg"] for r in recs if "angular_error_deg" in r]
        summary = {"pairs": len(recs), "failures": sum(1 for r in recs if not r["success"]),
                   **rotation_summary(errs)}
        _write_json(out / "rotation_summary.json", summary)
        if errs:
            xs = sorted(errs)
            ys = [(k + 1) / len(xs) for k in range(len(xs))]
            nx.atomic_write_text(out / "rotation_errors.svg", svg_curve(
                {"cumulative": ([0.0] + xs, [0.0] + ys)}, "error (deg)", "fraction",
                xmax=max(ROTATION_AUC_THRESHOLDS)))
        return {"pairs": len(recs), "median": summary["median"]}
    rec = _rotation_one(Path(_required(args.matches, "--matches")), Path(_required(args.a, "--a")),
                        Path(_required(args.b, "--b")),
                        Path(args.geometry) if args.geometry else None, intr, cfg)
    _write_json(out / "rotation.json", rec)
    return {"success": rec["success"], "num_inliers": rec["num_inliers"]}


# ---------------------------------------------------------------- plumbing

def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def _required(value, flag: str):
    if value is None:
        raise CliError("usage", f"{flag} is required without --data")
    return value


COMMANDS = {
    "synth": (cmd_synth, SynthRun, "generate a synthetic dataset"),
    "train": (cmd_train, TrainConfig, "train a matcher"),
    "match": (cmd_match, MatchRun, "match feature files with a checkpoint"),
    "gt": (cmd_gt, GtRun, "label correspondences from geometry"),
    "eval": (cmd_eval, EvalRun, "precision, recall and AP of match files"),
    "rotation": (cmd_rotation, RotationRun, "relative rotation from matches"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wireglue", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--jobs", type=int, default=1, help="pairs processed concurrently")
        p.add_argument("--out", required=True, help="output directory")
        if name in ("train", "match", "gt", "eval", "rotation"):
            p.add_argument("--data", help="dataset directory with pairs/NNNN/")
        if name in ("match", "gt", "rotation"):
            p.add_argument("--a", help="features of image A")
            p.add_argument("--b", help="features of image B")
        if name in ("gt", "rotation"):
            p.add_argument("--geometry", help="two-view geometry JSON")
        if name in ("eval", "rotation"):
            p.add_argument("--matches", help="match file, or directory holding pairs/NNNN/matches.json")
        if name == "eval":
            p.add_argument("--gt", help="ground-truth labels JSON")
        if name == "match":
            p.add_argument("--checkpoint", help="checkpoint JSON (overrides the config)")
        if name == "rotation":
            p.add_argument("--intrinsics", help='JSON {"K_a": 3x3, "K_b": 3x3}')
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    func, kind, _ = COMMANDS[args.command]
    try:
        if args.jobs < 1:
            raise CliError("usage", "--jobs must be >= 1")
        raw = _read_config(args.config)
        if getattr(args, "checkpoint", None):
            raw["checkpoint"] = args.checkpoint
        try:
            cfg = resolve_config(kind, raw, args.seed)
        except (TypeError, ValueError) as exc:
            raise CliError("schema", f"config: {exc}") from None
        out = _mkdir(Path(args.out))
        summary = func(args, cfg)
        _echo_config(out, args.command, cfg)
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 2
    except FeatureFileError as exc:
        print(json.dumps({"error": "schema", "message": str(exc)}), file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
