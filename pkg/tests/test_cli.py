import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from wireglue.cli import main
from wireglue.estimators import rotation_about
from wireglue.features import (DepthPose, FeatureSet, MatchFile, default_line_scores,
                               save_feature_set, save_geometry, save_match_file)
from conftest import unit_rows

TINY_TRAIN = {"iterations": 30, "num_pairs": 0, "log_every": 10,
              "gnn": {"dim": 8, "blocks": 1, "heads": 2, "desc_dim": 32}}


def _run(argv, capsys=None):
    code = main([str(a) for a in argv])
    return code


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.json").write_text(json.dumps({"num_pairs": 3, "difficulty": 0.2}))
    (root / "train.json").write_text(json.dumps(TINY_TRAIN))
    assert main(["synth", "--config", str(root / "synth.json"), "--seed", "4", "--out", str(root / "ds")]) == 0
    assert main(["train", "--config", str(root / "train.json"), "--data", str(root / "ds"),
                 "--out", str(root / "run")]) == 0
    return root


def _commands(root: Path, out: Path):
    return {
        "synth": ["synth", "--config", root / "synth.json", "--seed", 4, "--jobs", 2, "--out", out / "synth"],
        "train": ["train", "--config", root / "train.json", "--data", root / "ds", "--out", out / "train"],
        "match": ["match", "--data", root / "ds", "--checkpoint", root / "run" / "checkpoint.json",
                  "--jobs", 2, "--out", out / "match"],
        "gt": ["gt", "--data", root / "ds", "--out", out / "gt"],
        "eval": ["eval", "--data", root / "ds", "--matches", out / "match", "--out", out / "eval"],
    }


def test_every_command_is_byte_deterministic(workspace, tmp_path):
    trees = []
    for run in ("first", "second"):
        out = tmp_path / run
        for name, argv in _commands(workspace, out).items():
            assert _run(argv) == 0, name
        trees.append({name: _tree(out / name) for name in _commands(workspace, out)})
    for name in trees[0]:
        assert trees[0][name] == trees[1][name], name
        assert trees[0][name], name


def test_synth_layout_and_config_echo(workspace):
    pair = workspace / "ds" / "pairs" / "0000"
    assert sorted(p.name for p in pair.iterdir()) == ["a.features.json", "b.features.json",
                                                        "geometry.json", "gt.json"]
    echo = json.loads((workspace / "ds" / "config.json").read_text())
    assert echo["command"] == "synth" and echo["config"]["seed"] == 4
    assert echo["config"]["num_pairs"] == 3


def test_inputs_are_not_mutated(workspace, tmp_path):
    before = _tree(workspace / "ds")
    for name, argv in _commands(workspace, tmp_path).items():
        if name != "synth":
            _run(argv)
    assert _tree(workspace / "ds") == before


def test_gt_on_identical_features_is_all_matched(tmp_path):
    rng = np.random.default_rng(0)
    lines = np.array([[[10, 10], [80, 10]], [[10, 40], [60, 90]]], dtype=float)
    fs = FeatureSet(100, 100, rng.uniform(20, 80, (5, 2)), np.ones(5), unit_rows(rng, 5, 4),
                    lines, default_line_scores(lines, 100, 100), unit_rows(rng, 4, 4).reshape(2, 2, 4))
    save_feature_set(fs, tmp_path / "a.json")
    (tmp_path / "h.json").write_text(json.dumps({"type": "homography", "H": np.eye(3).tolist()}))
    assert _run(["gt", "--a", tmp_path / "a.json", "--b", tmp_path / "a.json",
                 "--geometry", tmp_path / "h.json", "--out", tmp_path / "o"]) == 0
    gt = json.loads((tmp_path / "o" / "gt.json").read_text())
    assert gt["points"]["matches"] == [[i, i] for i in range(5)]
    assert gt["lines"]["matches"] == [[0, 0], [1, 1]]


def test_eval_of_ground_truth_is_perfect(workspace, tmp_path):
    gt = json.loads((workspace / "ds" / "pairs" / "0001" / "gt.json").read_text())
    mf = MatchFile([(i, j, 0.9) for i, j in gt["points"]["matches"]],
                   [(i, j, 0.8) for i, j in gt["lines"]["matches"]])
    save_match_file(mf, tmp_path / "m.json")
    assert _run(["eval", "--matches", tmp_path / "m.json",
                 "--gt", workspace / "ds" / "pairs" / "0001" / "gt.json", "--out", tmp_path / "e"]) == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert rep["points"]["average_precision"] == 1.0 and rep["lines"]["average_precision"] == 1.0
    assert (tmp_path / "e" / "pr_curves.svg").is_file()


def _rotation_pair(tmp_path: Path):
    rng = np.random.default_rng(1)
    K = np.array([[300.0, 0, 160], [0, 300.0, 120], [0, 0, 1]])
    R = rotation_about([0.2, 1.0, 0.1], 8.0)
    pa = rng.uniform([20, 20], [300, 220], size=(20, 2))
    v = np.concatenate([pa, np.ones((20, 1))], 1) @ np.linalg.inv(K).T @ R.T @ K.T
    pb = v[:, :2] / v[:, 2:3]
    keep = (pb[:, 0] > 0) & (pb[:, 0] < 320) & (pb[:, 1] > 0) & (pb[:, 1] < 240)
    pa, pb = pa[keep], pb[keep]
    n = len(pa)

    def fs(pts):
        return FeatureSet(320, 240, pts, np.ones(n), unit_rows(rng, n, 4),
                          np.zeros((0, 2, 2)), np.zeros(0), np.zeros((0, 2, 4)))

    save_feature_set(fs(pa), tmp_path / "a.json")
    save_feature_set(fs(pb), tmp_path / "b.json")
    depth = np.ones((240, 320))
    save_geometry(DepthPose(K, K, R, np.zeros(3), depth, depth), tmp_path / "g.json")
    save_match_file(MatchFile([(i, i, 0.9) for i in range(n)]), tmp_path / "m.json")
    return R


def test_rotation_command(tmp_path):
    _rotation_pair(tmp_path)
    argv = ["rotation", "--matches", tmp_path / "m.json", "--a", tmp_path / "a.json",
            "--b", tmp_path / "b.json", "--geometry", tmp_path / "g.json"]
    assert _run(argv + ["--out", tmp_path / "r1"]) == 0
    assert _run(argv + ["--out", tmp_path / "r2"]) == 0
    rec = json.loads((tmp_path / "r1" / "rotation.json").read_text())
    assert rec["success"] and rec["angular_error_deg"] < 1e-6
    assert (tmp_path / "r1" / "rotation.json").read_bytes() == (tmp_path / "r2" / "rotation.json").read_bytes()


def _error(argv, capsys):
    code = _run(argv)
    err = capsys.readouterr().err
    return code, json.loads(err.strip().splitlines()[-1])


def test_missing_file_error(tmp_path, capsys):
    code, err = _error(["gt", "--a", tmp_path / "nope.json", "--b", tmp_path / "nope.json",
                        "--geometry", tmp_path / "g.json", "--out", tmp_path / "o"], capsys)
    assert code != 0 and err["error"] == "missing_file"


def test_unknown_config_key_rejected(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"num_pairs": 1, "colour": "red"}))
    code, err = _error(["synth", "--config", tmp_path / "c.json", "--out", tmp_path / "o"], capsys)
    assert code != 0 and err["error"] == "schema" and "colour" in err["message"]


def test_schema_violation_in_features(tmp_path, capsys):
    (tmp_path / "a.json").write_text(json.dumps({"width": 10, "height": 10, "keypoints": [{"x": 1}]}))
    (tmp_path / "h.json").write_text(json.dumps({"type": "homography", "H": np.eye(3).tolist()}))
    code, err = _error(["gt", "--a", tmp_path / "a.json", "--b", tmp_path / "a.json",
                        "--geometry", tmp_path / "h.json", "--out", tmp_path / "o"], capsys)
    assert code != 0 and "error" in err


def test_checkpoint_config_mismatch(workspace, tmp_path, capsys):
    (tmp_path / "m.json").write_text(json.dumps({"gnn": {"dim": 8, "blocks": 2, "heads": 2, "desc_dim": 32}}))
    code, err = _error(["match", "--config", tmp_path / "m.json", "--data", workspace / "ds",
                        "--checkpoint", workspace / "run" / "checkpoint.json", "--out", tmp_path / "o"], capsys)
    assert code != 0 and err["error"] == "checkpoint"


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "wireglue.cli", "eval", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"] == "usage"
