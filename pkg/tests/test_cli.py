import json

import pytest

from instcomp.cli import EXIT_CODES, main

CONFIG = """
[train]
steps = 2
momentum = 0.9
grad_clip = 5.0
n_scenes = 2
views_per_scene = 4

[scene]
seed = 7
n_objects = [3, 4]
n_views = 4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "c.toml").write_text(CONFIG)
    assert main(["make-data", "--config", str(d / "c.toml"), "--count", "3", "--out", str(d / "scenes")]) == 0
    assert main(["train", "--config", str(d / "c.toml"), "--out", str(d / "run")]) == 0
    return d


def test_make_data_and_train(workspace):
    assert len(list((workspace / "scenes").glob("*.rvns"))) == 3
    assert (workspace / "run" / "model.rvnt").exists()
    assert len((workspace / "run" / "train_log.jsonl").read_text().splitlines()) == 2


def test_infer_writes_jsonl_and_slices(workspace, capsys):
    scene = sorted((workspace / "scenes").glob("*.rvns"))[0]
    out = workspace / "pred.jsonl"
    rc = main(["infer", "--checkpoint", str(workspace / "run" / "model.rvnt"), "--scene", str(scene),
               "--out", str(out), "--dump-slices", str(workspace / "slices")])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    lines = out.read_text().splitlines()
    assert summary["predictions"] == len(lines)
    for line in lines:
        d = json.loads(line)
        assert {"scene", "class_id", "score", "box", "lo", "shape", "mask_rle"} <= set(d)
    assert len(list((workspace / "slices").glob("tsdf_*.png"))) == 32


def test_evaluate_report(workspace):
    report = workspace / "report.json"
    rc = main(["evaluate", "--checkpoint", str(workspace / "run" / "model.rvnt"), "--scenes",
               str(workspace / "scenes"), "--report", str(report)])
    assert rc == 0
    rep = json.loads(report.read_text())
    for task in ("completion", "segmentation", "detection"):
        assert set(rep[task]) == {"per_class", "map"}
    assert isinstance(rep["completeness_bins"], list)
    rc = main(["evaluate", "--predictor", "oracle", "--scenes", str(workspace / "scenes"), "--report", str(report)])
    assert rc == 0 and json.loads(report.read_text())["completion"]["map"] == 1.0


def test_anchors(workspace):
    out = workspace / "anchors.json"
    assert main(["anchors", "--scenes", str(workspace / "scenes"), "--k", "3", "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert len(d["small"]) + len(d["big"]) == 3


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return err[0]


@pytest.mark.parametrize("argv,category", [
    (["train", "--out", "x"], "usage"),
    (["frobnicate"], "usage"),
    (["train", "--config", "/nonexistent.toml", "--out", "x"], "config"),
    (["evaluate", "--scenes", "/nonexistent", "--report", "r.json", "--predictor", "empty"], "data"),
    (["infer", "--checkpoint", "/nonexistent.rvnt", "--scene", "s", "--out", "o"], "io"),
    (["evaluate", "--scenes", "x", "--report", "r"], "usage"),
])
def test_error_categories(argv, category, capsys):
    rc = main(argv)
    assert rc == EXIT_CODES[category] != 0
    assert error_line(capsys).startswith(f"error[{category}]: ")


def test_bad_checkpoint_is_data_error(workspace, capsys):
    bad = workspace / "bad.rvnt"
    bad.write_bytes(b"XXXX0000")
    scene = sorted((workspace / "scenes").glob("*.rvns"))[0]
    rc = main(["infer", "--checkpoint", str(bad), "--scene", str(scene), "--out", str(workspace / "o.jsonl")])
    assert rc == EXIT_CODES["data"]
    assert error_line(capsys).startswith("error[data]: ")
