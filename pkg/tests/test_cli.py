import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from occgt.cli import run
from occgt.dataset import cloud_loader, load_cloud, load_index
from occgt.fusion import FusionConfig, fuse, select_frames
from occgt.loss import focal_loss
from occgt.occupancy import GridSpec, OccupancyGrid4D, read_occg, write_occg, write_probs
from occgt.synthetic import Track, make_index, write_dataset

SMALL_GRID = {"grid": {"origin": [-3.0, -25.6, -25.6], "voxel_size": [0.4, 0.4, 0.4], "dims": [20, 128, 128]}}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    tracks = (Track("car-0", start=(8.0, 3.5, 0.8), velocity=(3.0, 0.0)),)
    index, clouds = make_index(2, n_keyframes=4, tracks=tracks)
    path = write_dataset(root, index, clouds)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(SMALL_GRID))
    return path, cfg, index


def test_inspect_occg(tmp_path, capsys):
    spec = GridSpec((0, 0, 0), (0.5, 0.5, 0.5), (2, 3, 4))
    bits = np.zeros((2, 2, 3, 4), bool)
    bits[0, 0, 0, :3] = True
    write_occg(OccupancyGrid4D(spec, bits), tmp_path / "g.occg")
    assert run(["inspect", str(tmp_path / "g.occg")]) == 0
    out = capsys.readouterr().out
    assert "m: 2" in out
    assert "dims (D, H, W): (2, 3, 4)" in out
    assert "voxel size (z, y, x): 0.5, 0.5, 0.5" in out
    assert "occupancy fraction: 0.062500" in out


def test_inspect_cloud_and_probs(dataset, tmp_path, capsys):
    path, _, index = dataset
    frame = index.keyframes("scene-0000")[0]
    assert run(["inspect", str(path.parent / frame.cloud_path)]) == 0
    assert "labels: yes" in capsys.readouterr().out
    write_probs(np.full((1, 1, 2, 2), 0.25), GridSpec((0, 0, 0), (1, 1, 1), (1, 2, 2)), tmp_path / "p.probs")
    assert run(["inspect", str(tmp_path / "p.probs")]) == 0
    assert "shape (m, D, H, W): (1, 1, 2, 2)" in capsys.readouterr().out


def test_split(tmp_path, capsys):
    index, clouds = make_index(100, n_keyframes=1, sweeps_between=0, points_per_frame=4)
    src = write_dataset(tmp_path / "full", index, clouds)
    out = tmp_path / "sub" / "index25.json"
    out.parent.mkdir()
    assert run(["split", "--index", str(src), "--fraction", "0.25", "--seed", "3", "--out", str(out)]) == 0
    sub = load_index(out)
    assert len(sub) == 25
    # cloud paths still resolve from the new location
    f = next(iter(sub.frames()))
    assert len(load_cloud(sub.cloud_file(f))) == len(clouds[f.frame_id])
    assert json.loads(out.with_name(out.name + ".config.json").read_text())["fraction"] == 0.25
    # deterministic
    out2 = tmp_path / "sub" / "again.json"
    run(["split", "--index", str(src), "--fraction", "0.25", "--seed", "3", "--out", str(out2)])
    assert list(load_index(out2).scenes) == list(sub.scenes)


def test_labels4d_and_fusion_monotone(dataset, tmp_path, capsys):
    path, cfg, index = dataset
    ref = index.keyframes("scene-0000")[1].frame_id
    single, fused = tmp_path / "single.occg", tmp_path / "fused.occg"
    base = ["labels4d", "--index", str(path), "--frame", ref, "--config", str(cfg)]
    assert run(base + ["--out", str(single), "--before", "0", "--after", "0", "--no-sweeps"]) == 0
    assert run(base + ["--out", str(fused), "--before", "1", "--after", "1", "--sweeps"]) == 0
    echoed = json.loads((tmp_path / "fused.occg.config.json").read_text())
    assert echoed["fusion"]["n_keyframes_before"] == 1 and echoed["grid"]["dims"] == [20, 128, 128]
    g_single, g_fused = read_occg(single), read_occg(fused)
    assert g_single.bits.sum() < g_fused.bits.sum()
    assert not (g_single.bits & ~g_fused.bits).any()

    # any prediction misses at least as many voxels of the fused label
    pred = tmp_path / "pred.occg"
    rng = np.random.default_rng(0)
    write_occg(OccupancyGrid4D(g_single.spec, g_single.bits & (rng.random(g_single.bits.shape) < 0.7)), pred)
    capsys.readouterr()
    reports = []
    for gt in (fused, single):
        assert run(["eval-metrics", "--pred", str(pred), "--gt", str(gt)]) == 0
        reports.append(json.loads(capsys.readouterr().out))
    assert reports[0]["voxel_counts"]["fn"] >= reports[1]["voxel_counts"]["fn"]
    assert reports[0]["binary_iou"] <= reports[1]["binary_iou"]


def test_labels4d_matches_library(dataset, tmp_path):
    from occgt.occupancy import build_4d_labels

    path, cfg, index = dataset
    ref = index.keyframes("scene-0001")[0].frame_id
    out = tmp_path / "x.occg"
    assert run(["labels4d", "--index", str(path), "--frame", ref, "--config", str(cfg), "--out", str(out),
                "--m", "2", "--after", "1", "--sweeps", "--dynamic", "--threads", "2", "--semantic"]) == 0
    lib = build_4d_labels(load_index(path), ref, 2, FusionConfig(0, 1, True, True), GridSpec.from_dict(SMALL_GRID["grid"]),
                          semantic=True)
    disk = read_occg(out)
    # the header stores geometry as float32
    assert disk.spec == lib.spec.as_float32()
    assert disk.bits.tobytes() == lib.bits.tobytes()
    assert disk.semantics.tobytes() == lib.semantics.tobytes()


def test_semantic_eval(dataset, tmp_path, capsys):
    path, cfg, index = dataset
    ref = index.keyframes("scene-0000")[0].frame_id
    out = tmp_path / "s.occg"
    run(["labels4d", "--index", str(path), "--frame", ref, "--config", str(cfg), "--out", str(out), "--semantic"])
    capsys.readouterr()
    assert run(["eval-metrics", "--pred", str(out), "--gt", str(out), "--semantic", "--out", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["miou"] == 1.0 and report["binary_iou"] == 1.0
    assert report["per_class_iou"]["driveable_surface"] == 1.0
    assert report["per_class_iou"]["bus"] is None


def test_fuse_dump(dataset, tmp_path, capsys):
    path, cfg, index = dataset
    ref = index.keyframes("scene-0000")[1].frame_id
    out = tmp_path / "fused.bin"
    assert run(["fuse", "--index", str(path), "--frame", ref, "--config", str(cfg), "--out", str(out),
                "--before", "1", "--sweeps"]) == 0
    disk = load_index(path)
    fcfg = FusionConfig(1, 0, True)
    expected = fuse(select_frames(disk, ref, fcfg), cloud_loader(disk), fcfg)
    got = load_cloud(out)
    np.testing.assert_array_equal(got.points, expected.points.astype(np.float32))
    np.testing.assert_array_equal(got.labels, expected.labels)


def test_eval_loss(tmp_path, capsys):
    spec = GridSpec((0, 0, 0), (1, 1, 1), (1, 1, 1))
    write_occg(OccupancyGrid4D(spec, np.ones((1, 1, 1, 1), bool)), tmp_path / "t.occg")
    write_probs(np.full((1, 1, 1, 1), 0.5), spec, tmp_path / "p.probs")
    argv = ["eval-loss", "--pred", str(tmp_path / "p.probs"), "--gt", str(tmp_path / "t.occg")]
    assert run(argv) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.0433216988, abs=1e-9)
    assert run(argv + ["--alpha", "2", "--gamma", "0.25", "--mode", "paper_literal"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(1.16572996, abs=1e-7)
    # alpha = 2 needs the literal mode
    assert run(argv + ["--alpha", "2"]) == 1


def test_eval_loss_shape_mismatch(tmp_path):
    spec = GridSpec((0, 0, 0), (1, 1, 1), (1, 1, 2))
    write_occg(OccupancyGrid4D(spec, np.ones((1, 1, 1, 2), bool)), tmp_path / "t.occg")
    write_probs(np.full((2, 1, 1, 2), 0.5), spec, tmp_path / "p.probs")
    assert run(["eval-loss", "--pred", str(tmp_path / "p.probs"), "--gt", str(tmp_path / "t.occg")]) == 1


def test_train_toy(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["train-toy", "--seed", "1", "--iters", "3", "--out", str(out)]) == 0
    with open(out / "loss_history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "loss"] and len(rows) == 5
    pred, target = read_occg(out / "prediction.occg"), read_occg(out / "target.occg")
    assert pred.spec == target.spec and pred.spec.dims == (16, 32, 32)
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["seed"] == 1 and cfg["iters"] == 3
    # the stored probabilities reproduce the last logged loss
    from occgt.occupancy import read_probs

    probs, _ = read_probs(out / "prediction.probs")
    assert focal_loss(probs, target) == pytest.approx(float(rows[-1][1]), rel=1e-5)


def test_train_toy_deterministic(tmp_path):
    for name in ("a", "b"):
        run(["train-toy", "--seed", "2", "--iters", "2", "--out", str(tmp_path / name)])
    for f in ("loss_history.csv", "prediction.occg", "prediction.probs"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth(tmp_path, capsys):
    assert run(["synth", "--out", str(tmp_path / "d"), "--scenes", "3", "--keyframes", "2"]) == 0
    index = load_index(tmp_path / "d" / "index.json")
    assert len(index) == 3
    assert any(f.boxes for f in index.frames())


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert run(["inspect", "--bogus", "x"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 1

    def test_missing_file(self, tmp_path, capsys):
        assert run(["inspect", str(tmp_path / "nope.occg")]) == 2

    def test_corrupt_occg(self, tmp_path, capsys):
        (tmp_path / "bad.occg").write_bytes(b"OCCG" + b"\0" * 10)
        assert run(["inspect", str(tmp_path / "bad.occg")]) == 2

    def test_truncated_cloud(self, tmp_path, capsys):
        (tmp_path / "c.bin").write_bytes(b"\0" * 47)
        assert run(["inspect", str(tmp_path / "c.bin")]) == 2
        assert "47" in capsys.readouterr().err

    def test_unknown_frame(self, dataset, tmp_path, capsys):
        path, cfg, _ = dataset
        assert run(["labels4d", "--index", str(path), "--frame", "nope", "--config", str(cfg),
                    "--out", str(tmp_path / "o.occg")]) == 1

    def test_bad_fraction(self, dataset, tmp_path, capsys):
        path, _, _ = dataset
        assert run(["split", "--index", str(path), "--fraction", "1.5", "--out", str(tmp_path / "i.json")]) == 1

    def test_bad_config_json(self, dataset, tmp_path, capsys):
        path, _, index = dataset
        (tmp_path / "c.json").write_text("{not json")
        ref = index.keyframes("scene-0000")[0].frame_id
        assert run(["labels4d", "--index", str(path), "--frame", ref, "--config", str(tmp_path / "c.json"),
                    "--out", str(tmp_path / "o.occg")]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "occgt", "inspect", str(tmp_path / "missing")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "error" in proc.stderr
