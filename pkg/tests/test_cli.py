import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from cycle3d import io
from cycle3d.cli import main


@pytest.fixture
def scene_dir(tmp_path):
    out = tmp_path / "scene"
    assert main(["scene", "--kind", "two-plane", "--size", "16", "--seed", "3", "--out", str(out)]) == 0
    return out


def test_scene_layout(scene_dir):
    assert (scene_dir / "rgb.png").exists() and (scene_dir / "depth.pfm").exists()
    k, poses = io.load_trajectory(scene_dir / "trajectory.json")
    assert (k.width, k.height) == (16, 16) and len(poses) == 5
    assert poses[0].translation[0] > 0
    assert sorted(p.name for p in (scene_dir / "gt").glob("frame_*.png"))[-1] == "frame_005.png"
    assert json.loads((scene_dir / "spec.json").read_text())["size"] == 16


def test_identity_warp_then_eval_is_perfect(scene_dir, tmp_path):
    from cycle3d.geometry import Intrinsics, Pose
    traj = tmp_path / "id.json"
    io.save_trajectory(traj, Intrinsics.default(16), [Pose.identity()])
    w = tmp_path / "warp"
    assert main(["warp", "--rgb", str(scene_dir / "rgb.png"), "--depth", str(scene_dir / "depth.pfm"),
                 "--traj", str(traj), "--pose-index", "0", "--out", str(w)]) == 0
    assert io.load_mask_png(w / "mask.png").all()
    pred = tmp_path / "pred"
    pred.mkdir()
    shutil.copy(w / "rgb.png", pred / "frame_000.png")
    report = tmp_path / "r.json"
    assert main(["eval", "--pred", str(pred), "--gt", str(scene_dir / "gt"), "--mask", str(scene_dir / "gt"),
                 "--report", str(report)]) == 0
    r = json.loads(report.read_text())
    assert r["mean_psnr"] == 99.0 and r["frames"][0]["psnr_masked"] == 99.0
    assert abs(r["mean_ssim"] - 1.0) < 1e-12


def test_cyclegen_is_byte_reproducible(scene_dir, tmp_path):
    rgb, dep = tmp_path / "rgb", tmp_path / "depth"
    rgb.mkdir(), dep.mkdir()
    shutil.copy(scene_dir / "rgb.png", rgb / "a.png")
    shutil.copy(scene_dir / "depth.pfm", dep / "a.pfm")
    outs = []
    for run in ("x", "y"):
        out = tmp_path / run
        assert main(["cyclegen", "--rgb-dir", str(rgb), "--depth-dir", str(dep), "--n", "3", "--seed", "5",
                     "--out", str(out)]) == 0
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert len(files) == 15
    for f in files:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    meta = json.loads((outs[0] / "pair_00002" / "meta.json").read_text())
    assert meta["index"] == 2 and meta["seed"] == 5 and meta["source"] == "a.png"


def test_train_resume_and_sample(scene_dir, tmp_path):
    rgb, dep = tmp_path / "rgb", tmp_path / "depth"
    rgb.mkdir(), dep.mkdir()
    shutil.copy(scene_dir / "rgb.png", rgb / "a.png")
    shutil.copy(scene_dir / "depth.pfm", dep / "a.pfm")
    pairs = tmp_path / "pairs"
    main(["cyclegen", "--rgb-dir", str(rgb), "--depth-dir", str(dep), "--n", "4", "--seed", "0", "--out", str(pairs)])
    ck = tmp_path / "m.ckpt"
    common = ["--pairs", str(pairs), "--seed", "1", "--ckpt", str(ck), "--batch-size", "2"]
    assert main(["train", "--steps", "2"] + common) == 0
    assert load_step(ck) == 2
    assert main(["train", "--steps", "3", "--resume"] + common) == 0
    assert load_step(ck) == 3
    out = tmp_path / "video"
    assert main(["sample", "--ckpt", str(ck), "--start", str(scene_dir / "rgb.png"), "--depth",
                 str(scene_dir / "depth.pfm"), "--traj", str(scene_dir / "trajectory.json"), "--seed", "0",
                 "--composite", "--out", str(out)]) == 0
    assert len(list(out.glob("frame_*.png"))) == 6
    assert np.array_equal(io.load_png(out / "frame_000.png"), io.load_png(scene_dir / "rgb.png"))


def load_step(path):
    return io.load_checkpoint(path).step


def test_errors_are_one_line_and_nonzero(scene_dir, tmp_path, capsys):
    code = main(["warp", "--rgb", str(scene_dir / "rgb.png"), "--depth", str(scene_dir / "depth.pfm"),
                 "--traj", str(scene_dir / "trajectory.json"), "--pose-index", "9", "--out", str(tmp_path)])
    err = capsys.readouterr().err
    assert code == 2 and err.count("\n") == 1 and err.startswith("cycle3d warp: error:")
    bad = tmp_path / "bad.pfm"
    bad.write_bytes(b"Pf\n1 1\n1.0\n\0\0\0\0")
    code = main(["warp", "--rgb", str(scene_dir / "rgb.png"), "--depth", str(bad),
                 "--traj", str(scene_dir / "trajectory.json"), "--pose-index", "0", "--out", str(tmp_path)])
    assert code == 2 and "big-endian" in capsys.readouterr().err


def test_console_entry_point_gradcheck():
    r = subprocess.run([sys.executable, "-m", "cycle3d.cli", "gradcheck", "--n-params", "20"],
                       capture_output=True, text=True, timeout=300)
    assert r.returncode == 0, r.stdout + r.stderr
    assert r.stdout.count("PASS") == 4 and "gradcheck passed" in r.stdout
