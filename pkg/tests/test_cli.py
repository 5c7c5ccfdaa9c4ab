import os

import numpy as np
import pytest

from panoslam.cli import main
from panoslam.dataset import builtin_scene, render_cubemap
from panoslam.fileio import read_pfm, read_ppm, read_trajectory, write_pfm, write_ppm, write_trajectory


@pytest.fixture(scope="module")
def three_frames(tmp_path_factory):
    out = tmp_path_factory.mktemp("three")
    assert main(["synth", "--out", str(out), "--frames", "3", "--size", "512x256", "--seed", "7"]) == 0
    return out


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.mark.parametrize(
    "argv",
    [
        ["synth"],
        ["run", "--mode", "tri", "--out", "x.txt"],
        ["eval", "--gt", "a.txt"],
        ["densify", "--rgb", "a.ppm"],
        ["stitch", "--out", "p.ppm"],
        ["sparse-depth", "--out", "d"],
        ["run", "--data", "d", "--mode", "stereo", "--out", "x.txt"],
        [],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_key_exits_2(three_frames, tmp_path, capsys):
    argv = ["run", "--data", str(three_frames), "--out", str(tmp_path / "e.txt"), "--set", "nope.key=1"]
    assert main(argv) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_missing_dataset_exits_1(tmp_path, capsys):
    assert main(["run", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "e.txt")]) == 1
    assert "error" in capsys.readouterr().err


def test_synth_file_set(three_frames):
    files = sorted(os.listdir(three_frames))
    assert {"calib.txt", "gt_traj.txt", "scene.txt", "rgb", "depth"} <= set(files)
    assert sorted(os.listdir(three_frames / "rgb")) == [f"{i:06d}.ppm" for i in range(3)]
    assert sorted(os.listdir(three_frames / "depth")) == [f"{i:06d}.pfm" for i in range(3)]


@pytest.mark.parametrize("mode", ["tri", "dc"])
def test_run_happy_path_and_determinism(three_frames, tmp_path, mode, capsys):
    outs = []
    for k in range(2):
        est, ply = tmp_path / f"est{k}.txt", tmp_path / f"map{k}.ply"
        argv = ["run", "--data", str(three_frames), "--mode", mode, "--out", str(est), "--ply", str(ply)]
        argv += ["--single-thread", "--seed", "3"]
        if mode == "dc":
            argv += ["--depth-prior", "100"]
        assert main(argv) == 0
        assert len(read_trajectory(est)) == 3
        outs.append((_read(est), _read(ply)))
    assert outs[0] == outs[1]
    assert "lost none" in capsys.readouterr().out


def test_sparse_depth_command(three_frames, tmp_path):
    out = tmp_path / "sparse"
    assert main(["sparse-depth", "--data", str(three_frames), "--out", str(out), "--single-thread"]) == 0
    maps = sorted(os.listdir(out))
    assert maps
    d = read_pfm(out / maps[0])
    assert d.shape == (256, 512) and np.count_nonzero(d) > 0


def test_eval_output_and_plot(three_frames, tmp_path, capsys):
    gt = read_trajectory(three_frames / "gt_traj.txt")
    est = type(gt)(gt.timestamps, gt.positions * 0.5, gt.quaternions)
    write_trajectory(tmp_path / "est.txt", est)
    plot = tmp_path / "plot.png"
    argv = ["eval", "--gt", str(three_frames / "gt_traj.txt"), "--est", str(tmp_path / "est.txt"), "--plot", str(plot)]
    assert main(argv) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1
    name_a, ate, name_s, sf = lines[0].split()
    assert (name_a, name_s) == ("ATE_RMSE", "SF")
    assert float(ate) == pytest.approx(0.0, abs=1e-9)
    assert sf == "2"
    assert plot.exists() and _read(plot)[:8] == b"\x89PNG\r\n\x1a\n"


def test_eval_without_pairs_exits_1(three_frames, tmp_path):
    gt = read_trajectory(three_frames / "gt_traj.txt")
    write_trajectory(tmp_path / "late.txt", type(gt)(gt.timestamps + 100.0, gt.positions, gt.quaternions))
    assert main(["eval", "--gt", str(three_frames / "gt_traj.txt"), "--est", str(tmp_path / "late.txt")]) == 1


def test_densify_command(three_frames, tmp_path):
    rgb = read_ppm(three_frames / "rgb" / "000000.ppm")
    truth = read_pfm(three_frames / "depth" / "000000.pfm")
    sparse = np.zeros_like(truth)
    rng = np.random.default_rng(0)
    idx = rng.choice(np.flatnonzero(truth > 0), 800, replace=False)
    sparse.flat[idx] = truth.flat[idx]
    write_pfm(tmp_path / "sparse.pfm", sparse)
    out, conf = tmp_path / "dense.pfm", tmp_path / "conf.pfm"
    argv = ["densify", "--rgb", str(three_frames / "rgb" / "000000.ppm"), "--sparse", str(tmp_path / "sparse.pfm")]
    assert main(argv + ["--out", str(out), "--conf", str(conf)]) == 0
    dense, c = read_pfm(out), read_pfm(conf)
    assert dense.shape == rgb.shape[:2] and np.all(dense > 0)
    assert np.all((c > 0) & (c <= 1))
    assert dense.min() >= sparse[sparse > 0].min() and dense.max() <= sparse.max()
    # mismatched sizes are a usage error
    write_pfm(tmp_path / "small.pfm", sparse[:10, :20])
    argv = ["densify", "--rgb", str(three_frames / "rgb" / "000000.ppm"), "--sparse", str(tmp_path / "small.pfm")]
    assert main(argv + ["--out", str(out), "--conf", str(conf)]) == 2


def test_stitch_command(tmp_path):
    scene = builtin_scene(frames=1)
    faces = render_cubemap(scene, scene.trajectory.poses()[0], 32)
    for name, img in faces.items():
        write_ppm(tmp_path / f"{name}.ppm", img)
    assert main(["stitch", "--faces", str(tmp_path), "--out", str(tmp_path / "pano.ppm")]) == 0
    assert read_ppm(tmp_path / "pano.ppm").shape == (64, 128, 3)
    os.remove(tmp_path / "up.ppm")
    assert main(["stitch", "--faces", str(tmp_path), "--out", str(tmp_path / "pano.ppm")]) == 1
