import filecmp
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panoslam.camera import make_intrinsics, pixel_grid_bearings
from panoslam.dataset import (
    FACE_ORDER,
    Box,
    CircleTrajectory,
    Ground,
    SceneError,
    SceneSpec,
    Sphere,
    bearing_at,
    builtin_scene,
    face_index,
    generate_dataset,
    load_scene,
    raycast_bearings,
    raycast_scene,
    render_cubemap,
    scene_from_text,
    scene_to_text,
    stitch_cubemap,
)
from panoslam.fileio import (
    FormatError,
    Trajectory,
    read_pfm,
    read_ply,
    read_ppm,
    read_trajectory,
    write_pfm,
    write_ply,
    write_ppm,
    write_trajectory,
)
from panoslam.geometry import Pose

GREY = (0.5, 0.5, 0.5)


def _solid_faces(size, colors):
    return {n: np.broadcast_to(np.array(c, np.uint8), (size, size, 3)).copy() for n, c in zip(FACE_ORDER, colors)}


# ---------------------------------------------------------------------------
# stitching


def test_stitch_all_red():
    out = stitch_cubemap(_solid_faces(32, [(255, 0, 0)] * 6), (128, 64))
    assert out.shape == (64, 128, 3)
    assert np.all(out == np.array([255, 0, 0], np.uint8))


def test_stitch_center_samples_front_face():
    faces = _solid_faces(32, [(0, 0, 0)] * 6)
    faces["front"][15:17, 15:17] = (10, 200, 30)
    out = stitch_cubemap(faces, (256, 128))
    np.testing.assert_array_equal(out[64, 128], [10, 200, 30])


def test_stitch_face_areas_match_solid_angle():
    colors = [(k * 40, 255 - k * 40, 7 * k) for k in range(6)]
    W, H = 1024, 512
    out = stitch_cubemap(_solid_faces(16, colors), (W, H))
    # oracle: sin-weighted pixel areas, summed per color
    v = np.arange(H) + 0.5
    w = np.repeat((np.sin(np.pi * v / H) * (np.pi / H) * (2 * np.pi / W))[:, None], W, axis=1)
    for c in colors:
        area = w[np.all(out == np.array(c, np.uint8), axis=-1)].sum()
        assert abs(area / (4 * np.pi) - 1 / 6) <= 0.01 / 6


def test_stitch_errors():
    faces = _solid_faces(8, [(0, 0, 0)] * 6)
    del faces["up"]
    with pytest.raises(SceneError):
        stitch_cubemap(faces, (64, 32))
    faces = _solid_faces(8, [(0, 0, 0)] * 6)
    faces["down"] = np.zeros((9, 9, 3), np.uint8)
    with pytest.raises(SceneError):
        stitch_cubemap(faces, (64, 32))


def test_face_index_ties_follow_priority():
    # a bearing equally between front (-X) and left (-Y) goes to front
    b = np.array([[-1.0, -1.0, 0.0]]) / np.sqrt(2)
    assert FACE_ORDER[face_index(b)[0]] == "front"
    b = np.array([[1.0, 1.0, 1.0]]) / np.sqrt(3)
    assert FACE_ORDER[face_index(b)[0]] == "back"


def test_stitch_matches_direct_render():
    scene = builtin_scene(seed=7, frames=1)
    pose = scene.trajectory.poses()[0]
    W, H = 1024, 512
    direct, _ = raycast_scene(scene, pose, make_intrinsics(W, H))
    stitched = stitch_cubemap(render_cubemap(scene, pose, 512), (W, H))
    diff = np.abs(direct.astype(int) - stitched.astype(int)).max(axis=-1)
    band = int(0.05 * H)
    assert np.mean(diff[band : H - band] <= 2) >= 0.99


# ---------------------------------------------------------------------------
# ray casting


def _sphere_scene():
    return SceneSpec(spheres=(Sphere((-10.0, 0.0, 0.0), 1.0, GREY),), trajectory=CircleTrajectory(0.0, 0.0, 1))


def test_raycast_sphere_on_axis():
    intr = make_intrinsics(512, 256)
    _, depth = raycast_scene(_sphere_scene(), Pose.identity(), intr)
    assert depth[128, 256] == 9.0
    # the far side of the sky hits nothing
    assert depth[128, 0] == 0.0
    assert np.mean(depth > 0) < 0.05


def test_raycast_ground_straight_down():
    scene = SceneSpec(ground=Ground(-2.0, 1.0, GREY, (0.2, 0.2, 0.2)), trajectory=CircleTrajectory(0.0, 0.0, 1))
    intr = make_intrinsics(512, 256)
    _, t = raycast_bearings(scene, Pose.identity(), bearing_at(intr, 256, 256)[None])
    assert t[0] == pytest.approx(2.0, abs=1e-12)
    _, depth = raycast_scene(scene, Pose.identity(), intr)
    # upper hemisphere is sky
    assert np.all(depth[: 128] == 0.0)


def test_raycast_points_lie_on_surfaces():
    scene = SceneSpec(
        spheres=(Sphere((-6.0, 1.0, 0.5), 1.5, GREY),),
        boxes=(Box((2.0, -3.0, -1.0), (4.0, -1.0, 1.0), GREY),),
        ground=Ground(-2.0, 1.0, GREY, GREY),
        trajectory=CircleTrajectory(0.0, 0.0, 1),
    )
    pose = Pose.from_camera_in_world(np.eye(3), [0.1, 0.2, 0.3])
    intr = make_intrinsics(256, 128)
    _, depth = raycast_scene(scene, pose, intr)
    b = pixel_grid_bearings(intr)
    valid = depth > 0
    X = pose.inverse().apply(b[valid] * depth[valid][:, None])
    s = scene.spheres[0]
    d_sphere = np.abs(np.linalg.norm(X - s.center, axis=1) - s.radius)
    d_ground = np.abs(X[:, 2] + 2.0)
    lo, hi = np.array(scene.boxes[0].lo), np.array(scene.boxes[0].hi)
    outside = np.maximum(lo - X, X - hi)
    inside = np.all(outside <= 1e-9, axis=1)
    d_box = np.where(inside, np.abs(outside).min(axis=1), np.inf)
    assert np.min(np.stack([d_sphere, d_ground, d_box]), axis=0).max() <= 1e-6


def test_scene_validation():
    with pytest.raises(SceneError):
        SceneSpec(trajectory=CircleTrajectory(0, 0, 1)).validate()
    inside = SceneSpec(spheres=(Sphere((0.0, 0.0, 0.0), 1.0, GREY),), trajectory=CircleTrajectory(0.0, 0.0, 1))
    with pytest.raises(SceneError):
        inside.validate()
    builtin_scene().validate()


def test_scene_text_round_trip(tmp_path):
    scene = builtin_scene(seed=3, frames=17)
    assert scene_from_text(scene_to_text(scene)) == scene
    p = tmp_path / "scene.txt"
    p.write_text(scene_to_text(scene))
    assert load_scene(p) == scene
    with pytest.raises(SceneError):
        scene_from_text("cone 1 2 3\n")
    with pytest.raises(SceneError):
        scene_from_text("sphere 1 2\n")


# ---------------------------------------------------------------------------
# file formats


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), h=st.integers(1, 20), w=st.integers(1, 20))
def test_pfm_round_trip(tmp_path_factory, seed, h, w):
    rng = np.random.default_rng(seed)
    a = (rng.normal(size=(h, w)) * 10 ** rng.uniform(-5, 5)).astype(np.float32)
    p = tmp_path_factory.mktemp("pfm") / "a.pfm"
    write_pfm(p, a)
    b = read_pfm(p)
    assert b.dtype == np.float32
    np.testing.assert_array_equal(a.view(np.uint32), b.view(np.uint32))


def test_pfm_layout_and_errors(tmp_path):
    p = tmp_path / "a.pfm"
    write_pfm(p, np.array([[1.0, 2.0], [3.0, 4.0]]))
    raw = p.read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    # bottom row first
    np.testing.assert_array_equal(np.frombuffer(raw[-16:], "<f4"), [3, 4, 1, 2])
    with pytest.raises(FormatError):
        write_pfm(p, np.array([[np.nan]]))
    p.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_pfm(p)


def test_ppm_round_trip_and_errors(tmp_path, rng):
    img = rng.integers(0, 256, size=(7, 11, 3), dtype=np.uint8)
    p = tmp_path / "a.ppm"
    write_ppm(p, img)
    np.testing.assert_array_equal(read_ppm(p), img)
    p.write_bytes(b"P6\n1 1\n65535\n" + b"\0" * 6)
    with pytest.raises(FormatError):
        read_ppm(p)
    p.write_bytes(b"P6\n# comment\n2 1\n255\n" + bytes(range(6)))
    np.testing.assert_array_equal(read_ppm(p).ravel(), np.arange(6))
    p.write_bytes(b"P6\n2 2\n255\n" + b"\0" * 5)
    with pytest.raises(FormatError):
        read_ppm(p)
    with pytest.raises(FormatError):
        write_ppm(p, img.astype(np.uint16))


def test_trajectory_round_trip(tmp_path, rng):
    n = 25
    q = rng.normal(size=(n, 4))
    traj = Trajectory(np.cumsum(rng.uniform(0.01, 1, n)), rng.normal(size=(n, 3)) * 100, q / np.linalg.norm(q, axis=1, keepdims=True))
    p = tmp_path / "t.txt"
    write_trajectory(p, traj, header="est\nsecond line")
    assert sum(1 for ln in p.read_text().splitlines() if not ln.startswith("#")) == n
    back = read_trajectory(p)
    for a, b in ((traj.timestamps, back.timestamps), (traj.positions, back.positions), (traj.quaternions, back.quaternions)):
        np.testing.assert_array_equal(a, b)
    back.validate()
    p.write_text("0 1 2 3\n")
    with pytest.raises(FormatError):
        read_trajectory(p)
    with pytest.raises(FormatError):
        Trajectory([1.0, 1.0], np.zeros((2, 3)), [[0, 0, 0, 1]] * 2).validate()


def test_ply_round_trip(tmp_path, rng):
    pts = np.round(rng.normal(size=(10, 3)), 6)
    cols = rng.integers(0, 256, size=(10, 3), dtype=np.uint8)
    write_ply(tmp_path / "m.ply", pts, cols)
    p, c = read_ply(tmp_path / "m.ply")
    np.testing.assert_allclose(p, pts, atol=1e-12)
    np.testing.assert_array_equal(c, cols)


# ---------------------------------------------------------------------------
# dataset trees


def _tree_files(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


def test_generate_three_frames(tmp_path):
    scene = builtin_scene(seed=7, frames=3)
    generate_dataset(scene, tmp_path / "a", size=(128, 64))
    files = _tree_files(tmp_path / "a")
    assert sum(f.startswith("rgb") for f in files) == 3
    assert sum(f.startswith("depth") for f in files) == 3
    assert {"gt_traj.txt", "calib.txt", "scene.txt"} <= set(files)
    assert len(read_trajectory(tmp_path / "a" / "gt_traj.txt")) == 3
    assert (tmp_path / "a" / "calib.txt").read_text().split() == ["128", "64"]
    generate_dataset(scene, tmp_path / "b", size=(128, 64))
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert mismatch == [] and errors == [] and len(match) == len(files)


def test_generate_zero_frames_rejected(tmp_path):
    with pytest.raises(SceneError):
        generate_dataset(builtin_scene(frames=0), tmp_path, size=(128, 64))


def test_dataset_frames_match_direct_render(tiny_dataset):
    scene = load_scene(os.path.join(tiny_dataset, "scene.txt"))
    pose = scene.trajectory.poses()[2]
    rgb, depth = raycast_scene(scene, pose, make_intrinsics(512, 256))
    np.testing.assert_array_equal(read_ppm(os.path.join(tiny_dataset, "rgb", "000002.ppm")), rgb)
    np.testing.assert_array_equal(read_pfm(os.path.join(tiny_dataset, "depth", "000002.pfm")), depth.astype(np.float32))
