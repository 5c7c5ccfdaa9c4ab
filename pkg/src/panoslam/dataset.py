"""Synthetic panoramic datasets: ray-cast scenes, cubemap stitching, file trees.

A scene is a handful of analytic primitives (spheres, axis-aligned boxes and a
checkerboard ground plane) textured with a deterministic 3D value noise so
that features are stable across viewpoints. Texture contrast fades once the
pixel footprint approaches the noise cell size, which keeps renders at
different resolutions mutually consistent.
"""

from __future__ import annotations

import logging
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from .camera import Intrinsics, bearing_from_pixel, make_intrinsics, pixel_grid_bearings
from .fileio import Trajectory, write_calib, write_pfm, write_ppm, write_trajectory
from .geometry import Pose, rot_z

log = logging.getLogger(__name__)

SKY_RGB = np.array([0.62, 0.74, 0.86])
LIGHT_DIR = np.array([0.35, -0.45, 0.82]) / np.linalg.norm([0.35, -0.45, 0.82])

FACE_ORDER = ("front", "back", "left", "right", "up", "down")
# (forward, right, down) axes of each 90-degree cubemap face in the panorama camera frame
FACE_AXES = {
    "front": ((-1, 0, 0), (0, 1, 0), (0, 0, -1)),
    "back": ((1, 0, 0), (0, -1, 0), (0, 0, -1)),
    "left": ((0, -1, 0), (-1, 0, 0), (0, 0, -1)),
    "right": ((0, 1, 0), (1, 0, 0), (0, 0, -1)),
    "up": ((0, 0, 1), (0, -1, 0), (1, 0, 0)),
    "down": ((0, 0, -1), (0, -1, 0), (-1, 0, 0)),
}


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class Ground:
    height: float
    cell: float
    albedo1: tuple[float, float, float]
    albedo2: tuple[float, float, float]


@dataclass(frozen=True)
class CircleTrajectory:
    radius: float = 3.0
    height: float = 0.0
    frames: int = 200
    step: float = 2.0 * np.pi / 200
    dt: float = 0.1

    def poses(self) -> list[Pose]:
        """World->camera poses; the camera faces along the direction of travel."""
        out = []
        for i in range(self.frames):
            th = i * self.step
            c = np.array([self.radius * np.cos(th), self.radius * np.sin(th), self.height])
            out.append(Pose.from_camera_in_world(rot_z(th - np.pi / 2), c))
        return out

    def timestamps(self) -> np.ndarray:
        return np.arange(self.frames) * self.dt

    @property
    def length(self) -> float:
        return self.radius * abs(self.step) * max(self.frames - 1, 0)


@dataclass(frozen=True)
class SceneSpec:
    spheres: tuple[Sphere, ...] = ()
    boxes: tuple[Box, ...] = ()
    ground: Ground | None = None
    trajectory: CircleTrajectory = field(default_factory=CircleTrajectory)
    seed: int = 0
    texture_cell: float = 0.22
    # angular pixel footprint (radians) used to band-limit the texture
    lod_angle: float = 2.0 * np.pi / 1024

    def validate(self) -> None:
        if not (self.spheres or self.boxes or self.ground):
            raise SceneError("scene needs at least one primitive")
        for pose in self.trajectory.poses():
            c = pose.center
            for s in self.spheres:
                if np.linalg.norm(c - np.array(s.center)) <= s.radius:
                    raise SceneError(f"camera at {c} is inside sphere {s}")
            for b in self.boxes:
                if np.all(c >= np.array(b.lo)) and np.all(c <= np.array(b.hi)):
                    raise SceneError(f"camera at {c} is inside box {b}")
            if self.ground is not None and c[2] <= self.ground.height:
                raise SceneError(f"camera at {c} is below the ground plane")

    def with_frames(self, frames: int) -> "SceneSpec":
        tr = self.trajectory
        return SceneSpec(
            self.spheres,
            self.boxes,
            self.ground,
            CircleTrajectory(tr.radius, tr.height, frames, tr.step, tr.dt),
            self.seed,
            self.texture_cell,
            self.lod_angle,
        )


def builtin_scene(seed: int = 7, frames: int = 200) -> SceneSpec:
    """Courtyard of spheres and boxes around a circular camera path, walled in at 11 m."""
    rng = np.random.default_rng(seed)
    spheres: list[Sphere] = []
    boxes: list[Box] = []

    def albedo():
        return tuple(float(x) for x in rng.uniform(0.35, 0.95, 3))

    placed: list[tuple[float, float, float]] = []

    def free(x, y, r):
        return all(np.hypot(x - px, y - py) > r + pr + 0.3 for px, py, pr in placed)

    while len(spheres) + len(boxes) < 26:
        rad = rng.uniform(4.6, 8.8)
        ang = rng.uniform(0, 2 * np.pi)
        x, y = rad * np.cos(ang), rad * np.sin(ang)
        if rng.uniform() < 0.5:
            r = rng.uniform(0.45, 1.1)
            if not free(x, y, r):
                continue
            z = rng.uniform(-1.5 + r * 0.5, 1.2)
            spheres.append(Sphere((x, y, z), r, albedo()))
            placed.append((x, y, r))
        else:
            hx, hy = rng.uniform(0.3, 0.9, 2)
            top = rng.uniform(-0.2, 2.5)
            if not free(x, y, max(hx, hy) * 1.42):
                continue
            boxes.append(Box((x - hx, y - hy, -1.5), (x + hx, y + hy, top), albedo()))
            placed.append((x, y, max(hx, hy) * 1.42))
    # central pillar and a sphere inside the loop
    boxes.append(Box((-0.5, -0.5, -1.5), (0.5, 0.5, 2.0), albedo()))
    spheres.append(Sphere((0.9, 0.9, -0.9), 0.5, albedo()))
    wall = 11.0
    for lo, hi in (
        ((-wall - 0.2, -wall, -1.5), (-wall, wall, 3.5)),
        ((wall, -wall, -1.5), (wall + 0.2, wall, 3.5)),
        ((-wall, -wall - 0.2, -1.5), (wall, -wall, 3.5)),
        ((-wall, wall, -1.5), (wall, wall + 0.2, 3.5)),
    ):
        boxes.append(Box(lo, hi, albedo()))
    ground = Ground(-1.5, 1.0, (0.55, 0.52, 0.45), (0.32, 0.30, 0.28))
    traj = CircleTrajectory(radius=3.0, height=0.0, frames=frames, step=2.0 * np.pi / 200, dt=0.1)
    return SceneSpec(tuple(spheres), tuple(boxes), ground, traj, seed)


# ---------------------------------------------------------------------------
# texture


def _hash3(ix, iy, iz, seed: int) -> np.ndarray:
    """Deterministic per-lattice-point value in [0, 1)."""
    h = (
        ix.astype(np.uint64) * np.uint64(0x9E3779B185EBCA87)
        ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
        ^ np.uint64(seed * 0x27D4EB2F165667C5 & 0xFFFFFFFFFFFFFFFF)
    )
    h ^= h >> np.uint64(29)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def value_noise(p: np.ndarray, cell: float, seed: int) -> np.ndarray:
    """C2-smooth 3D value noise in [0, 1]."""
    q = p / cell
    i0 = np.floor(q)
    f = _fade(q - i0)
    i0 = i0.astype(np.int64)
    out = np.zeros(len(p))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                out += wx * wy * wz * _hash3(i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz, seed)
    return out


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


# ---------------------------------------------------------------------------
# ray casting


def intersect(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit along unit rays from ``origin``.

    Returns ``(t, normal, albedo, kind)`` where ``t`` is ``inf`` for misses,
    ``kind`` is 0 for miss, 1 sphere, 2 box, 3 ground.
    """
    n = len(dirs)
    t_best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.tile(SKY_RGB, (n, 1))
    kind = np.zeros(n, dtype=np.int8)
    o = np.asarray(origin, dtype=float)

    def candidates(center, radius):
        # rays inside the cone subtended by a bounding sphere
        oc = np.asarray(center, dtype=float) - o
        dist = np.linalg.norm(oc)
        if dist <= radius:
            return np.arange(n)
        cos_half = np.sqrt(max(1.0 - (radius / dist) ** 2, 0.0))
        return np.nonzero(dirs @ (oc / dist) >= cos_half - 1e-9)[0]

    for s in scene.spheres:
        idx = candidates(s.center, s.radius)
        if idx.size == 0:
            continue
        d = dirs[idx]
        oc = np.array(s.center) - o
        b = d @ oc
        disc = np.maximum(b * b - (oc @ oc - s.radius**2), 0.0)
        t = b - np.sqrt(disc)
        upd = (t > 1e-9) & (t < t_best[idx])
        if upd.any():
            j = idx[upd]
            t_best[j] = t[upd]
            p = o + dirs[j] * t[upd, None]
            normal[j] = (p - np.array(s.center)) / s.radius
            albedo[j] = s.albedo
            kind[j] = 1

    for bx in scene.boxes:
        lo = np.array(bx.lo, dtype=float)
        hi = np.array(bx.hi, dtype=float)
        idx = candidates(0.5 * (lo + hi), 0.5 * np.linalg.norm(hi - lo))
        if idx.size == 0:
            continue
        d = dirs[idx]
        m = len(idx)
        tnear = np.full(m, -np.inf)
        tfar = np.full(m, np.inf)
        near_axis = np.zeros(m, dtype=np.int64)
        with np.errstate(divide="ignore", invalid="ignore"):
            for k in range(3):
                inv = 1.0 / d[:, k]
                t1 = (lo[k] - o[k]) * inv
                t2 = (hi[k] - o[k]) * inv
                lo_t = np.fmin(t1, t2)
                hi_t = np.fmax(t1, t2)
                later = lo_t > tnear
                tnear = np.where(later, lo_t, tnear)
                near_axis[later] = k
                tfar = np.fmin(tfar, hi_t)
        upd = (tfar >= tnear) & (tnear > 1e-9) & (tnear < t_best[idx])
        if upd.any():
            j = idx[upd]
            t_best[j] = tnear[upd]
            ax = near_axis[upd]
            rows = np.arange(len(j))
            nrm = np.zeros((len(j), 3))
            nrm[rows, ax] = -np.sign(d[upd][rows, ax])
            normal[j] = nrm
            albedo[j] = bx.albedo
            kind[j] = 2

    g = scene.ground
    if g is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (g.height - o[2]) / dirs[:, 2]
        upd = (t > 1e-9) & (t < t_best)
        if upd.any():
            t_best[upd] = t[upd]
            normal[upd] = (0.0, 0.0, 1.0 if o[2] > g.height else -1.0)
            kind[upd] = 3
    return t_best, normal, albedo, kind


def shade(scene: SceneSpec, origin, dirs, t, normal, albedo, kind, lod_angle: float | None = None) -> np.ndarray:
    """Linear RGB in [0, 1] for the given hits."""
    lod = scene.lod_angle if lod_angle is None else lod_angle
    rgb = albedo.copy()
    hit = kind > 0
    if not hit.any():
        return rgb
    p = origin + dirs[hit] * t[hit, None]
    nrm = normal[hit]
    cos_inc = np.abs(np.sum(nrm * dirs[hit], axis=1))
    footprint = t[hit] * lod / np.maximum(cos_inc, 0.08)
    alb = albedo[hit].copy()

    g = scene.ground
    gmask = kind[hit] == 3
    if g is not None and gmask.any():
        pg = p[gmask]
        x, y = pg[:, 0] / g.cell, pg[:, 1] / g.cell
        parity = (np.floor(x) + np.floor(y)).astype(np.int64) % 2
        ex = np.abs(x - np.round(x))
        ey = np.abs(y - np.round(y))
        edge = np.minimum(ex, ey) * g.cell
        m = _smoothstep(edge / np.maximum(2.0 * footprint[gmask], 0.01 * g.cell))
        a1 = np.array(g.albedo1)
        a2 = np.array(g.albedo2)
        base = np.where(parity[:, None] == 0, a1, a2)
        avg = 0.5 * (a1 + a2)
        alb[gmask] = avg + m[:, None] * (base - avg)

    tex = np.full(len(p), 0.5)
    for cell, weight in ((scene.texture_cell, 0.62), (scene.texture_cell * 0.43, 0.38)):
        fade = np.exp(-((2.0 * footprint / cell) ** 2))
        tex += weight * fade * (value_noise(p, cell, scene.seed) - 0.5) * 1.6
    light = 0.55 + 0.45 * np.clip(nrm @ LIGHT_DIR, 0.0, 1.0)
    rgb[hit] = np.clip(alb * (tex * light)[:, None], 0.0, 1.0)
    return rgb


def raycast_bearings(scene: SceneSpec, pose: Pose, bearings: np.ndarray, lod_angle: float | None = None):
    """Render camera-frame bearings (N, 3) from ``pose``; returns (rgb (N,3) in [0,1], range (N,), inf on miss)."""
    dirs = np.asarray(bearings, dtype=float) @ pose.R  # camera -> world
    o = pose.center
    t, nrm, alb, kind = intersect(scene, o, dirs)
    rgb = shade(scene, o, dirs, t, nrm, alb, kind, lod_angle)
    return rgb, t


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def raycast_scene(scene: SceneSpec, pose: Pose, intr: Intrinsics, lod_angle: float | None = None):
    """Equirectangular color panorama (H, W, 3) uint8 and range map (H, W) float, 0 where invalid."""
    b = pixel_grid_bearings(intr).reshape(-1, 3)
    rgb, t = raycast_bearings(scene, pose, b, lod_angle)
    depth = np.where(np.isfinite(t), t, 0.0).reshape(intr.height, intr.width)
    return to_uint8(rgb).reshape(intr.height, intr.width, 3), depth


# ---------------------------------------------------------------------------
# cubemap


def face_bearings(face: str, size: int) -> np.ndarray:
    """Camera-frame unit bearings (F, F, 3) of a 90-degree pinhole face."""
    fwd, right, down = (np.array(a, dtype=float) for a in FACE_AXES[face])
    c = (np.arange(size) + 0.5 - size / 2.0) / (size / 2.0)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    d = fwd + xx[..., None] * right + yy[..., None] * down
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def render_cubemap(scene: SceneSpec, pose: Pose, size: int, lod_angle: float | None = None) -> dict[str, np.ndarray]:
    faces = {}
    for name in FACE_ORDER:
        b = face_bearings(name, size).reshape(-1, 3)
        rgb, _ = raycast_bearings(scene, pose, b, lod_angle)
        faces[name] = to_uint8(rgb).reshape(size, size, 3)
    return faces


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros(x.shape, int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros(y.shape, int)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    im = img.astype(float)
    return (
        im[y0, x0] * (1 - fx) * (1 - fy)
        + im[y0, x1] * fx * (1 - fy)
        + im[y1, x0] * (1 - fx) * fy
        + im[y1, x1] * fx * fy
    )


def face_index(bearings: np.ndarray) -> np.ndarray:
    """Index into FACE_ORDER of the face owning each bearing (largest axis component)."""
    axes = np.array([FACE_AXES[n][0] for n in FACE_ORDER], dtype=float)
    scores = bearings @ axes.T
    # argmax picks the first maximum, which realizes the fixed tie priority
    return np.argmax(scores, axis=-1)


def stitch_cubemap(faces: dict[str, np.ndarray], out_size: tuple[int, int]) -> np.ndarray:
    """Resample six 90-degree faces into an equirectangular panorama of size (W, H)."""
    missing = [n for n in FACE_ORDER if n not in faces]
    if missing:
        raise SceneError(f"missing cubemap faces: {missing}")
    shapes = {np.asarray(faces[n]).shape for n in FACE_ORDER}
    if len(shapes) != 1:
        raise SceneError(f"cubemap faces have mismatched shapes: {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) != 3 or shape[0] != shape[1] or shape[2] != 3:
        raise SceneError(f"faces must be square RGB images, got {shape}")
    size = shape[0]
    W, H = out_size
    intr = make_intrinsics(W, H)
    b = pixel_grid_bearings(intr)
    idx = face_index(b)
    out = np.zeros((H, W, 3))
    for k, name in enumerate(FACE_ORDER):
        m = idx == k
        if not m.any():
            continue
        fwd, right, down = (np.array(a, dtype=float) for a in FACE_AXES[name])
        bb = b[m]
        z = bb @ fwd
        x = (bb @ right) / z * (size / 2.0) + size / 2.0 - 0.5
        y = (bb @ down) / z * (size / 2.0) + size / 2.0 - 0.5
        out[m] = _bilinear(np.asarray(faces[name]), x, y)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# scene files


def _fmt(vals) -> str:
    return " ".join(f"{float(v):.17g}" for v in vals)


def scene_to_text(scene: SceneSpec) -> str:
    tr = scene.trajectory
    lines = [
        "# panoslam scene",
        f"seed {scene.seed}",
        f"texture {_fmt([scene.texture_cell, scene.lod_angle])}",
        f"trajectory {_fmt([tr.radius, tr.height])} {tr.frames} {_fmt([tr.step, tr.dt])}",
    ]
    for s in scene.spheres:
        lines.append(f"sphere {_fmt([*s.center, s.radius, *s.albedo])}")
    for b in scene.boxes:
        lines.append(f"box {_fmt([*b.lo, *b.hi, *b.albedo])}")
    if scene.ground is not None:
        g = scene.ground
        lines.append(f"ground {_fmt([g.height, g.cell, *g.albedo1, *g.albedo2])}")
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> SceneSpec:
    spheres, boxes = [], []
    ground = None
    seed = 0
    traj = CircleTrajectory()
    texture_cell, lod = 0.22, 2.0 * np.pi / 1024
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        try:
            vals = [float(x) for x in rest]
        except ValueError as exc:
            raise SceneError(f"line {lineno}: non-numeric value") from exc
        expected = {"seed": 1, "texture": 2, "trajectory": 5, "sphere": 7, "box": 9, "ground": 8}
        if key not in expected:
            raise SceneError(f"line {lineno}: unknown entry {key!r}")
        if len(vals) != expected[key]:
            raise SceneError(f"line {lineno}: {key} expects {expected[key]} values, got {len(vals)}")
        if key == "seed":
            seed = int(vals[0])
        elif key == "texture":
            texture_cell, lod = vals
        elif key == "trajectory":
            traj = CircleTrajectory(vals[0], vals[1], int(vals[2]), vals[3], vals[4])
        elif key == "sphere":
            spheres.append(Sphere(tuple(vals[:3]), vals[3], tuple(vals[4:])))
        elif key == "box":
            boxes.append(Box(tuple(vals[:3]), tuple(vals[3:6]), tuple(vals[6:])))
        elif key == "ground":
            ground = Ground(vals[0], vals[1], tuple(vals[2:5]), tuple(vals[5:8]))
    return SceneSpec(tuple(spheres), tuple(boxes), ground, traj, seed, texture_cell, lod)


def load_scene(path) -> SceneSpec:
    with open(path, encoding="utf-8") as fh:
        return scene_from_text(fh.read())


# ---------------------------------------------------------------------------
# dataset trees


def ground_truth_trajectory(scene: SceneSpec) -> Trajectory:
    poses = scene.trajectory.poses()
    return Trajectory(
        scene.trajectory.timestamps(),
        np.array([p.center for p in poses]).reshape(-1, 3),
        np.array([p.quat_camera_in_world() for p in poses]).reshape(-1, 4),
    )


def generate_dataset(scene: SceneSpec, out_dir, size: tuple[int, int] = (1024, 512)) -> None:
    """Render every trajectory frame into ``out_dir`` (rgb/, depth/, gt_traj.txt, calib.txt, scene.txt)."""
    if scene.trajectory.frames <= 0:
        raise SceneError("the trajectory must contain at least one frame")
    scene.validate()
    intr = make_intrinsics(*size)
    rgb_dir = os.path.join(out_dir, "rgb")
    depth_dir = os.path.join(out_dir, "depth")
    for d in (rgb_dir, depth_dir):
        if os.path.isdir(d):
            shutil.rmtree(d)
        os.makedirs(d)
    for i, pose in enumerate(scene.trajectory.poses()):
        img, depth = raycast_scene(scene, pose, intr)
        write_ppm(os.path.join(rgb_dir, f"{i:06d}.ppm"), img)
        write_pfm(os.path.join(depth_dir, f"{i:06d}.pfm"), depth)
        if (i + 1) % 20 == 0:
            log.info("rendered %d/%d frames", i + 1, scene.trajectory.frames)
    write_trajectory(os.path.join(out_dir, "gt_traj.txt"), ground_truth_trajectory(scene))
    write_calib(os.path.join(out_dir, "calib.txt"), intr.width, intr.height)
    with open(os.path.join(out_dir, "scene.txt"), "w", encoding="utf-8") as fh:
        fh.write(scene_to_text(scene))


def bearing_at(intr: Intrinsics, u: float, v: float) -> np.ndarray:
    return bearing_from_pixel(intr, np.array([u, v], dtype=float))
