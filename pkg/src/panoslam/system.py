"""Monocular panoramic SLAM driver: tracking plus local mapping.

Two modes are supported. ``tri`` builds the map from triangulation only and
starts with a two-frame bootstrap whose scale is arbitrary (median map range
1). ``dc`` additionally completes a dense range map for every keyframe from
the projected map points and optional metric anchor samples; those ranges
seed the initial map, spawn new points at keyframes and constrain local
bundle adjustment, which makes the scale observable.
"""

from __future__ import annotations

import glob
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation, Slerp

from .camera import Intrinsics, bearing_from_pixel, make_intrinsics, unproject
from .config import Settings
from .densify import DensifyConfig, complete_depth
from .features import Features, detect_and_describe, match
from .fileio import FormatError, Trajectory, frame_paths, read_calib, read_pfm, read_ppm, read_trajectory
from .geometry import Pose
from .mapping import KeyFrame, Map, cull, create_map_points, fuse_duplicates, local_bundle_adjust, sample_color
from .sparse_depth import DepthMap, render_sparse_depth
from .tracking import (
    InsufficientCorrespondences,
    PoseDivergence,
    Status,
    TrackState,
    decide_keyframe,
    estimate_pose,
    predict_pose,
    search_by_projection,
)
from .two_view import ACCEPTED, check_parallax, estimate_relative_pose, triangulate_batch

log = logging.getLogger(__name__)

MODES = ("tri", "dc")


class SlamError(RuntimeError):
    pass


class TrackingLost(SlamError):
    def __init__(self, frame_index: int, inliers: int):
        super().__init__(f"tracking lost at frame {frame_index} ({inliers} inliers)")
        self.frame_index = frame_index
        self.inliers = inliers


# ---------------------------------------------------------------------------
# input


@dataclass
class Sequence:
    root: str
    intr: Intrinsics
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamps)

    def image(self, i: int) -> np.ndarray:
        return read_ppm(frame_paths(self.root, i)[0])

    def depth(self, i: int) -> np.ndarray | None:
        path = frame_paths(self.root, i)[1]
        return read_pfm(path).astype(float) if os.path.exists(path) else None


def load_sequence(root) -> Sequence:
    """Open a dataset directory; frame timestamps come from ``gt_traj.txt`` when present."""
    calib = os.path.join(root, "calib.txt")
    if not os.path.exists(calib):
        raise FormatError(f"{root}: missing calib.txt")
    w, h = read_calib(calib)
    intr = make_intrinsics(w, h)
    n = len(glob.glob(os.path.join(root, "rgb", "*.ppm")))
    if n == 0:
        raise FormatError(f"{root}: no frames under rgb/")
    for i in range(n):
        if not os.path.exists(frame_paths(root, i)[0]):
            raise FormatError(f"{root}: frame {i} missing")
    gt_path = os.path.join(root, "gt_traj.txt")
    if os.path.exists(gt_path):
        ts = read_trajectory(gt_path).timestamps[:n]
        if len(ts) < n:
            raise FormatError(f"{gt_path}: fewer timestamps than frames")
    else:
        ts = np.arange(n, dtype=float)
    return Sequence(str(root), intr, np.asarray(ts, dtype=float))


@dataclass
class Frame:
    index: int
    timestamp: float
    image: np.ndarray
    features: Features
    bearings: np.ndarray
    gt_depth: np.ndarray | None = None


# ---------------------------------------------------------------------------
# results


@dataclass
class FrameRecord:
    reference_kf: int
    relative: Pose  # camera pose relative to the reference keyframe


@dataclass
class RunResult:
    trajectory: Trajectory
    keyframes: int
    map_points: int
    lost_at: int | None
    sparse_counts: dict
    tracked_inliers: dict
    seconds: float
    keyframe_trajectory: Trajectory = None
    stats: dict = field(default_factory=dict)


def _interpolate(T0: Pose, T1: Pose, alpha: float) -> Pose:
    rots = Rotation.from_matrix(np.stack([T0.R.T, T1.R.T]))
    R_wc = Slerp([0.0, 1.0], rots)([alpha]).as_matrix()[0]
    c = (1 - alpha) * T0.center + alpha * T1.center
    return Pose.from_camera_in_world(R_wc, c)


class Slam:
    """Feed frames in order with :meth:`process`, then call :meth:`finish`."""

    def __init__(
        self,
        intr: Intrinsics,
        settings: Settings = Settings(),
        mode: str = "tri",
        seed: int = 0,
        threaded: bool = False,
        depth_prior: int = 0,
    ):
        if mode not in MODES:
            raise SlamError(f"unknown mode {mode!r}")
        self.intr = intr
        self.s = settings
        self.mode = mode
        self.seed = seed
        self.depth_prior = int(depth_prior)
        self.map = Map(settings.map)
        self.state = TrackState()
        self.records: dict[int, FrameRecord] = {}
        self.timestamps: dict[int, float] = {}
        self.inliers: dict[int, int] = {}
        self.sparse_counts: dict[int, int] = {}
        self.lost_at: int | None = None
        self._init_ref: Frame | None = None
        self._pending: list[Frame] = []
        self._last_kf_frame = 0
        self._last_frame_index = -1
        self._threaded = threaded
        self._queue: queue.Queue | None = None
        self._worker: threading.Thread | None = None
        self._worker_error: BaseException | None = None
        if threaded:
            self._queue = queue.Queue()
            self._worker = threading.Thread(target=self._mapping_loop, name="local-mapping", daemon=True)
            self._worker.start()

    # -- frames ----------------------------------------------------------
    def make_frame(self, index: int, timestamp: float, image: np.ndarray, gt_depth=None) -> Frame:
        feats = detect_and_describe(image, self.s.features, panoramic=True)
        bearings = bearing_from_pixel(self.intr, feats.uv) if len(feats) else np.zeros((0, 3))
        return Frame(index, float(timestamp), image, feats, bearings, gt_depth)

    def process(self, frame: Frame) -> Status:
        if self._worker_error is not None:
            raise SlamError("local mapping failed") from self._worker_error
        if self.state.status == Status.LOST:
            return Status.LOST
        if frame.index <= self._last_frame_index:
            raise SlamError("frames must arrive in increasing index order")
        self._last_frame_index = frame.index
        self.timestamps[frame.index] = frame.timestamp
        if self.state.status == Status.INITIALIZING:
            self._initialize(frame)
        else:
            try:
                self.track_frame(frame)
            except TrackingLost as exc:
                log.error("%s", exc)
                self.state.status = Status.LOST
                self.lost_at = frame.index
        return self.state.status

    # -- initialization --------------------------------------------------
    def _initialize(self, frame: Frame) -> None:
        if self.mode == "dc" and self.depth_prior > 0:
            self._initialize_from_depth(frame)
            return
        if self._init_ref is None or len(self._init_ref.features) < self.s.init.min_points:
            self._init_ref = frame
            self._pending = []
            return
        if frame.index - self._init_ref.index > self.s.init.max_frames:
            log.info("bootstrap: no usable pair within %d frames, restarting from frame %d", self.s.init.max_frames, frame.index)
            self._init_ref = frame
            self._pending = []
            return
        if self._try_bootstrap(self._init_ref, frame):
            return
        self._pending.append(frame)

    def _try_bootstrap(self, ref: Frame, cur: Frame) -> bool:
        cfg = self.s.init
        ms = match(ref.features.descriptors, cur.features.descriptors, self.s.features.match_ratio, self.s.features.max_hamming)
        if len(ms) < cfg.min_points:
            return False
        ia = np.array([m.index_a for m in ms])
        ib = np.array([m.index_b for m in ms])
        p1, p2 = ref.bearings[ia], cur.bearings[ib]
        rng = np.random.default_rng(self.seed)
        est = estimate_relative_pose(p1, p2, rng, iterations=cfg.ransac_iters, inlier_angle_deg=self.s.geom.epiplane_angle_deg)
        if est is None:
            return False
        R, t, inl = est
        if inl.sum() < cfg.min_points:
            return False
        parallax = check_parallax(p1[inl], p2[inl], R)
        if parallax < np.deg2rad(cfg.parallax_deg):
            return False
        T1, T2 = Pose.identity(), Pose(R, t)
        pts, _, _, st = triangulate_batch(p1[inl], p2[inl], T1, T2, self.s.geom, ref.features.scales[ia[inl]], cur.features.scales[ib[inl]])
        good = st == ACCEPTED
        if good.sum() < cfg.min_points:
            return False
        pts = pts[good]
        scale = 1.0 / np.median(np.linalg.norm(pts, axis=1))
        T2 = Pose(R, t * scale)
        pts = pts * scale
        log.info("bootstrap: frames %d-%d, %d points, parallax %.2f deg", ref.index, cur.index, len(pts), np.rad2deg(parallax))
        with self.map.lock:
            k0 = self._new_keyframe(ref, T1)
            k1 = self._new_keyframe(cur, T2)
            self.map.insert_keyframe(k0)
            self.map.insert_keyframe(k1)
            for a, b, P in zip(ia[inl][good], ib[inl][good], pts):
                pid = self.map.add_point(P, ref.features.descriptors[a], {k0.id: int(a), k1.id: int(b)}, k0.id, sample_color(ref.image, ref.features.uv[a]))
            self.map.update_covisibility()
            # guided matching along epipolar planes picks up what ratio matching missed
            create_map_points(self.map, k1.id, self.s.geom, neighbors=[k0.id])
        local_bundle_adjust(self.map, k1.id, "tri", window=[k0.id, k1.id])
        self._finish_init(ref, cur, k0, k1)
        return True

    def _finish_init(self, ref: Frame, cur: Frame, k0: KeyFrame, k1: KeyFrame) -> None:
        for k in (k0, k1):
            self.render_sparse(k)
        self.records[ref.index] = FrameRecord(k0.id, Pose.identity())
        self.records[cur.index] = FrameRecord(k1.id, Pose.identity())
        self.inliers[ref.index] = k0.n_points
        self.inliers[cur.index] = k1.n_points
        # frames between the bootstrap pair are localized against the new map
        prev = k0.pose
        span = max(cur.index - ref.index, 1)
        for f in self._pending:
            guess = _interpolate(k0.pose, k1.pose, (f.index - ref.index) / span)
            try:
                pose, n_in, _ = self._localize(f, guess, [k0.id, k1.id])
            except TrackingLost:
                continue
            self.records[f.index] = FrameRecord(k0.id, pose @ k0.pose.inverse())
            self.inliers[f.index] = n_in
            prev = pose
        self._pending = []
        self.state.pose = prev
        self.state.history = 1
        self.state.advance(k1.pose)
        self.state.status = Status.OK
        self.state.reference_kf = k1.id
        self.state.tracked = k1.n_points
        self.state.frames_since_kf = 0

    def _initialize_from_depth(self, frame: Frame) -> None:
        """Single-frame metric initialization from the completed range map (dc mode)."""
        T0 = Pose.identity()
        with self.map.lock:
            kf = self._new_keyframe(frame, T0)
            self.map.insert_keyframe(kf)
        self._complete_depth(kf, frame.gt_depth)
        n = self._spawn_points(kf, limit=None)
        if n < self.s.init.min_points:
            with self.map.lock:
                for pid in [int(p) for p in kf.point_ids if p >= 0]:
                    self.map.remove_point(pid)
                del self.map.keyframes[kf.id]
            log.info("depth initialization: only %d points at frame %d", n, frame.index)
            return
        self.render_sparse(kf)
        log.info("depth initialization: frame %d, %d points", frame.index, n)
        self.records[frame.index] = FrameRecord(kf.id, Pose.identity())
        self.inliers[frame.index] = n
        self.state.pose = T0
        self.state.history = 1
        self.state.velocity = Pose.identity()
        self.state.status = Status.OK
        self.state.reference_kf = kf.id
        self.state.tracked = n
        self.state.frames_since_kf = 0
        self._last_kf_frame = frame.index

    # -- tracking --------------------------------------------------------
    def _local_keyframes(self) -> list[int]:
        ref = self.state.reference_kf
        ids = {ref}
        ids.update(self.map.covisible(ref, self.s.map.neighbors))
        recent = sorted(self.map.keyframes)[-5:]
        ids.update(recent)
        return sorted(k for k in ids if k in self.map.keyframes)

    def _localize(self, frame: Frame, guess: Pose, kf_ids: list[int]):
        """Project local map points, match, and optimize the pose in two passes."""
        cfg = self.s.track
        with self.map.lock:
            pids = sorted({int(p) for k in kf_ids if k in self.map.keyframes for p in self.map.keyframes[k].point_ids if p >= 0})
            pos, desc = self.map.point_arrays(pids)
        if len(pids) == 0 or len(frame.features) == 0:
            raise TrackingLost(frame.index, 0)
        tree = cKDTree(frame.bearings)
        pose = guess
        matched = None
        for radius in (cfg.search_deg, cfg.refine_search_deg):
            pi, ki = search_by_projection(pose, pos, desc, frame.bearings, frame.features.descriptors, radius, cfg.match_max_hamming, tree)
            if len(pi) < cfg.min_inliers and radius == cfg.search_deg:
                # prediction may be poor: retry with a wider gate
                pi, ki = search_by_projection(pose, pos, desc, frame.bearings, frame.features.descriptors, 4 * radius, cfg.match_max_hamming, tree)
            if len(pi) < 6:
                if matched is None:
                    raise TrackingLost(frame.index, len(pi))
                break
            try:
                new_pose, inl, _ = estimate_pose(pos[pi], frame.bearings[ki], pose, cfg)
            except (InsufficientCorrespondences, PoseDivergence):
                raise TrackingLost(frame.index, 0)
            pose = new_pose
            matched = (np.asarray(pids)[pi[inl]], ki[inl])
        if matched is None or len(matched[0]) < cfg.min_inliers:
            raise TrackingLost(frame.index, 0 if matched is None else len(matched[0]))
        return pose, len(matched[0]), (matched, pids)

    def track_frame(self, frame: Frame) -> None:
        """Estimate the pose of a frame against the local map and decide on a keyframe."""
        guess = predict_pose(self.state)
        local = self._local_keyframes()
        pose, n_in, (matched, local_pids) = self._localize(frame, guess, local)
        matched_pids, matched_kps = matched
        with self.map.lock:
            for pid in local_pids:
                mp = self.map.points.get(pid)
                if mp is not None:
                    mp.visible += 1
            for pid in matched_pids:
                mp = self.map.points.get(int(pid))
                if mp is not None:
                    mp.found += 1
            ref = self.map.keyframes[self.state.reference_kf]
            ref_pose = ref.pose
            ref_tracked = ref.n_points
        self.state.advance(pose)
        self.state.tracked = n_in
        self.state.frames_since_kf += 1
        self.records[frame.index] = FrameRecord(self.state.reference_kf, pose @ ref_pose.inverse())
        self.inliers[frame.index] = n_in
        if decide_keyframe(self.state, ref_tracked, self.s.track):
            point_ids = np.full(len(frame.features), -1, dtype=np.int64)
            point_ids[matched_kps] = matched_pids
            kf = self._new_keyframe(frame, pose, point_ids)
            with self.map.lock:
                self.map.insert_keyframe(kf)
            self.state.reference_kf = kf.id
            self.state.frames_since_kf = 0
            self.records[frame.index] = FrameRecord(kf.id, Pose.identity())
            if self._threaded:
                while self._queue.qsize() > 1:
                    time.sleep(0.005)
                self._queue.put((kf.id, frame.gt_depth))
            else:
                self.process_keyframe(kf.id, frame.gt_depth)

    # -- keyframes and mapping -------------------------------------------
    def _new_keyframe(self, frame: Frame, pose: Pose, point_ids=None) -> KeyFrame:
        kid = self.map.next_keyframe_id()
        return KeyFrame(kid, frame.index, frame.timestamp, pose, frame.features, frame.bearings, point_ids, frame.image)

    def render_sparse(self, kf: KeyFrame) -> DepthMap:
        with self.map.lock:
            ids = sorted(self.map.points)
            pos, _ = self.map.point_arrays(ids)
            pose = kf.pose
        dm = render_sparse_depth(pos, pose, self.intr, ids)
        kf.sparse_depth = dm
        self.sparse_counts[kf.id] = dm.count()
        return dm

    def _anchors(self, kf: KeyFrame, gt_depth):
        if gt_depth is None or self.depth_prior <= 0:
            return None
        rng = np.random.default_rng([self.seed, kf.id])
        rows, cols = np.nonzero(np.isfinite(gt_depth) & (gt_depth > 0))
        if len(rows) == 0:
            return None
        pick = rng.choice(len(rows), size=min(self.depth_prior, len(rows)), replace=False)
        pick.sort()
        return rows[pick], cols[pick], gt_depth[rows[pick], cols[pick]]

    def _complete_depth(self, kf: KeyFrame, gt_depth) -> None:
        """Dense range for a keyframe from projected map points plus anchors; sampled at keypoints."""
        k = self.s.dc.work_scale
        h, w = self.intr.height // k, self.intr.width // k
        small = make_intrinsics(w, h)
        with self.map.lock:
            ids = sorted(self.map.points)
            pos, _ = self.map.point_arrays(ids)
            pose = kf.pose
        sparse = render_sparse_depth(pos, pose, small, ids)
        anchors = self._anchors(kf, gt_depth)
        if anchors is not None:
            r, c, v = anchors
            anchors = (r // k, c // k, v)
        if sparse.count() == 0 and anchors is None:
            kf.keypoint_range = np.full(len(kf.features), np.nan)
            return
        rgb = kf.image[::k, ::k] if kf.image is not None else np.zeros((h, w, 3))
        dense, _ = complete_depth(sparse, rgb, self.s.densify, anchors=anchors)
        d = dense.values
        uv = kf.features.uv / k
        u = np.mod(np.rint(uv[:, 0]).astype(int), w)
        v = np.clip(np.rint(uv[:, 1]).astype(int), 0, h - 1)
        vals = d[v, u]
        # reject samples straddling a range discontinuity
        nb = np.stack([d[np.clip(v + dv, 0, h - 1), np.mod(u + du, w)] for dv in (-1, 0, 1) for du in (-1, 0, 1)])
        spread = (nb.max(axis=0) - nb.min(axis=0)) / np.maximum(vals, 1e-9)
        ok = np.isfinite(vals) & (vals > 0) & (spread <= self.s.dc.edge_ratio)
        kf.keypoint_range = np.where(ok, vals, np.nan)

    def _spawn_points(self, kf: KeyFrame, limit: int | None) -> int:
        """Create points directly from completed range at unmatched keypoints."""
        if kf.keypoint_range is None:
            return 0
        free = np.flatnonzero((kf.point_ids < 0) & np.isfinite(kf.keypoint_range))
        if limit is not None and len(free) > limit:
            order = np.argsort(-kf.features.response[free], kind="stable")
            free = np.sort(free[order[:limit]])
        if len(free) == 0:
            return 0
        Xc = kf.bearings[free] * kf.keypoint_range[free, None]
        Xw = kf.pose.inverse().apply(Xc)
        with self.map.lock:
            for idx, P in zip(free, Xw):
                self.map.add_point(P, kf.features.descriptors[idx], {kf.id: int(idx)}, kf.id, sample_color(kf.image, kf.features.uv[idx]))
            self.map.update_covisibility()
        return len(free)

    def process_keyframe(self, kid: int, gt_depth=None) -> None:
        """Local mapping for a freshly inserted keyframe."""
        m = self.map
        with m.lock:
            if kid not in m.keyframes:
                return
            kf = m.keyframes[kid]
            cull(m, kid)
            create_map_points(m, kid, self.s.geom)
        if self.mode == "dc":
            self._complete_depth(kf, gt_depth)
            if self.s.dc.spawn:
                self._spawn_points(kf, self.s.dc.max_spawn)
        with m.lock:
            fuse_duplicates(m, kid)
        if len(m.covisible(kid)) >= 1:
            try:
                local_bundle_adjust(m, kid, self.mode)
            except Exception as exc:  # keep tracking even if one window fails
                log.warning("local bundle adjustment failed: %s", exc)
        self.render_sparse(kf)

    def _mapping_loop(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                self._queue.task_done()
                return
            try:
                self.process_keyframe(*item)
            except BaseException as exc:  # surfaced on the tracking thread
                self._worker_error = exc
            finally:
                self._queue.task_done()

    def finish(self) -> None:
        if self._worker is not None:
            self._queue.put(None)
            self._worker.join()
            self._worker = None
            if self._worker_error is not None:
                raise SlamError("local mapping failed") from self._worker_error

    # -- output ----------------------------------------------------------
    def frame_poses(self) -> dict[int, Pose]:
        out = {}
        with self.map.lock:
            for idx, rec in sorted(self.records.items()):
                kf = self.map.keyframes.get(rec.reference_kf)
                if kf is None:
                    continue
                out[idx] = rec.relative @ kf.pose
        return out

    def trajectory(self) -> Trajectory:
        poses = self.frame_poses()
        idx = sorted(poses)
        ts = np.array([self.timestamps[i] for i in idx])
        pos = np.array([poses[i].center for i in idx]).reshape(-1, 3)
        quat = np.array([poses[i].quat_camera_in_world() for i in idx]).reshape(-1, 4)
        return Trajectory(ts, pos, quat)

    def keyframe_trajectory(self) -> Trajectory:
        with self.map.lock:
            kfs = sorted(self.map.keyframes.values(), key=lambda k: k.frame_index)
            ts = np.array([k.timestamp for k in kfs])
            pos = np.array([k.pose.center for k in kfs]).reshape(-1, 3)
            quat = np.array([k.pose.quat_camera_in_world() for k in kfs]).reshape(-1, 4)
        return Trajectory(ts, pos, quat)


def run_sequence(
    seq: Sequence,
    mode: str = "tri",
    settings: Settings = Settings(),
    seed: int = 0,
    threaded: bool = False,
    depth_prior: int = 0,
    max_frames: int | None = None,
) -> tuple[RunResult, Slam]:
    """Run SLAM over a dataset and collect the trajectory and statistics."""
    t0 = time.perf_counter()
    slam = Slam(seq.intr, settings, mode, seed, threaded, depth_prior)
    n = len(seq) if max_frames is None else min(len(seq), max_frames)
    need_depth = mode == "dc" and depth_prior > 0
    try:
        for i in range(n):
            frame = slam.make_frame(i, seq.timestamps[i], seq.image(i), seq.depth(i) if need_depth else None)
            status = slam.process(frame)
            if status == Status.LOST:
                break
    finally:
        slam.finish()
    traj = slam.trajectory()
    res = RunResult(
        trajectory=traj,
        keyframes=len(slam.map.keyframes),
        map_points=len(slam.map.points),
        lost_at=slam.lost_at,
        sparse_counts=dict(slam.sparse_counts),
        tracked_inliers=dict(slam.inliers),
        seconds=time.perf_counter() - t0,
        keyframe_trajectory=slam.keyframe_trajectory(),
    )
    if slam.state.status == Status.INITIALIZING:
        raise SlamError("initialization never succeeded")
    return res, slam
