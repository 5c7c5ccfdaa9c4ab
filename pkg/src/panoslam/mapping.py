"""Keyframes, map points, covisibility and local map maintenance.

The map keeps a bidirectional index: each point stores ``{keyframe id:
keypoint index}`` and each keyframe stores the point id at every keypoint
slot (``-1`` when unassigned). Covisibility edges carry the exact number of
shared points and exist only at or above the configured threshold.
"""

from __future__ import annotations

import logging
import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .features import Features, hamming_matrix, hamming_pairs
from .fileio import write_ply
from .geometry import Pose, normalize, relative_pose, skew, so3_exp, tangent_basis
from .residuals import huber, log_residual_jac
from .sparse_depth import DepthMap
from .tracking import chord
from .two_view import ACCEPTED, GeometryConfig, check_parallax, essential_from_poses, epipole_angle_ok, triangulate_batch

log = logging.getLogger(__name__)


class MapError(RuntimeError):
    pass


class BundleAdjustError(MapError):
    pass


@dataclass(frozen=True)
class MapConfig:
    covis_threshold: int = 15
    neighbors: int = 10
    fuse_deg: float = 1.0
    fuse_hamming: int = 50
    match_hamming: int = 50
    match_ratio: float = 0.8
    ba_window: int = 8
    ba_iters: int = 10
    ba_huber_deg: float = 1.5
    ba_outlier_deg: float = 2.0
    depth_weight: float = 0.05
    cull_ratio: float = 0.25
    cull_grace: int = 2
    cull_min_obs_age: int = 2
    min_parallax_deg: float = 1.0


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    observations: dict = field(default_factory=dict)
    first_kf: int = 0
    color: tuple = (255, 255, 255)
    visible: int = 1
    found: int = 1

    @property
    def found_ratio(self) -> float:
        return self.found / max(self.visible, 1)


@dataclass
class KeyFrame:
    id: int
    frame_index: int
    timestamp: float
    pose: Pose
    features: Features
    bearings: np.ndarray
    point_ids: np.ndarray = None
    image: np.ndarray | None = None
    sparse_depth: DepthMap | None = None
    keypoint_range: np.ndarray | None = None
    covisibility: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.point_ids is None:
            self.point_ids = np.full(len(self.features), -1, dtype=np.int64)
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64)

    @property
    def n_points(self) -> int:
        return int(np.sum(self.point_ids >= 0))


class Map:
    """Mutable SLAM map; mutate only while holding ``lock``."""

    def __init__(self, cfg: MapConfig = MapConfig()):
        self.cfg = cfg
        self.keyframes: dict[int, KeyFrame] = {}
        self.points: dict[int, MapPoint] = {}
        self.lock = threading.RLock()
        self._next_point = 0
        self._next_kf = 0
        self._dirty: set[int] = set()

    # -- ids -------------------------------------------------------------
    def next_keyframe_id(self) -> int:
        kid = self._next_kf
        self._next_kf += 1
        return kid

    # -- keyframes -------------------------------------------------------
    def insert_keyframe(self, kf: KeyFrame) -> None:
        """Register a keyframe and the observations already in its slots."""
        if kf.id in self.keyframes:
            raise MapError(f"duplicate keyframe id {kf.id}")
        if not kf.pose.is_finite():
            raise MapError("keyframe pose is not finite")
        self._next_kf = max(self._next_kf, kf.id + 1)
        self.keyframes[kf.id] = kf
        for idx in np.flatnonzero(kf.point_ids >= 0):
            pid = int(kf.point_ids[idx])
            mp = self.points.get(pid)
            if mp is None or kf.id in mp.observations:
                kf.point_ids[idx] = -1
                continue
            mp.observations[kf.id] = int(idx)
            self._dirty.update(mp.observations)
        self._dirty.add(kf.id)
        self.update_covisibility()

    # -- points ----------------------------------------------------------
    def add_point(self, position, descriptor, observations: dict, first_kf: int, color=(255, 255, 255)) -> int:
        pid = self._next_point
        self._next_point += 1
        mp = MapPoint(pid, np.asarray(position, dtype=float).copy(), np.asarray(descriptor, dtype=np.uint8).copy(), {}, first_kf, tuple(int(c) for c in color))
        self.points[pid] = mp
        for kid, idx in observations.items():
            self.add_observation(pid, kid, idx)
        return pid

    def add_observation(self, pid: int, kid: int, idx: int) -> None:
        mp = self.points[pid]
        kf = self.keyframes[kid]
        if kid in mp.observations:
            raise MapError(f"point {pid} already observed in keyframe {kid}")
        if kf.point_ids[idx] >= 0:
            raise MapError(f"keyframe {kid} slot {idx} already holds point {kf.point_ids[idx]}")
        mp.observations[kid] = int(idx)
        kf.point_ids[idx] = pid
        self._dirty.update(mp.observations)

    def erase_observation(self, pid: int, kid: int) -> None:
        mp = self.points[pid]
        idx = mp.observations.pop(kid)
        self.keyframes[kid].point_ids[idx] = -1
        self._dirty.add(kid)
        self._dirty.update(mp.observations)
        if not mp.observations:
            del self.points[pid]

    def remove_point(self, pid: int) -> None:
        mp = self.points.pop(pid)
        for kid, idx in mp.observations.items():
            self.keyframes[kid].point_ids[idx] = -1
            self._dirty.add(kid)

    def merge_points(self, a: int, b: int) -> int:
        """Fuse two points; the one with more observations survives (ties: smaller id)."""
        pa, pb = self.points[a], self.points[b]
        keep, drop = (pa, pb) if (len(pa.observations), -pa.id) >= (len(pb.observations), -pb.id) else (pb, pa)
        del self.points[drop.id]
        for kid, idx in drop.observations.items():
            kf = self.keyframes[kid]
            self._dirty.add(kid)
            if kid in keep.observations:
                kf.point_ids[idx] = -1
            else:
                kf.point_ids[idx] = keep.id
                keep.observations[kid] = idx
        keep.visible += drop.visible
        keep.found += drop.found
        self._dirty.update(keep.observations)
        self.update_descriptor(keep.id)
        return keep.id

    def update_descriptor(self, pid: int) -> None:
        """Representative descriptor: the observation descriptor with least total distance to the others."""
        mp = self.points[pid]
        descs = np.array([self.keyframes[k].features.descriptors[i] for k, i in sorted(mp.observations.items())])
        if len(descs) == 0:
            return
        if len(descs) <= 2:
            mp.descriptor = descs[0].copy()
            return
        D = hamming_matrix(descs, descs)
        mp.descriptor = descs[int(np.argmin(D.sum(axis=1)))].copy()

    def point_arrays(self, ids):
        ids = list(ids)
        if not ids:
            return np.zeros((0, 3)), np.zeros((0, 32), np.uint8)
        pos = np.array([self.points[i].position for i in ids])
        desc = np.array([self.points[i].descriptor for i in ids])
        return pos, desc

    # -- covisibility ----------------------------------------------------
    def shared_counts(self, kid: int) -> Counter:
        kf = self.keyframes[kid]
        counts: Counter = Counter()
        for pid in kf.point_ids[kf.point_ids >= 0]:
            for other in self.points[int(pid)].observations:
                if other != kid:
                    counts[other] += 1
        return counts

    def update_covisibility(self) -> None:
        """Recount edges for every keyframe touched since the last update."""
        th = self.cfg.covis_threshold
        dirty, self._dirty = self._dirty, set()
        for kid in sorted(dirty):
            kf = self.keyframes.get(kid)
            if kf is None:
                continue
            counts = self.shared_counts(kid)
            for other in list(kf.covisibility):
                if counts.get(other, 0) < th:
                    del kf.covisibility[other]
                    self.keyframes[other].covisibility.pop(kid, None)
            for other, w in counts.items():
                if w >= th:
                    kf.covisibility[other] = w
                    self.keyframes[other].covisibility[kid] = w

    def covisible(self, kid: int, n: int | None = None) -> list[int]:
        """Neighbors by decreasing shared-point count (ties: smaller id)."""
        items = sorted(self.keyframes[kid].covisibility.items(), key=lambda kv: (-kv[1], kv[0]))
        ids = [k for k, _ in items]
        return ids if n is None else ids[:n]

    # -- consistency -----------------------------------------------------
    def audit(self) -> list[str]:
        """Full bidirectional-index and covisibility check; returns problems found."""
        problems = []
        for pid, mp in self.points.items():
            if not mp.observations:
                problems.append(f"point {pid} has no observations")
            if not np.all(np.isfinite(mp.position)):
                problems.append(f"point {pid} has a non-finite position")
            for kid, idx in mp.observations.items():
                kf = self.keyframes.get(kid)
                if kf is None:
                    problems.append(f"point {pid} observed in missing keyframe {kid}")
                elif kf.point_ids[idx] != pid:
                    problems.append(f"point {pid} -> ({kid}, {idx}) not mirrored")
        for kid, kf in self.keyframes.items():
            for idx in np.flatnonzero(kf.point_ids >= 0):
                pid = int(kf.point_ids[idx])
                mp = self.points.get(pid)
                if mp is None or mp.observations.get(kid) != idx:
                    problems.append(f"keyframe {kid} slot {idx} -> point {pid} not mirrored")
            counts = self.shared_counts(kid)
            expected = {k: w for k, w in counts.items() if w >= self.cfg.covis_threshold}
            if expected != kf.covisibility:
                problems.append(f"keyframe {kid} covisibility differs from recount")
        return problems

    def export_ply(self, path) -> int:
        ids = sorted(self.points)
        pos = np.array([self.points[i].position for i in ids]).reshape(-1, 3)
        col = np.array([self.points[i].color for i in ids], dtype=np.uint8).reshape(-1, 3)
        write_ply(path, pos, col)
        return len(ids)


def sample_color(image, uv) -> tuple:
    if image is None:
        return (255, 255, 255)
    h, w = image.shape[:2]
    u = int(np.rint(uv[0])) % w
    v = min(max(int(np.rint(uv[1])), 0), h - 1)
    return tuple(int(c) for c in image[v, u])


# ---------------------------------------------------------------------------
# new points


def create_map_points(m: Map, kid: int, geom: GeometryConfig = GeometryConfig(), neighbors: list[int] | None = None) -> int:
    """Triangulate unmatched features of keyframe ``kid`` against its best covisible neighbors."""
    cfg = m.cfg
    kf = m.keyframes[kid]
    if neighbors is None:
        neighbors = m.covisible(kid, cfg.neighbors)
    created = 0
    eplane_sin = np.sin(np.deg2rad(geom.epiplane_angle_deg))
    min_parallax = np.deg2rad(geom.parallax_deg)
    for nid in neighbors:
        nb = m.keyframes[nid]
        T1, T2 = nb.pose, kf.pose
        T12 = relative_pose(T1, T2)
        if np.linalg.norm(T12.t) < 1e-9:
            continue
        shared = np.intersect1d(nb.point_ids[nb.point_ids >= 0], kf.point_ids[kf.point_ids >= 0])
        if len(shared):
            i1 = np.array([m.points[int(p)].observations[nid] for p in shared])
            i2 = np.array([m.points[int(p)].observations[kid] for p in shared])
            if check_parallax(nb.bearings[i1], kf.bearings[i2], T12.R) < min_parallax:
                continue
        free1 = np.flatnonzero(nb.point_ids < 0)
        free2 = np.flatnonzero(kf.point_ids < 0)
        if len(free1) == 0 or len(free2) == 0:
            continue
        p1 = nb.bearings[free1]
        p2 = kf.bearings[free2]
        E = essential_from_poses(T1, T2)
        planes = p2 @ E.e  # (N2, 3) epipolar plane normals in view 1
        pn = np.linalg.norm(planes, axis=1)
        sines = np.abs(planes @ p1.T) / np.maximum(pn[:, None], 1e-300)  # (N2, N1)
        sc1 = nb.features.scales[free1]
        sc2 = kf.features.scales[free2]
        gate = sines <= eplane_sin * np.maximum(sc2[:, None], sc1[None, :])
        e1 = normalize(-T12.R.T @ T12.t)
        e2 = normalize(T12.t)
        ok1 = epipole_angle_ok(p1, e1, geom.epipole_angle_deg)
        ok2 = epipole_angle_ok(p2, e2, geom.epipole_angle_deg)
        gate &= ok2[:, None] & ok1[None, :]
        D = hamming_matrix(kf.features.descriptors[free2], nb.features.descriptors[free1]).astype(float)
        D[~gate] = np.inf
        D[D > cfg.match_hamming] = np.inf
        best = np.argmin(D, axis=1)
        d1 = D[np.arange(len(D)), best]
        if D.shape[1] > 1:
            d2 = np.partition(D, 1, axis=1)[:, 1]
        else:
            d2 = np.full(len(D), np.inf)
        back = np.argmin(D, axis=0)
        sel = np.isfinite(d1) & (d1 < cfg.match_ratio * d2) & (back[best] == np.arange(len(D)))
        j2 = free2[sel]
        j1 = free1[best[sel]]
        if len(j1) == 0:
            continue
        pts, _, _, status = triangulate_batch(
            nb.bearings[j1], kf.bearings[j2], T1, T2, geom,
            nb.features.scales[j1], kf.features.scales[j2],
        )
        c1 = T1.inverse().t
        c2 = T2.inverse().t
        with np.errstate(invalid="ignore"):
            cos_par = np.sum(normalize(pts - c1) * normalize(pts - c2), axis=1)
        low_parallax = ~(cos_par <= np.cos(np.deg2rad(cfg.min_parallax_deg)))
        for a, b, P, st, low in zip(j1, j2, pts, status, low_parallax):
            if st != ACCEPTED or low or nb.point_ids[a] >= 0 or kf.point_ids[b] >= 0:
                continue
            col = sample_color(kf.image, kf.features.uv[b])
            pid = m.add_point(P, kf.features.descriptors[b], {nid: int(a), kid: int(b)}, kid, col)
            m.update_descriptor(pid)
            created += 1
    m.update_covisibility()
    return created


def fuse_duplicates(m: Map, kid: int, targets: list[int] | None = None) -> int:
    """Project the keyframe's points into neighbors and merge near-coincident duplicates.

    A projected point lands on a neighbor keypoint when the angle is within
    the fusion threshold and the descriptors are close enough. An empty slot
    gains the observation; a slot owned by another point triggers a merge.
    Returns the number of merges.
    """
    cfg = m.cfg
    radius = chord(np.deg2rad(cfg.fuse_deg))
    fused = 0
    if targets is None:
        targets = m.covisible(kid, cfg.neighbors)
    for nid in targets:
        if kid not in m.keyframes or nid not in m.keyframes:
            continue
        kf = m.keyframes[kid]
        nb = m.keyframes[nid]
        pids = [int(p) for p in kf.point_ids[kf.point_ids >= 0]]
        if not pids or len(nb.bearings) == 0:
            continue
        pos, desc = m.point_arrays(pids)
        pred = normalize(nb.pose.apply(pos))
        tree = cKDTree(nb.bearings)
        cands = tree.query_ball_point(pred, radius)
        for pid, d, b, cand in zip(pids, desc, pred, cands):
            if not cand or pid not in m.points:
                continue
            mp = m.points[pid]
            if nid in mp.observations:
                continue
            cand = np.asarray(sorted(cand))
            dist = hamming_pairs(np.broadcast_to(mp.descriptor, (len(cand), 32)), nb.features.descriptors[cand])
            ang = np.linalg.norm(nb.bearings[cand] - b, axis=1)
            order = np.lexsort((cand, ang, dist))
            j = int(cand[order[0]])
            if dist[order[0]] > cfg.fuse_hamming:
                continue
            owner = int(nb.point_ids[j])
            if owner < 0:
                m.add_observation(pid, nid, j)
                m.update_descriptor(pid)
            elif owner != pid:
                m.merge_points(pid, owner)
                fused += 1
    m.update_covisibility()
    return fused


def cull(m: Map, current_kf: int) -> tuple[int, int]:
    """Drop unreliable points. Returns (removed for low found ratio, removed for few observations)."""
    cfg = m.cfg
    low_ratio = few_obs = 0
    for pid in sorted(m.points):
        mp = m.points[pid]
        age = current_kf - mp.first_kf
        if age >= cfg.cull_grace and mp.found_ratio < cfg.cull_ratio:
            m.remove_point(pid)
            low_ratio += 1
        elif age > cfg.cull_min_obs_age and len(mp.observations) < 2:
            m.remove_point(pid)
            few_obs += 1
    m.update_covisibility()
    return low_ratio, few_obs


# ---------------------------------------------------------------------------
# local bundle adjustment


@dataclass
class BAResult:
    cost_before: float
    cost_after: float
    iterations: int
    converged: bool
    window: list
    costs: list


class _Problem:
    """Observations of a BA window gathered into flat arrays."""

    def __init__(self, m: Map, window: list[int], mode: str, cfg: MapConfig):
        self.window = window
        pids = sorted({int(p) for k in window for p in m.keyframes[k].point_ids if p >= 0})
        self.pids = pids
        pindex = {p: i for i, p in enumerate(pids)}
        cams = list(window)
        fixed_extra = sorted({k for p in pids for k in m.points[p].observations} - set(window))
        cams += fixed_extra
        self.cams = cams
        cindex = {k: i for i, k in enumerate(cams)}
        self.R = np.array([m.keyframes[k].pose.R for k in cams])
        self.c = np.array([m.keyframes[k].pose.center for k in cams])
        self.P = np.array([m.points[p].position for p in pids]).reshape(-1, 3)
        oldest = min(window)
        self.free = [cindex[k] for k in sorted(window) if k != oldest]
        self.anchor = cindex[oldest]
        self.baseline_cam = None
        if mode == "tri" and self.free:
            self.baseline_cam = self.free[0]
        op, oc, ob, osc, okf, oidx, depth = [], [], [], [], [], [], []
        for p in pids:
            for k, idx in m.points[p].observations.items():
                kf = m.keyframes[k]
                op.append(pindex[p])
                oc.append(cindex[k])
                ob.append(kf.bearings[idx])
                osc.append(kf.features.scales[idx])
                okf.append(k)
                oidx.append(idx)
                d = np.nan
                if mode == "dc" and kf.keypoint_range is not None:
                    d = kf.keypoint_range[idx]
                depth.append(d)
        self.op = np.asarray(op, dtype=int)
        self.oc = np.asarray(oc, dtype=int)
        self.ob = np.asarray(ob, dtype=float).reshape(-1, 3)
        self.osc = np.asarray(osc, dtype=float)
        self.okf = np.asarray(okf, dtype=int)
        self.oidx = np.asarray(oidx, dtype=int)
        self.B = tangent_basis(self.ob)
        d = np.asarray(depth, dtype=float)
        self.has_depth = np.isfinite(d) & (d > 0)
        self.depth = np.where(self.has_depth, d, 1.0)
        self.delta = np.deg2rad(cfg.ba_huber_deg)
        self.w_depth = cfg.depth_weight

    def transformed(self, R, c, P):
        return np.einsum("nij,nj->ni", R[self.oc], P[self.op] - c[self.oc])

    def cost(self, R, c, P, jac=False):
        x = self.transformed(R, c, P)
        r, Jx = log_residual_jac(x, self.ob, self.B, jacobian=jac)
        inv_s = 1.0 / self.osc
        r = r * inv_s[:, None]
        rc, rw = huber(np.sum(r * r, axis=1), self.delta)
        nx = np.linalg.norm(x, axis=1)
        rd = self.w_depth * (nx - self.depth) / self.depth
        dc, dw = huber(rd * rd, self.delta)
        dc = np.where(self.has_depth, dc, 0.0)
        dw = np.where(self.has_depth, dw, 0.0)
        total = float(np.sum(rc) + np.sum(dc))
        if not jac:
            return total
        Jx = Jx * inv_s[:, None, None]
        Jd = (self.w_depth / self.depth / np.maximum(nx, 1e-300))[:, None] * x  # (N, 3)
        return total, x, r, rw, Jx, rd, dw, Jd


def _window(m: Map, center: int, size: int) -> list[int]:
    return [center] + m.covisible(center, size - 1)


def local_bundle_adjust(m: Map, center: int, mode: str = "tri", window: list[int] | None = None) -> BAResult:
    """Refine window keyframe poses and their points by LM with a Schur complement.

    The oldest window keyframe is fixed; keyframes outside the window that
    observe window points contribute residuals with fixed poses. In ``tri``
    mode the distance between the two oldest window keyframes is also held
    fixed so the map scale cannot drift inside the optimization. In ``dc``
    mode per-keypoint range priors add a relative range residual.
    """
    cfg = m.cfg
    with m.lock:
        if window is None:
            window = _window(m, center, cfg.ba_window)
        window = sorted(set(window))
        if len(window) < 2:
            raise BundleAdjustError("bundle adjustment needs at least two keyframes")
        prob = _Problem(m, window, mode, cfg)
    if len(prob.pids) == 0:
        return BAResult(0.0, 0.0, 0, True, window, [0.0])

    R, c, P = prob.R.copy(), prob.c.copy(), prob.P.copy()
    free = prob.free
    nf = len(free)
    fidx = {ci: i for i, ci in enumerate(free)}
    # reduction from 6 parameters per free camera to the constrained set
    cols = []
    Q_blocks = []
    for ci in free:
        if ci == prob.baseline_cam:
            base = c[ci] - c[prob.anchor]
            L = np.linalg.norm(base)
            if L > 1e-12:
                U = tangent_basis(base / L)  # (2, 3)
                Qb = np.zeros((6, 5))
                Qb[:3, :2] = U.T
                Qb[3:, 2:] = np.eye(3)
                Q_blocks.append(Qb)
                continue
        Q_blocks.append(np.eye(6))
    dims = [q.shape[1] for q in Q_blocks]
    Q = np.zeros((6 * nf, sum(dims)))
    off = 0
    for i, q in enumerate(Q_blocks):
        Q[6 * i : 6 * i + 6, off : off + q.shape[1]] = q
        off += q.shape[1]
    baseline_len = None
    if prob.baseline_cam is not None:
        baseline_len = np.linalg.norm(c[prob.baseline_cam] - c[prob.anchor])

    obs_free = np.array([fidx.get(ci, -1) for ci in prob.oc])
    npnt = len(prob.pids)
    lam = 1e-4
    cost = prob.cost(R, c, P)
    if not np.isfinite(cost):
        log.warning("bundle adjustment skipped: non-finite initial cost")
        return BAResult(cost, cost, 0, False, window, [cost])
    costs = [cost]
    it = 0
    converged = cost == 0.0
    while it < cfg.ba_iters and not converged:
        it += 1
        total, x, r, rw, Jx, rd, dw, Jd = prob.cost(R, c, P, jac=True)
        Rk = R[prob.oc]
        # dx/dw = -[x]x, dx/dc = -R, dx/dP = R
        dx_dw = -skew(x)
        Jc_ang = np.concatenate([np.einsum("nij,njk->nik", Jx, -Rk), np.einsum("nij,njk->nik", Jx, dx_dw)], axis=2)  # (N,2,6): (dc, dw)
        Jp_ang = np.einsum("nij,njk->nik", Jx, Rk)
        Jc_d = np.concatenate([np.einsum("nj,njk->nk", Jd, -Rk), np.einsum("nj,njk->nk", Jd, dx_dw)], axis=1)  # (N,6)
        Jp_d = np.einsum("nj,njk->nk", Jd, Rk)

        Hpp = np.einsum("n,nai,naj->nij", rw, Jp_ang, Jp_ang) + np.einsum("n,ni,nj->nij", dw, Jp_d, Jp_d)
        gp_o = np.einsum("n,nai,na->ni", rw, Jp_ang, r) + (dw * rd)[:, None] * Jp_d
        Hpp_p = np.zeros((npnt, 3, 3))
        gp = np.zeros((npnt, 3))
        np.add.at(Hpp_p, prob.op, Hpp)
        np.add.at(gp, prob.op, gp_o)

        Hcc = np.zeros((6 * nf, 6 * nf))
        gc = np.zeros(6 * nf)
        W = np.zeros((npnt, 6 * nf, 3))
        sel = obs_free >= 0
        if nf:
            Hcc_o = np.einsum("n,nai,naj->nij", rw, Jc_ang, Jc_ang) + np.einsum("n,ni,nj->nij", dw, Jc_d, Jc_d)
            gc_o = np.einsum("n,nai,na->ni", rw, Jc_ang, r) + (dw * rd)[:, None] * Jc_d
            W_o = np.einsum("n,nai,naj->nij", rw, Jc_ang, Jp_ang) + np.einsum("n,ni,nj->nij", dw, Jc_d, Jp_d)
            blocks = np.zeros((nf, 6, 6))
            gblocks = np.zeros((nf, 6))
            np.add.at(blocks, obs_free[sel], Hcc_o[sel])
            np.add.at(gblocks, obs_free[sel], gc_o[sel])
            for i in range(nf):
                Hcc[6 * i : 6 * i + 6, 6 * i : 6 * i + 6] = blocks[i]
            gc = gblocks.reshape(-1)
            Wv = W.reshape(npnt, nf, 6, 3)
            np.add.at(Wv, (prob.op[sel], obs_free[sel]), W_o[sel])
            W = Wv.reshape(npnt, 6 * nf, 3)

        accepted = False
        while lam < 1e12:
            Hpp_d = Hpp_p + lam * np.einsum("nii->ni", Hpp_p)[:, :, None] * np.eye(3) + 1e-12 * np.eye(3)
            Hpp_inv = np.linalg.inv(Hpp_d)
            if nf:
                Hcc_d = Hcc + lam * np.diag(np.maximum(np.diag(Hcc), 1e-12))
                WHi = np.einsum("nci,nij->ncj", W, Hpp_inv)
                S = Hcc_d - np.einsum("nci,ndi->cd", WHi, W)
                rhs = -gc + np.einsum("nci,ni->c", WHi, gp)
                Sr = Q.T @ S @ Q
                try:
                    dr = np.linalg.solve(Sr, Q.T @ rhs)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                dcam = Q @ dr
                dP = -np.einsum("nij,nj->ni", Hpp_inv, gp + np.einsum("nci,c->ni", W, dcam))
            else:
                dcam = np.zeros(0)
                dP = -np.einsum("nij,nj->ni", Hpp_inv, gp)
            R_new, c_new = R.copy(), c.copy()
            for i, ci in enumerate(free):
                step = dcam[6 * i : 6 * i + 6]
                c_new[ci] = c[ci] + step[:3]
                R_new[ci] = so3_exp(step[3:]) @ R[ci]
            if baseline_len is not None:
                bc = prob.baseline_cam
                c_new[bc] = c_new[prob.anchor] + baseline_len * normalize(c_new[bc] - c_new[prob.anchor])
            P_new = P + dP
            new_cost = prob.cost(R_new, c_new, P_new)
            if np.isfinite(new_cost) and new_cost < cost:
                decrease = cost - new_cost
                R, c, P, cost = R_new, c_new, P_new, new_cost
                costs.append(cost)
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                step_norm = np.sqrt(np.sum(dcam**2) + np.sum(dP**2))
                if decrease < 1e-10 * max(costs[0], 1e-300) or step_norm < 1e-10:
                    converged = True
                break
            lam *= 10.0
        if not accepted:
            converged = True
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(c)) and np.all(np.isfinite(P))):
        log.warning("bundle adjustment diverged; map left unchanged")
        return BAResult(costs[0], costs[0], it, False, window, costs)

    with m.lock:
        for ci in free:
            kid = prob.cams[ci]
            if kid in m.keyframes:
                m.keyframes[kid].pose = Pose.from_camera_in_world(R[ci].T, c[ci])
        for i, pid in enumerate(prob.pids):
            if pid in m.points:
                m.points[pid].position = P[i].copy()
        # drop observations that stay inconsistent after optimization
        x = prob.transformed(R, c, P)
        err = np.arctan2(np.linalg.norm(np.cross(x, prob.ob), axis=1), np.sum(x * prob.ob, axis=1))
        bad = err > np.deg2rad(cfg.ba_outlier_deg) * prob.osc
        for k in np.flatnonzero(bad):
            pid = prob.pids[prob.op[k]]
            kid = int(prob.okf[k])
            mp = m.points.get(pid)
            if mp is not None and mp.observations.get(kid) == prob.oidx[k]:
                m.erase_observation(pid, kid)
        m.update_covisibility()
    return BAResult(costs[0], cost, it, converged, window, costs)


def window_cost(m: Map, window: list[int], mode: str = "tri") -> float:
    prob = _Problem(m, sorted(window), mode, m.cfg)
    if not prob.pids:
        return 0.0
    return prob.cost(prob.R, prob.c, prob.P)
