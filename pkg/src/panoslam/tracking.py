"""Frame-to-map pose estimation, motion prediction and keyframe policy."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, normalize
from .features import hamming_matrix
from .residuals import huber, log_residual_jac, pose_point_jacobian
from .geometry import tangent_basis

log = logging.getLogger(__name__)


class TrackingError(RuntimeError):
    pass


class InsufficientCorrespondences(TrackingError):
    pass


class PoseDivergence(TrackingError):
    pass


@dataclass(frozen=True)
class TrackConfig:
    huber_deg: float = 1.5
    inlier_deg: float = 2.0
    min_inliers: int = 30
    kf_ratio: float = 0.9
    kf_min_interval: int = 3
    kf_max_interval: int = 30
    search_deg: float = 3.0
    refine_search_deg: float = 1.0
    match_max_hamming: int = 64
    lm_damping: float = 1e-4
    lm_factor: float = 10.0
    lm_max_iters: int = 20
    lm_max_damping: float = 1e12
    outlier_rounds: int = 4


class Status(enum.Enum):
    INITIALIZING = "initializing"
    OK = "ok"
    LOST = "lost"


@dataclass
class TrackState:
    pose: Pose = field(default_factory=Pose.identity)
    velocity: Pose = field(default_factory=Pose.identity)
    reference_kf: int = -1
    tracked: int = 0
    status: Status = Status.INITIALIZING
    frames_since_kf: int = 0
    history: int = 0

    def advance(self, pose: Pose) -> None:
        """Record a newly tracked pose and update the constant-velocity model."""
        if self.history >= 1:
            self.velocity = pose @ self.pose.inverse()
        else:
            self.velocity = Pose.identity()
        self.pose = pose
        self.history += 1


def predict_pose(state: TrackState) -> Pose:
    """Constant-velocity prediction: last pose composed with the last frame-to-frame motion."""
    return state.velocity @ state.pose


def decide_keyframe(state: TrackState, ref_tracked: int, cfg: TrackConfig = TrackConfig()) -> bool:
    if state.frames_since_kf < cfg.kf_min_interval:
        return False
    return state.tracked < cfg.kf_ratio * ref_tracked or state.frames_since_kf >= cfg.kf_max_interval


# ---------------------------------------------------------------------------
# pose optimization


def _pose_cost(pose: Pose, P, b, B, mask, delta):
    x = P @ pose.R.T + pose.t
    r, J = log_residual_jac(x, b, B)
    sq = np.sum(r * r, axis=1)
    cost, w = huber(sq, delta)
    cost = np.where(mask, cost, 0.0)
    w = np.where(mask, w, 0.0)
    return float(np.sum(cost)), r, J, x, w


def _lm(pose, P, b, B, mask, delta, cfg: TrackConfig, trace):
    lam = cfg.lm_damping
    cost, r, J, x, w = _pose_cost(pose, P, b, B, mask, delta)
    if not np.isfinite(cost):
        raise PoseDivergence("non-finite initial cost")
    if trace is not None:
        trace.append(cost)
    for _ in range(cfg.lm_max_iters):
        if cost == 0.0:
            break
        Jx = np.einsum("nij,njk->nik", J, pose_point_jacobian(x))  # (N, 2, 6)
        H = np.einsum("n,nij,nik->jk", w, Jx, Jx)
        g = np.einsum("n,nij,ni->j", w, Jx, r)
        accepted = False
        while lam <= cfg.lm_max_damping:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= cfg.lm_factor
                continue
            cand = pose.retract(step)
            c_cost, c_r, c_J, c_x, c_w = _pose_cost(cand, P, b, B, mask, delta)
            if np.isfinite(c_cost) and c_cost < cost:
                decrease = cost - c_cost
                pose, cost, r, J, x, w = cand, c_cost, c_r, c_J, c_x, c_w
                lam = max(lam / cfg.lm_factor, 1e-12)
                accepted = True
                if trace is not None:
                    trace.append(cost)
                break
            if np.linalg.norm(step) < 1e-10:
                break
            lam *= cfg.lm_factor
        if not accepted:
            break
        if decrease < 1e-10 or np.linalg.norm(step) < 1e-10:
            break
    if not np.isfinite(cost) or not pose.is_finite():
        raise PoseDivergence("pose optimization diverged")
    return pose, cost


def estimate_pose(points_w, bearings, initial: Pose, cfg: TrackConfig = TrackConfig(), trace: list | None = None):
    """Robust pose from 3D-point / observed-bearing correspondences.

    Levenberg-Marquardt on the 6-dof left perturbation with a Huber loss on
    the angular residual. After each round, correspondences whose angular
    error exceeds the inlier threshold are excluded and the pose is refined
    again. Returns ``(pose, inlier_mask, cost)``; ``trace`` collects the
    accepted costs of every round.
    """
    P = np.asarray(points_w, dtype=float).reshape(-1, 3)
    b = normalize(np.asarray(bearings, dtype=float).reshape(-1, 3))
    if len(P) < 6:
        raise InsufficientCorrespondences(f"need at least 6 correspondences, got {len(P)}")
    if not initial.is_finite():
        raise PoseDivergence("initial pose is not finite")
    # canonical order makes the result independent of how callers list correspondences
    order = np.lexsort(np.hstack([P, b]).T[::-1])
    P, b = P[order], b[order]
    B = tangent_basis(b)
    delta = np.deg2rad(cfg.huber_deg)
    th = np.deg2rad(cfg.inlier_deg)
    mask = np.ones(len(P), dtype=bool)
    pose = initial
    cost = 0.0
    for rnd in range(max(cfg.outlier_rounds, 1)):
        round_trace = [] if trace is not None else None
        pose, cost = _lm(pose, P, b, B, mask, delta, cfg, round_trace)
        if trace is not None:
            trace.append(round_trace)
        x = P @ pose.R.T + pose.t
        err = np.arctan2(np.linalg.norm(np.cross(x, b), axis=1), np.sum(x * b, axis=1))
        new_mask = err <= th
        if new_mask.sum() < 6:
            new_mask = mask
        if np.array_equal(new_mask, mask) and rnd > 0:
            break
        mask = new_mask
    out = np.empty_like(mask)
    out[order] = mask
    return pose, out, cost


# ---------------------------------------------------------------------------
# projection search


def chord(angle_rad: float) -> float:
    return 2.0 * np.sin(0.5 * angle_rad)


def search_by_projection(pose: Pose, points_w, point_desc, frame_bearings, frame_desc, radius_deg: float, max_hamming: int, tree=None):
    """Match map points to frame keypoints near their predicted bearings.

    Returns ``(point_idx, keypoint_idx)`` arrays; each keypoint is used at
    most once (lowest descriptor distance wins, ties by point order).
    """
    P = np.asarray(points_w, dtype=float).reshape(-1, 3)
    if len(P) == 0 or len(frame_bearings) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    x = P @ pose.R.T + pose.t
    pred = normalize(x)
    if tree is None:
        tree = cKDTree(frame_bearings)
    cands = tree.query_ball_point(pred, chord(np.deg2rad(radius_deg)))
    pi = np.repeat(np.arange(len(P)), [len(c) for c in cands])
    if len(pi) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    ki = np.concatenate([np.asarray(c, dtype=int) for c in cands])
    a = np.ascontiguousarray(point_desc[pi]).view(np.uint64)
    bb = np.ascontiguousarray(frame_desc[ki]).view(np.uint64)
    dist = np.bitwise_count(a ^ bb).sum(axis=1)
    ok = dist <= max_hamming
    pi, ki, dist = pi[ok], ki[ok], dist[ok]
    # best keypoint per point, then best point per keypoint
    order = np.lexsort((ki, dist, pi))
    pi, ki, dist = pi[order], ki[order], dist[order]
    first = np.r_[True, pi[1:] != pi[:-1]]
    pi, ki, dist = pi[first], ki[first], dist[first]
    order = np.lexsort((pi, dist, ki))
    pi, ki = pi[order], ki[order]
    first = np.r_[True, ki[1:] != ki[:-1]]
    return pi[first], ki[first]


__all__ = [
    "TrackConfig",
    "TrackState",
    "Status",
    "TrackingError",
    "InsufficientCorrespondences",
    "PoseDivergence",
    "predict_pose",
    "decide_keyframe",
    "estimate_pose",
    "search_by_projection",
    "hamming_matrix",
]
