"""Spherical two-view geometry: essential matrix, epipolar gates and DLT triangulation.

All bearings are unit 3-vectors in their camera frame. Poses map world to
camera (``x_c = R x_w + t``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .geometry import Pose, normalize, relative_pose, skew, so3_exp, tangent_basis


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GeometryConfig:
    epipole_angle_deg: float = 1.0
    epiplane_angle_deg: float = 0.5
    reproj_angle_deg: float = 1.0
    parallax_deg: float = 0.5
    min_range_m: float = 0.1


@dataclass(frozen=True)
class EssentialMatrix:
    e: np.ndarray
    R12: np.ndarray = field(repr=False)
    t12: np.ndarray = field(repr=False)

    def residuals(self, p1, p2) -> np.ndarray:
        """Algebraic epipolar residuals p2^T E p1 for row-aligned bearing arrays."""
        p1 = np.atleast_2d(p1)
        p2 = np.atleast_2d(p2)
        return np.einsum("ni,ij,nj->n", p2, self.e, p1)

    @property
    def epipole_2(self) -> np.ndarray:
        """Direction of camera 1's center seen from camera 2."""
        return normalize(self.t12)

    @property
    def epipole_1(self) -> np.ndarray:
        """Direction of camera 2's center seen from camera 1."""
        return normalize(-self.R12.T @ self.t12)


@dataclass(frozen=True)
class EpipolarPlane:
    normal: np.ndarray

    @property
    def a(self) -> float:
        return float(self.normal[0])

    @property
    def b(self) -> float:
        return float(self.normal[1])

    @property
    def c(self) -> float:
        return float(self.normal[2])


@dataclass(frozen=True)
class TriangulationResult:
    point: np.ndarray
    angular_error_1: float
    angular_error_2: float
    status: str
    reason: str = ""

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"


def essential_from_poses(T1: Pose, T2: Pose) -> EssentialMatrix:
    T12 = relative_pose(T1, T2)
    norm = np.linalg.norm(T12.t)
    if not norm > 1e-12:
        raise DegenerateGeometryError("zero baseline between the two poses")
    t = T12.t / norm
    return EssentialMatrix(skew(t) @ T12.R, T12.R, T12.t)


def epipolar_plane(E12: EssentialMatrix | np.ndarray, p2, tol: float = 1e-12) -> EpipolarPlane:
    e = E12.e if isinstance(E12, EssentialMatrix) else np.asarray(E12, dtype=float)
    coeffs = np.asarray(p2, dtype=float) @ e
    n = np.linalg.norm(coeffs)
    if n < tol:
        raise DegenerateGeometryError("bearing coincides with the epipole; plane undefined")
    return EpipolarPlane(coeffs / n)


def sq_plane_distance(plane: EpipolarPlane | np.ndarray, p) -> np.ndarray | float:
    """Squared distance of bearing(s) ``p`` to a plane through the origin.

    Returns ``(aX + bY + cZ)^2 / (a^2 + b^2 + c^2)``; for unit ``p`` this is
    the squared sine of the angle between ``p`` and the plane.
    """
    n = plane.normal if isinstance(plane, EpipolarPlane) else np.asarray(plane, dtype=float)
    p = np.asarray(p, dtype=float)
    num = (p @ n) ** 2
    out = num / np.dot(n, n)
    return float(out) if np.ndim(out) == 0 else out


def epipole_angle_ok(p2, epipole, mu_deg: float) -> np.ndarray | bool:
    """True where the bearing is at least ``mu_deg`` away from the epipole and its antipode."""
    p2 = np.asarray(p2, dtype=float)
    dots = np.abs(p2 @ np.asarray(epipole, dtype=float))
    ok = dots <= np.cos(np.deg2rad(mu_deg)) + 1e-15
    return bool(ok) if np.ndim(ok) == 0 else ok


def angular_error(p_est, p_obs) -> np.ndarray | float:
    """Angle between bearing(s), via the clamped normalized dot product."""
    a = np.asarray(p_est, dtype=float)
    b = np.asarray(p_obs, dtype=float)
    cosang = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    out = np.arccos(np.clip(cosang, -1.0, 1.0))
    return float(out) if np.ndim(out) == 0 else out


def _angle_between(a, b) -> np.ndarray:
    # atan2 form stays accurate for tiny angles where arccos loses precision
    cr = np.linalg.norm(np.cross(a, b), axis=-1)
    dt = np.sum(a * b, axis=-1)
    return np.arctan2(cr, dt)


def check_parallax(bearings_1, bearings_2, R12) -> float:
    """Median angle (radians) between rotation-compensated bearing pairs."""
    b1 = np.atleast_2d(np.asarray(bearings_1, dtype=float))
    b2 = np.atleast_2d(np.asarray(bearings_2, dtype=float))
    if b1.shape[0] == 0:
        raise ValueError("parallax check needs at least one match")
    rotated = b1 @ np.asarray(R12, dtype=float).T
    return float(np.median(_angle_between(rotated, b2)))


# status codes used by the batched triangulator
ACCEPTED = 0
REJ_BASELINE = 1
REJ_EPIPOLE = 2
REJ_INFINITY = 3
REJ_RANGE = 4
REJ_REPROJ = 5

REASONS = {
    ACCEPTED: "",
    REJ_BASELINE: "zero baseline",
    REJ_EPIPOLE: "bearing too close to the epipole",
    REJ_INFINITY: "point at infinity",
    REJ_RANGE: "range below minimum",
    REJ_REPROJ: "angular reprojection error above threshold",
}


def triangulate_batch(
    p1,
    p2,
    T1: Pose,
    T2: Pose,
    cfg: GeometryConfig = GeometryConfig(),
    reproj_scale1=1.0,
    reproj_scale2=1.0,
):
    """Triangulate N bearing pairs at once.

    Returns ``(points (N,3), err1 (N,), err2 (N,), status (N,) int)``. The
    angular acceptance threshold is multiplied by the per-pair scale arrays,
    which lets callers loosen it for keypoints detected on coarse pyramid levels.
    """
    p1 = np.atleast_2d(np.asarray(p1, dtype=float))
    p2 = np.atleast_2d(np.asarray(p2, dtype=float))
    n = p1.shape[0]
    pts = np.full((n, 3), np.nan)
    err1 = np.full(n, np.nan)
    err2 = np.full(n, np.nan)
    status = np.full(n, ACCEPTED, dtype=int)
    if n == 0:
        return pts, err1, err2, status

    T12 = relative_pose(T1, T2)
    if np.linalg.norm(T12.t) <= 1e-12:
        status[:] = REJ_BASELINE
        return pts, err1, err2, status
    e2 = normalize(T12.t)
    e1 = normalize(-T12.R.T @ T12.t)
    ok = epipole_angle_ok(p1, e1, cfg.epipole_angle_deg) & epipole_angle_ok(p2, e2, cfg.epipole_angle_deg)
    status[~ok] = REJ_EPIPOLE

    P1 = np.hstack([T1.R, T1.t[:, None]])
    P2 = np.hstack([T2.R, T2.t[:, None]])
    A = np.concatenate([skew(p1) @ P1, skew(p2) @ P2], axis=1)  # (N, 6, 4)
    _, _, Vt = np.linalg.svd(A)
    X = Vt[:, -1, :]
    X = X / np.linalg.norm(X, axis=1, keepdims=True)
    X = X * np.where(X[:, 3:4] < 0, -1.0, 1.0)
    w = X[:, 3]
    at_inf = np.abs(w) < 1e-8
    status[(status == ACCEPTED) & at_inf] = REJ_INFINITY
    safe_w = np.where(at_inf, 1.0, w)
    pts = X[:, :3] / safe_w[:, None]
    pts[at_inf] = np.nan

    xc1 = pts @ T1.R.T + T1.t
    xc2 = pts @ T2.R.T + T2.t
    r1 = np.linalg.norm(xc1, axis=1)
    r2 = np.linalg.norm(xc2, axis=1)
    with np.errstate(invalid="ignore"):
        bad_range = ~((r1 >= cfg.min_range_m) & (r2 >= cfg.min_range_m))
    status[(status == ACCEPTED) & bad_range] = REJ_RANGE
    with np.errstate(invalid="ignore", divide="ignore"):
        err1 = _angle_between(xc1, p1)
        err2 = _angle_between(xc2, p2)
    th = np.deg2rad(cfg.reproj_angle_deg)
    with np.errstate(invalid="ignore"):
        bad_ang = ~((err1 <= th * np.asarray(reproj_scale1)) & (err2 <= th * np.asarray(reproj_scale2)))
    status[(status == ACCEPTED) & bad_ang] = REJ_REPROJ
    return pts, err1, err2, status


def triangulate_dlt(p1, p2, T1: Pose, T2: Pose, cfg: GeometryConfig = GeometryConfig()) -> TriangulationResult:
    pts, e1, e2, st = triangulate_batch(np.reshape(p1, (1, 3)), np.reshape(p2, (1, 3)), T1, T2, cfg)
    code = int(st[0])
    return TriangulationResult(
        point=pts[0],
        angular_error_1=float(e1[0]),
        angular_error_2=float(e2[0]),
        status="accepted" if code == ACCEPTED else "rejected",
        reason=REASONS[code],
    )


# ---------------------------------------------------------------------------
# relative pose from matches (used only by the monocular bootstrap)


def _essential_8pt(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    A = np.einsum("ni,nj->nij", p2, p1).reshape(len(p1), 9)
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def _epipolar_sines(E: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Max over both views of the sine of the bearing-to-epipolar-plane angle."""
    n1 = p2 @ E  # plane in view 1
    n2 = p1 @ E.T  # plane in view 2
    with np.errstate(invalid="ignore", divide="ignore"):
        s1 = np.abs(np.sum(n1 * p1, axis=1)) / np.linalg.norm(n1, axis=1)
        s2 = np.abs(np.sum(n2 * p2, axis=1)) / np.linalg.norm(n2, axis=1)
    return np.nan_to_num(np.maximum(s1, s2), nan=1.0)


def _decompose(E: np.ndarray):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for s in (1.0, -1.0):
            yield R, s * t


def _cheirality_count(R, t, p1, p2) -> int:
    T1 = Pose.identity()
    T2 = Pose(R, t)
    cfg = GeometryConfig(epipole_angle_deg=0.0, min_range_m=0.0, reproj_angle_deg=5.0)
    _, _, _, st = triangulate_batch(p1, p2, T1, T2, cfg)
    return int(np.sum(st == ACCEPTED))


def estimate_relative_pose(p1, p2, rng: np.random.Generator, iterations: int = 200, inlier_angle_deg: float = 0.5):
    """Relative pose (R12, unit t12) from matched bearings.

    RANSAC over 8-point hypotheses scored by epipolar-plane angle, then a
    Levenberg-Marquardt refinement of rotation + unit translation on the inliers.
    Returns ``(R12, t12, inlier_mask)`` or ``None`` when no model is found.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    n = len(p1)
    if n < 8:
        return None
    th = np.sin(np.deg2rad(inlier_angle_deg))
    best_inl = None
    best_count = -1
    for _ in range(iterations):
        idx = rng.choice(n, 8, replace=False)
        E = _essential_8pt(p1[idx], p2[idx])
        inl = _epipolar_sines(E, p1, p2) < th
        c = int(inl.sum())
        if c > best_count:
            best_count, best_inl = c, inl
    if best_count < 8:
        return None
    E = _essential_8pt(p1[best_inl], p2[best_inl])
    cands = list(_decompose(E))
    counts = [_cheirality_count(R, t, p1[best_inl], p2[best_inl]) for R, t in cands]
    R0, t0 = cands[int(np.argmax(counts))]

    B = tangent_basis(t0)

    def unpack(x):
        R = so3_exp(x[:3]) @ R0
        t = normalize(t0 + B.T @ x[3:])
        return R, t

    def resid(x):
        R, t = unpack(x)
        E = skew(t) @ R
        q1, q2 = p1[best_inl], p2[best_inl]
        n1 = q2 @ E
        n2 = q1 @ E.T
        s1 = np.sum(n1 * q1, axis=1) / np.maximum(np.linalg.norm(n1, axis=1), 1e-12)
        s2 = np.sum(n2 * q2, axis=1) / np.maximum(np.linalg.norm(n2, axis=1), 1e-12)
        return np.concatenate([s1, s2])

    sol = least_squares(resid, np.zeros(5), method="lm")
    R, t = unpack(sol.x)
    E = skew(t) @ R
    inl = _epipolar_sines(E, p1, p2) < th
    return R, t, inl
