"""Trajectory association, closed-form alignment, ATE RMSE and scale factor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Alignment:
    """Maps estimate onto ground truth: ``gt ~ scale * R @ est + t``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.scale * X @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PairedPositions:
    est: np.ndarray
    gt: np.ndarray
    est_times: np.ndarray
    gt_times: np.ndarray

    def __len__(self) -> int:
        return len(self.est)


def associate(est_times, est_pos, gt_times, gt_pos, max_dt: float) -> PairedPositions:
    """Greedy nearest-timestamp pairing; each pose is used at most once.

    Candidate pairs are visited in order of increasing time difference, with
    ties broken by estimate index then ground-truth index.
    """
    est_times = np.asarray(est_times, dtype=float)
    gt_times = np.asarray(gt_times, dtype=float)
    if len(est_times) == 0 or len(gt_times) == 0:
        raise EvaluationError("both trajectories must be non-empty")
    dt = np.abs(est_times[:, None] - gt_times[None, :])
    ii, jj = np.nonzero(dt <= max_dt)
    order = np.lexsort((jj, ii, dt[ii, jj]))
    used_e: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_e or j in used_g:
            continue
        used_e.add(i)
        used_g.add(j)
        pairs.append((i, j))
    if not pairs:
        raise EvaluationError(f"no timestamp pairs within max_dt={max_dt}")
    pairs.sort()
    ie = np.array([p[0] for p in pairs])
    ig = np.array([p[1] for p in pairs])
    return PairedPositions(
        est=np.asarray(est_pos, dtype=float)[ie],
        gt=np.asarray(gt_pos, dtype=float)[ig],
        est_times=est_times[ie],
        gt_times=gt_times[ig],
    )


def _as_arrays(pairs):
    if isinstance(pairs, PairedPositions):
        return pairs.est, pairs.gt
    est, gt = pairs
    return np.asarray(est, dtype=float), np.asarray(gt, dtype=float)


def align(pairs, mode: str = "sim3") -> Alignment:
    """Closed-form least-squares rigid or similarity alignment (Umeyama).

    ``pairs`` is a :class:`PairedPositions` or an ``(est, gt)`` tuple of (N, 3) arrays.
    """
    if mode not in ("se3", "sim3"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    est, gt = _as_arrays(pairs)
    if len(est) < 3:
        raise EvaluationError("alignment needs at least 3 pairs")
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    de = est - mu_e
    dg = gt - mu_g
    var_e = np.mean(np.sum(de**2, axis=1))
    cov = dg.T @ de / len(est)
    U, D, Vt = np.linalg.svd(cov)
    if var_e <= 1e-300 or D[1] <= 1e-12 * max(D[0], 1e-300):
        raise EvaluationError("degenerate configuration: points are coincident or collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_e) if mode == "sim3" else 1.0
    t = mu_g - s * R @ mu_e
    return Alignment(s, R, t)


def residuals(pairs, alignment: Alignment) -> np.ndarray:
    est, gt = _as_arrays(pairs)
    return np.linalg.norm(gt - alignment.apply(est), axis=1)


def ate_rmse(pairs, alignment: Alignment) -> float:
    return float(np.sqrt(np.mean(residuals(pairs, alignment) ** 2)))


def scale_factor(pairs) -> float:
    """Similarity-alignment scale mapping the estimate onto ground truth (ideal 1).

    Only needs two pairs with spread; for rotation-degenerate (collinear)
    inputs the scale is still well defined via the centroid-relative norms.
    """
    est, gt = _as_arrays(pairs)
    if len(est) < 2:
        raise EvaluationError("scale factor needs at least 2 pairs")
    de = est - est.mean(axis=0)
    dg = gt - gt.mean(axis=0)
    var_e = np.sum(de**2)
    if var_e <= 1e-300 or np.sum(dg**2) <= 1e-300:
        raise EvaluationError("degenerate spread: all positions coincide")
    if len(est) >= 3:
        try:
            return align((est, gt), "sim3").scale
        except EvaluationError:
            pass
    # collinear fallback: best rotation aligns the two lines, scale is the norm ratio
    return float(np.sqrt(np.sum(dg**2) / var_e))


def evaluate(pairs, mode: str = "sim3") -> tuple[float, float, Alignment]:
    """(ATE RMSE under ``mode`` alignment, scale factor, alignment used)."""
    al = align(pairs, mode)
    return ate_rmse(pairs, al), scale_factor(pairs), al
