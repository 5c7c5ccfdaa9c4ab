"""Angular residuals on the unit sphere, their Jacobians and the Huber loss.

The residual of a predicted camera-frame point ``x`` against an observed
bearing ``b`` is the logarithm map of ``x/|x|`` at ``b`` written in the
tangent basis at ``b``: a 2-vector whose norm is the angle between the two
directions. It is zero only when the directions coincide and is independent
of the length of ``x``.
"""

from __future__ import annotations

import numpy as np

from .geometry import skew, tangent_basis

# below this sine the log map switches to its series expansion
_SMALL = 1e-7


def log_residual(x, b, basis=None) -> np.ndarray:
    """Tangent-plane residual (..., 2) of points ``x`` at observed unit bearings ``b``."""
    r, _ = log_residual_jac(x, b, basis, jacobian=False)
    return r


def log_residual_jac(x, b, basis=None, jacobian: bool = True):
    """Residual and its derivative with respect to ``x`` (..., 2, 3).

    ``basis`` is the (..., 2, 3) tangent basis at ``b``; pass it when it is
    reused across calls.
    """
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)
    B = tangent_basis(b) if basis is None else basis
    s = np.sum(x * b, axis=-1)
    v = x - s[..., None] * b
    n = np.linalg.norm(v, axis=-1)
    norm_x = np.linalg.norm(x, axis=-1)
    theta = np.arctan2(n, s)
    near_axis = n <= _SMALL * norm_x
    small = near_axis & (s > 0)
    # the log map is singular at the antipode; pick a fixed direction of norm pi
    antipodal = near_axis & ~small
    safe_n = np.where(small, 1.0, n)
    safe_s = np.where(small, s, 1.0)
    f = np.where(small, 1.0 / safe_s - n**2 / (3.0 * safe_s**3), theta / safe_n)
    Bx = np.einsum("...ij,...j->...i", B, x)
    r = f[..., None] * Bx
    if np.any(antipodal):
        r = np.where(antipodal[..., None], np.pi * np.array([1.0, 0.0]), r)
    if not jacobian:
        return r, None
    # df/dx for the exact and the series branch
    denom = n**2 + s**2
    dtheta = (s[..., None] * v / safe_n[..., None] - n[..., None] * b) / denom[..., None]
    df_exact = dtheta / safe_n[..., None] - (theta / safe_n**3)[..., None] * v
    df_series = (
        -b / (safe_s**2)[..., None]
        - (2.0 / (3.0 * safe_s**3))[..., None] * v
        + (n**2 / safe_s**4)[..., None] * b
    )
    df = np.where(small[..., None], df_series, df_exact)
    J = f[..., None, None] * B + Bx[..., :, None] * df[..., None, :]
    J = np.where(antipodal[..., None, None], 0.0, J)
    return r, J


def pose_point_jacobian(x_c) -> np.ndarray:
    """d x_c / d xi (..., 3, 6) for the perturbation ``x_c' = Exp(w) x_c + rho``, xi = (rho, w)."""
    x_c = np.asarray(x_c, dtype=float)
    eye = np.broadcast_to(np.eye(3), x_c.shape[:-1] + (3, 3))
    return np.concatenate([eye, -skew(x_c)], axis=-1)


def huber(sq_err, delta: float):
    """Robust cost per term and IRLS weight for squared residual norms."""
    sq = np.asarray(sq_err, dtype=float)
    e = np.sqrt(sq)
    inside = e <= delta
    cost = np.where(inside, sq, 2.0 * delta * e - delta**2)
    weight = np.where(inside, 1.0, delta / np.maximum(e, 1e-300))
    return cost, weight
