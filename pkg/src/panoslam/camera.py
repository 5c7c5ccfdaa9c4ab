"""Equirectangular spherical camera model.

Axis convention: the image center looks along -X, increasing ``u`` turns
toward +Y and the top row (v = 0) is the +Z pole. Pixel coordinates are
continuous with integer values at pixel centers; ``u`` is periodic with
period ``W`` and ``v`` spans ``[0, H]``.

Depth is always *range*: the Euclidean distance from the camera center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CameraModelError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        """The 2x3 intrinsic matrix mapping (lon, lat, 1) to (u, v)."""
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy]])


def make_intrinsics(width: int, height: int) -> Intrinsics:
    width, height = int(width), int(height)
    if width <= 0 or height <= 0:
        raise CameraModelError(f"image size must be positive, got {width}x{height}")
    if height < 2 or height % 2 or width % 2:
        raise CameraModelError(f"image size must be even and at least 4x2, got {width}x{height}")
    if width != 2 * height:
        raise CameraModelError(f"equirectangular images need W = 2H, got {width}x{height}")
    return Intrinsics(
        width=width,
        height=height,
        fx=width / (2.0 * np.pi),
        fy=-height / np.pi,
        cx=width / 2.0,
        cy=height / 2.0,
    )


def pixel_to_lonlat(intr: Intrinsics, uv) -> np.ndarray:
    """Map pixel coordinates (..., 2) to (lon, lat) in radians, linearly."""
    uv = np.asarray(uv, dtype=float)
    lon = (uv[..., 0] - intr.cx) / intr.fx
    lat = (uv[..., 1] - intr.cy) / intr.fy
    return np.stack([lon, lat], axis=-1)


def _check_v(intr: Intrinsics, v: np.ndarray) -> None:
    if np.any(~np.isfinite(v)) or np.any(v < 0.0) or np.any(v > intr.height):
        raise CameraModelError(f"v outside [0, {intr.height}]")


def bearing_from_pixel(intr: Intrinsics, uv) -> np.ndarray:
    """Unit bearing (..., 3) for pixel coordinates (..., 2)."""
    uv = np.asarray(uv, dtype=float)
    _check_v(intr, uv[..., 1])
    ll = pixel_to_lonlat(intr, uv)
    lon, lat = ll[..., 0], ll[..., 1]
    clat = np.cos(lat)
    b = np.stack([-clat * np.cos(lon), clat * np.sin(lon), np.sin(lat)], axis=-1)
    # cos/sin rounding leaves |b| - 1 ~ 1e-16; renormalize to keep the norm invariant tight
    return b / np.linalg.norm(b, axis=-1, keepdims=True)


def unproject(intr: Intrinsics, uv, d) -> np.ndarray:
    """3D point(s) at range ``d`` along the pixel ray(s)."""
    d = np.asarray(d, dtype=float)
    if np.any(~(d > 0.0)):
        raise CameraModelError("depth must be positive")
    return bearing_from_pixel(intr, uv) * d[..., None]


def point_to_lonlat(P) -> np.ndarray:
    """(lon, lat) of camera-frame point(s), lon in (-pi, pi], poles mapped to lon = 0."""
    P = np.asarray(P, dtype=float)
    r = np.linalg.norm(P, axis=-1)
    if np.any(r == 0.0):
        raise CameraModelError("cannot project a point at the camera center")
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    at_pole = (X == 0.0) & (Y == 0.0)
    lon = np.arctan2(Y, -X)
    lon = np.where(lon <= -np.pi, np.pi, lon)
    lon = np.where(at_pole, 0.0, lon)
    lat = np.arcsin(np.clip(Z / r, -1.0, 1.0))
    lat = np.where(at_pole, np.copysign(np.pi / 2, Z), lat)
    return np.stack([lon, lat], axis=-1)


def project(intr: Intrinsics, P) -> np.ndarray:
    """Pixel coordinates (..., 2) of camera-frame point(s) (..., 3); u wrapped into [0, W)."""
    ll = point_to_lonlat(P)
    u = intr.cx + intr.fx * ll[..., 0]
    v = intr.cy + intr.fy * ll[..., 1]
    u = np.mod(u, intr.width)
    # mod can return exactly W for tiny negative inputs
    u = np.where(u >= intr.width, u - intr.width, u)
    return np.stack([u, v], axis=-1)


def wrap_u(intr: Intrinsics, u):
    return np.mod(u, intr.width)


def pixel_grid_bearings(intr: Intrinsics) -> np.ndarray:
    """Bearings (H, W, 3) of every integer pixel center."""
    vv, uu = np.mgrid[0 : intr.height, 0 : intr.width].astype(float)
    return bearing_from_pixel(intr, np.stack([uu, vv], axis=-1))


def latitude_of_rows(intr: Intrinsics) -> np.ndarray:
    return (np.arange(intr.height, dtype=float) - intr.cy) / intr.fy
