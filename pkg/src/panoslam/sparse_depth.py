"""Sparse range maps from map points projected into a panoramic frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Intrinsics, project
from .geometry import Pose


@dataclass
class DepthMap:
    """Per-pixel range in meters; invalid pixels hold 0."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ValueError("values and validity masks differ in shape")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def empty(cls, height: int, width: int) -> "DepthMap":
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))

    @classmethod
    def from_array(cls, values) -> "DepthMap":
        """Wrap a raw array; positive finite entries are valid."""
        v = np.asarray(values, dtype=float)
        valid = np.isfinite(v) & (v > 0)
        return cls(np.where(valid, v, 0.0), valid)

    def count(self) -> int:
        return int(self.valid.sum())

    def check(self) -> None:
        assert np.all(self.values[self.valid] > 0) and np.all(np.isfinite(self.values[self.valid]))
        assert np.all(self.values[~self.valid] == 0)


def world_to_camera(P_w, R_wi, t_wi) -> np.ndarray:
    """Express world point(s) in the frame of a camera whose pose in the world is (R_wi, t_wi).

    Computes ``R_wi^-1 P_w - R_wi^-1 t_wi``.
    """
    R_wi = np.asarray(R_wi, dtype=float)
    t_wi = np.asarray(t_wi, dtype=float)
    R_inv = R_wi.T
    return np.asarray(P_w, dtype=float) @ R_inv.T - R_inv @ t_wi


def render_sparse_depth(points_w, pose: Pose, intr: Intrinsics, point_ids=None) -> DepthMap:
    """Rasterize map points into a sparse range map.

    Nearest-integer pixels, columns wrap, rows outside ``[0, H-1]`` are
    discarded and the nearer point wins on collision (ties: smaller id).
    """
    dm = DepthMap.empty(intr.height, intr.width)
    P = np.asarray(points_w, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        return dm
    ids = np.arange(len(P)) if point_ids is None else np.asarray(point_ids)
    R_wi = pose.R.T
    t_wi = pose.center
    Pc = world_to_camera(P, R_wi, t_wi)
    rng = np.linalg.norm(Pc, axis=1)
    ok = rng > 0
    Pc, rng, ids = Pc[ok], rng[ok], ids[ok]
    uv = project(intr, Pc)
    u = np.mod(np.rint(uv[:, 0]).astype(np.int64), intr.width)
    v = np.rint(uv[:, 1]).astype(np.int64)
    inside = (v >= 0) & (v <= intr.height - 1)
    u, v, rng, ids = u[inside], v[inside], rng[inside], ids[inside]
    if len(u) == 0:
        return dm
    flat = v * intr.width + u
    order = np.lexsort((ids, rng, flat))
    flat, rng = flat[order], rng[order]
    first = np.r_[True, flat[1:] != flat[:-1]]
    dm.values.ravel()[flat[first]] = rng[first]
    dm.valid.ravel()[flat[first]] = True
    return dm
