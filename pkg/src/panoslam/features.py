"""ORB-style features for equirectangular panoramas.

FAST-9 corners over a scale pyramid, Harris ranking, intensity-centroid
orientation and a rotation-steered 256-bit BRIEF descriptor. Columns are
indexed cyclically so patches wrap across the left/right seam. On panoramas
every pyramid level keeps a whole number of columns per grid cell, which
makes detection exactly equivariant to cyclic shifts by whole grid cells.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

FAST_RADIUS = 3
PATCH_RADIUS = 15
HARRIS_K = 0.04
HARRIS_BLOCK = 7
DESCRIPTOR_BYTES = 32

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dv, du)
CIRCLE = np.array(
    [
        (-3, 0), (-3, 1), (-2, 2), (-1, 3), (0, 3), (1, 3), (2, 2), (3, 1),
        (3, 0), (3, -1), (2, -2), (1, -3), (0, -3), (-1, -3), (-2, -2), (-3, -1),
    ]
)  # fmt: skip


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    n_levels: int = 8
    scale_factor: float = 1.2
    fast_threshold: float = 20.0
    n_features: int = 2000
    grid_cols: int = 64
    grid_rows: int = 32
    polar_band: float = 0.05
    cell_quota: int = 0  # 0 -> derived from n_features and the active cell count
    match_ratio: float = 0.8
    max_hamming: int = 64


class KeyPoint(NamedTuple):
    u: float
    v: float
    octave: int
    response: float
    angle: float


@dataclass
class Features:
    """Struct-of-arrays keypoints; positions are level-0 pixel coordinates."""

    uv: np.ndarray
    octave: np.ndarray
    response: np.ndarray
    angle: np.ndarray
    descriptors: np.ndarray
    level_scales: np.ndarray

    def __len__(self) -> int:
        return len(self.uv)

    def keypoint(self, i: int) -> KeyPoint:
        return KeyPoint(float(self.uv[i, 0]), float(self.uv[i, 1]), int(self.octave[i]), float(self.response[i]), float(self.angle[i]))

    @property
    def scales(self) -> np.ndarray:
        """Per-keypoint pyramid scale relative to level 0."""
        return self.level_scales[self.octave]

    def subset(self, idx) -> "Features":
        return Features(self.uv[idx], self.octave[idx], self.response[idx], self.angle[idx], self.descriptors[idx], self.level_scales)

    @classmethod
    def empty(cls, level_scales=np.ones(1)) -> "Features":
        return cls(np.zeros((0, 2)), np.zeros(0, int), np.zeros(0), np.zeros(0), np.zeros((0, DESCRIPTOR_BYTES), np.uint8), np.asarray(level_scales, float))


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        return img.astype(np.float32)
    return (img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114).astype(np.float32)


def _brief_pattern() -> np.ndarray:
    """256 point pairs (du1, dv1, du2, dv2) drawn isotropically inside the patch disc."""
    rng = np.random.default_rng(20110606)
    pts = []
    sigma = (2 * PATCH_RADIUS + 1) / 5.0
    while len(pts) < 512:
        p = rng.normal(0.0, sigma, 2)
        if np.hypot(*p) <= PATCH_RADIUS - 0.5:
            pts.append(p)
    return np.array(pts).reshape(256, 4)


BRIEF_PATTERN = _brief_pattern()

_dv, _du = np.mgrid[-PATCH_RADIUS : PATCH_RADIUS + 1, -PATCH_RADIUS : PATCH_RADIUS + 1]
_disc = _du**2 + _dv**2 <= PATCH_RADIUS**2
DISC_DU = _du[_disc]
DISC_DV = _dv[_disc]


# ---------------------------------------------------------------------------
# pyramid


def level_sizes(width: int, height: int, cfg: FeatureConfig, cyclic: bool) -> list[tuple[int, int]]:
    sizes = [(width, height)]
    for lvl in range(1, cfg.n_levels):
        s = cfg.scale_factor**lvl
        if cyclic:
            cols = max(1, int(round(width / s / cfg.grid_cols)))
            w = cols * cfg.grid_cols
            h = w // 2
        else:
            w = max(8, int(round(width / s)))
            h = max(8, int(round(height / s)))
        sizes.append((w, h))
    return sizes


def _resample_axis(img: np.ndarray, n_out: int, axis: int, cyclic: bool) -> np.ndarray:
    n_in = img.shape[axis]
    if n_out == n_in:
        return img
    s = n_in / n_out
    x = (np.arange(n_out) + 0.5) * s - 0.5
    x0 = np.floor(x).astype(int)
    f = (x - x0).astype(img.dtype)
    if cyclic:
        i0 = np.mod(x0, n_in)
        i1 = np.mod(x0 + 1, n_in)
    else:
        i0 = np.clip(x0, 0, n_in - 1)
        i1 = np.clip(x0 + 1, 0, n_in - 1)
    a = np.take(img, i0, axis=axis)
    b = np.take(img, i1, axis=axis)
    shape = [1, 1]
    shape[axis] = n_out
    f = f.reshape(shape)
    return a * (1 - f) + b * f


def _modes(cyclic: bool):
    return ("nearest", "wrap") if cyclic else "nearest"


def build_pyramid(gray: np.ndarray, sizes, cyclic: bool) -> list[np.ndarray]:
    # each level is resampled from the previous one, which preserves the
    # whole-cell shift equivariance because every level width is a multiple of the grid
    levels = [gray.astype(np.float32)]
    for w, h in sizes[1:]:
        prev = levels[-1]
        s = prev.shape[1] / w
        sigma = 0.5 * np.sqrt(max(s * s - 1.0, 0.0))
        blurred = ndimage.gaussian_filter(prev, sigma, mode=_modes(cyclic), truncate=3.0) if sigma > 0 else prev
        lvl = _resample_axis(blurred, w, 1, cyclic)
        lvl = _resample_axis(lvl, h, 0, False)
        levels.append(lvl.astype(np.float32))
    return levels


# ---------------------------------------------------------------------------
# detection


def _pad(img: np.ndarray, r: int, cyclic: bool) -> np.ndarray:
    mode_cols = "wrap" if cyclic else "edge"
    out = np.pad(img, ((0, 0), (r, r)), mode=mode_cols)
    return np.pad(out, ((r, r), (0, 0)), mode="edge")


def fast_mask(img: np.ndarray, threshold: float, cyclic: bool = True, arc: int = 9) -> np.ndarray:
    """Boolean FAST segment-test mask: ``arc`` contiguous circle pixels all brighter
    than center + threshold, or all darker than center - threshold.

    The three outermost rows (and columns, for non-cyclic images) are never corners.
    """
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape
    r = FAST_RADIUS
    padded = _pad(img, r, cyclic)

    def ring(k):
        dv, du = CIRCLE[k]
        return padded[r + dv : r + dv + h, r + du : r + du + w]

    hi = img + threshold
    lo = img - threshold
    # an arc of >= 9 of 16 always covers at least two of the four compass points
    n_bright = np.zeros((h, w), dtype=np.uint8)
    n_dark = np.zeros((h, w), dtype=np.uint8)
    for k in (0, 4, 8, 12):
        rk = ring(k)
        n_bright += rk > hi
        n_dark += rk < lo
    need = 2 if arc >= 9 else 0
    cand = (n_bright >= need) | (n_dark >= need)
    cand[:r] = False
    cand[h - r :] = False
    if not cyclic:
        cand[:, :r] = False
        cand[:, w - r :] = False
    vv, uu = np.nonzero(cand)
    out = np.zeros((h, w), dtype=bool)
    if len(vv) == 0:
        return out
    center = img[vv, uu]
    bright = np.zeros(len(vv), dtype=np.uint32)
    dark = np.zeros(len(vv), dtype=np.uint32)
    for k, (dv, du) in enumerate(CIRCLE):
        val = padded[vv + r + dv, uu + r + du]
        bright |= (val > center + threshold).astype(np.uint32) << np.uint32(k)
        dark |= (val < center - threshold).astype(np.uint32) << np.uint32(k)
    hit = np.zeros(len(vv), dtype=bool)
    for bits in (bright, dark):
        doubled = bits | (bits << np.uint32(16))
        run = doubled.copy()
        for i in range(1, arc):
            run &= doubled >> np.uint32(i)
        hit |= (run & np.uint32(0xFFFF)) != 0
    out[vv[hit], uu[hit]] = True
    return out


def harris_response(img: np.ndarray, cyclic: bool) -> np.ndarray:
    mode = _modes(cyclic)
    ix = ndimage.sobel(img, axis=1, mode=mode)
    iy = ndimage.sobel(img, axis=0, mode=mode)
    a = ndimage.uniform_filter(ix * ix, HARRIS_BLOCK, mode=mode)
    b = ndimage.uniform_filter(iy * iy, HARRIS_BLOCK, mode=mode)
    c = ndimage.uniform_filter(ix * iy, HARRIS_BLOCK, mode=mode)
    return (a * b - c * c - HARRIS_K * (a + b) ** 2) / (4.0 * 255.0 * HARRIS_BLOCK**2) ** 2


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray, cyclic: bool) -> np.ndarray:
    """Bilinear lookup at real coordinates; u wraps on panoramas, v is clamped."""
    h, w = img.shape
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx = x - x0
    fy = y - y0
    if cyclic:
        xa, xb = np.mod(x0, w), np.mod(x0 + 1, w)
    else:
        xa, xb = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    ya, yb = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    top = img[ya, xa] * (1 - fx) + img[ya, xb] * fx
    bot = img[yb, xa] * (1 - fx) + img[yb, xb] * fx
    return top * (1 - fy) + bot * fy


def _orientation(img: np.ndarray, u: np.ndarray, v: np.ndarray, cyclic: bool) -> np.ndarray:
    """Intensity-centroid angle over a disc centred on the (sub-pixel) keypoint."""
    patch = _bilinear(img, u[:, None] + DISC_DU[None, :], v[:, None] + DISC_DV[None, :], cyclic)
    m10 = patch @ DISC_DU.astype(np.float64)
    m01 = patch @ DISC_DV.astype(np.float64)
    return np.arctan2(m01, m10)


def _describe(smooth: np.ndarray, u: np.ndarray, v: np.ndarray, angle: np.ndarray, cyclic: bool) -> np.ndarray:
    c = np.cos(angle)[:, None]
    s = np.sin(angle)[:, None]
    pu1, pv1, pu2, pv2 = (BRIEF_PATTERN[:, k][None, :] for k in range(4))

    def sample(pu, pv):
        return _bilinear(smooth, u[:, None] + c * pu - s * pv, v[:, None] + s * pu + c * pv, cyclic)

    bits = sample(pu1, pv1) < sample(pu2, pv2)
    return np.packbits(bits, axis=1, bitorder="little")


def detect_and_describe(image: np.ndarray, cfg: FeatureConfig = FeatureConfig(), panoramic: bool = True) -> Features:
    """Detect and describe keypoints on a panorama (or, with ``panoramic=False``, a planar image)."""
    gray = to_gray(image)
    H, W = gray.shape
    if panoramic and W != 2 * H:
        raise FeatureError(f"panoramas need W = 2H, got {W}x{H}")
    border = PATCH_RADIUS + 1
    if min(H, W) < 2 * border + 2 * FAST_RADIUS:
        raise FeatureError(f"image {W}x{H} is too small for the {2 * PATCH_RADIUS + 1}px patch")
    if panoramic and W % cfg.grid_cols:
        raise FeatureError(f"panorama width {W} must be a multiple of grid_cols={cfg.grid_cols}")

    sizes = level_sizes(W, H, cfg, panoramic)
    levels = build_pyramid(gray, sizes, panoramic)
    level_scales = np.array([W / w for w, _ in sizes])
    band_lo = cfg.polar_band * H if panoramic else -np.inf
    band_hi = (1.0 - cfg.polar_band) * H if panoramic else np.inf

    cand_u, cand_v, cand_du, cand_dv, cand_lvl, cand_resp = [], [], [], [], [], []
    for lvl, img in enumerate(levels):
        h, w = img.shape
        if min(h, w if not panoramic else h) < 2 * border + 2:
            continue
        corners = fast_mask(img, cfg.fast_threshold, cyclic=panoramic)
        corners[:border] = False
        corners[h - border :] = False
        if not panoramic:
            corners[:, :border] = False
            corners[:, w - border :] = False
        if not corners.any():
            continue
        resp = harris_response(img, panoramic)
        score = np.where(corners, resp, -np.inf)
        peak = ndimage.maximum_filter(score, size=3, mode=_modes(panoramic))
        keep = corners & (score >= peak)
        vv, uu = np.nonzero(keep)
        v0 = (vv + 0.5) * (H / h) - 0.5
        inside = (v0 >= band_lo) & (v0 <= band_hi)
        vv, uu = vv[inside], uu[inside]
        cand_u.append(uu)
        cand_v.append(vv)
        cand_du.append(_subpixel(resp, uu, vv, axis=1, cyclic=panoramic))
        cand_dv.append(_subpixel(resp, uu, vv, axis=0, cyclic=panoramic))
        cand_lvl.append(np.full(len(uu), lvl))
        cand_resp.append(resp[vv, uu])
    if not cand_u:
        return Features.empty(level_scales)
    uu = np.concatenate(cand_u)
    vv = np.concatenate(cand_v)
    fu = uu + np.concatenate(cand_du)
    fv = vv + np.concatenate(cand_dv)
    lvl = np.concatenate(cand_lvl)
    resp = np.concatenate(cand_resp)
    if len(uu) == 0:
        return Features.empty(level_scales)

    s = level_scales[lvl]
    u0 = np.mod((fu + 0.5) * s - 0.5, W)
    v0 = (fv + 0.5) * s - 0.5
    sel = []
    for level, quota in enumerate(level_budgets(cfg, len(levels))):
        idx = np.flatnonzero(lvl == level)
        if len(idx) and quota:
            sel.append(idx[_bucket(u0[idx], v0[idx], lvl[idx], resp[idx], W, H, cfg, band_lo, band_hi, quota)])
    sel = np.concatenate(sel) if sel else np.zeros(0, dtype=int)
    fu, fv, lvl, resp, u0, v0 = fu[sel], fv[sel], lvl[sel], resp[sel], u0[sel], v0[sel]

    angles = np.zeros(len(fu))
    desc = np.zeros((len(fu), DESCRIPTOR_BYTES), dtype=np.uint8)
    for level in np.unique(lvl):
        m = lvl == level
        img = levels[level]
        angles[m] = _orientation(img, fu[m], fv[m], panoramic)
        smooth = ndimage.gaussian_filter(img, 2.0, mode=_modes(panoramic), truncate=3.5)
        desc[m] = _describe(smooth, fu[m], fv[m], angles[m], panoramic)

    order = np.lexsort((u0, v0, lvl))
    return Features(
        uv=np.stack([u0, v0], axis=1)[order],
        octave=lvl[order],
        response=resp[order],
        angle=angles[order],
        descriptors=desc[order],
        level_scales=level_scales,
    )


def _subpixel(resp: np.ndarray, u: np.ndarray, v: np.ndarray, axis: int, cyclic: bool) -> np.ndarray:
    """Offset in [-0.5, 0.5] of the parabola through the response at a peak and its two neighbors."""
    h, w = resp.shape
    if axis == 1:
        lo = resp[v, np.mod(u - 1, w) if cyclic else np.clip(u - 1, 0, w - 1)]
        hi = resp[v, np.mod(u + 1, w) if cyclic else np.clip(u + 1, 0, w - 1)]
    else:
        lo = resp[np.clip(v - 1, 0, h - 1), u]
        hi = resp[np.clip(v + 1, 0, h - 1), u]
    mid = resp[v, u]
    curv = lo - 2.0 * mid + hi
    off = np.where(curv < 0, 0.5 * (lo - hi) / np.where(curv < 0, curv, -1.0), 0.0)
    return np.clip(off, -0.5, 0.5)


def level_budgets(cfg: FeatureConfig, n_levels: int) -> list[int]:
    """Keypoint budget per pyramid level, decaying geometrically with the level scale."""
    f = 1.0 / cfg.scale_factor
    weights = f ** np.arange(n_levels)
    raw = cfg.n_features * weights / weights.sum()
    out = np.floor(raw).astype(int)
    out[0] += cfg.n_features - out.sum()
    return out.tolist()


def cell_quota(cfg: FeatureConfig, n_active_cells: int, budget: int | None = None) -> int:
    if cfg.cell_quota > 0:
        return cfg.cell_quota
    n = cfg.n_features if budget is None else budget
    return max(1, int(np.ceil(2.0 * n / max(n_active_cells, 1))))


def grid_cells(u0, v0, W: int, H: int, cfg: FeatureConfig) -> np.ndarray:
    cu = np.minimum((np.asarray(u0) * cfg.grid_cols / W).astype(int), cfg.grid_cols - 1)
    cv = np.minimum((np.asarray(v0) * cfg.grid_rows / H).astype(int), cfg.grid_rows - 1)
    return cv * cfg.grid_cols + cu


def _bucket(u0, v0, lvl, resp, W, H, cfg: FeatureConfig, band_lo, band_hi, budget=None) -> np.ndarray:
    """Round-robin selection over grid cells: every cell's best, then every cell's second best, ..."""
    cell = grid_cells(u0, v0, W, H, cfg)
    rows = (np.arange(cfg.grid_rows) + 0.5) * H / cfg.grid_rows
    active = int(np.sum((rows >= band_lo) & (rows <= band_hi))) * cfg.grid_cols
    budget = cfg.n_features if budget is None else budget
    quota = cell_quota(cfg, active, budget)
    # rank within cell by descending response (ties: level, v, u)
    order = np.lexsort((u0, v0, lvl, -resp, cell))
    sorted_cell = cell[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_cell)) + 1]
    rank_sorted = np.arange(len(order)) - np.repeat(starts, np.diff(np.r_[starts, len(order)]))
    rank = np.empty(len(order), dtype=int)
    rank[order] = rank_sorted
    eligible = np.flatnonzero(rank < quota)
    pick = np.lexsort((u0[eligible], v0[eligible], lvl[eligible], -resp[eligible], rank[eligible]))
    return eligible[pick[:budget]]


# ---------------------------------------------------------------------------
# matching


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: int


def hamming_matrix(desc_a: np.ndarray, desc_b: np.ndarray, chunk: int = 512) -> np.ndarray:
    """All-pairs Hamming distances between packed 256-bit descriptors."""
    a = np.ascontiguousarray(desc_a, dtype=np.uint8).view(np.uint64)
    b = np.ascontiguousarray(desc_b, dtype=np.uint8).view(np.uint64)
    out = np.empty((len(a), len(b)), dtype=np.int32)
    for i in range(0, len(a), chunk):
        x = a[i : i + chunk, None, :] ^ b[None, :, :]
        out[i : i + chunk] = np.bitwise_count(x).sum(axis=2, dtype=np.int32)
    return out


def hamming_pairs(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """Row-aligned Hamming distances."""
    a = np.ascontiguousarray(desc_a, dtype=np.uint8).view(np.uint64)
    b = np.ascontiguousarray(desc_b, dtype=np.uint8).view(np.uint64)
    return np.bitwise_count(a ^ b).sum(axis=1, dtype=np.int32)


def match(desc_a: np.ndarray, desc_b: np.ndarray, ratio: float = 0.8, max_distance: int = 64) -> list[Match]:
    """Ratio-tested, mutually consistent nearest-neighbour matching."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    D = hamming_matrix(desc_a, desc_b)
    best_b = np.argmin(D, axis=1)
    d1 = D[np.arange(len(D)), best_b]
    if D.shape[1] > 1:
        d2 = np.partition(D, 1, axis=1)[:, 1].astype(float)
    else:
        d2 = np.full(len(D), np.inf)
    best_a = np.argmin(D, axis=0)
    ok = (d1 < ratio * d2) & (d1 <= max_distance) & (best_a[best_b] == np.arange(len(D)))
    return [Match(int(i), int(best_b[i]), int(d1[i])) for i in np.flatnonzero(ok)]
