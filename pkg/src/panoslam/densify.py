"""Deterministic sparse-to-dense range completion.

Multi-scale normalized convolution propagates values together with a
confidence, then a confidence-weighted cross-bilateral filter guided by the
color panorama sharpens the result along image edges. Columns are cyclic
(the equirectangular seam) and rows clamp at the poles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .sparse_depth import DepthMap

EPS = 1e-12


class DensifyError(ValueError):
    pass


@dataclass(frozen=True)
class DensifyConfig:
    kernel_size: int = 5
    kernel_sigma: float = 1.0
    levels: int = 4
    c_min: float = 1e-3
    max_iters: int = 16
    gamma: float = 0.5
    refine_sigma_s: float = 3.0
    refine_sigma_r: float = 0.1
    refine_passes: int = 2


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    if size % 2 == 0 or size < 1:
        raise DensifyError("kernel size must be odd and positive")
    r = size // 2
    x = np.arange(-r, r + 1, dtype=float)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return np.outer(g, g)


def box_kernel(size: int = 3) -> np.ndarray:
    return np.ones((size, size))


def _check_kernel(kernel: np.ndarray) -> np.ndarray:
    k = np.asarray(kernel, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise DensifyError("kernel must be an odd-sized square array")
    if np.any(k < 0) or k.sum() <= 0:
        raise DensifyError("kernel weights must be non-negative with a positive sum")
    return k


def _correlate_seam(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlation with cyclic columns and clamped rows."""
    r = kernel.shape[0] // 2
    padded = np.pad(x, ((0, 0), (r, r)), mode="wrap")
    padded = np.pad(padded, ((r, r), (0, 0)), mode="edge")
    out = ndimage.correlate(padded, kernel, mode="constant", cval=0.0)
    return out[r : r + x.shape[0], r : r + x.shape[1]]


def nconv(values, conf, kernel, eps: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """One normalized convolution: confidence-weighted mean and propagated confidence.

    By default the mean is an exact division and pixels without any support
    get value 0. A positive ``eps`` (e.g. ``EPS``) is added to the
    denominator instead, which biases weakly supported pixels toward 0 by a
    factor ``den / (den + eps)``.
    """
    d = np.asarray(values, dtype=float)
    c = np.asarray(conf, dtype=float)
    if d.shape != c.shape:
        raise DensifyError(f"value/confidence shapes differ: {d.shape} vs {c.shape}")
    k = _check_kernel(kernel)
    num = _correlate_seam(c * d, k)
    den = _correlate_seam(c, k)
    if eps > 0:
        out_v = num / (den + eps)
    else:
        out_v = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    supported = c > 0
    if supported.any():
        # a weighted mean can overshoot its inputs by rounding; keep closure exact
        out_v = np.where(den > 0, np.clip(out_v, d[supported].min(), d[supported].max()), out_v)
    out_c = den / k.sum()
    return out_v, np.clip(out_c, 0.0, 1.0)


def _nconv_rescaled(values, conf, kernel):
    """Exact-mean nconv on max-normalized confidence, returned at the true scale.

    Confidence propagation is linear, so normalizing only protects against
    underflow after many iterations far from the data.
    """
    top = conf.max()
    d, c = nconv(values, conf / top, kernel, eps=0.0)
    return d, c * top


def _pool2(d: np.ndarray, c: np.ndarray):
    """Confidence-weighted 2x2 pooling; a trailing odd row/column is replicated.

    Pooling keeps the coarse sample centred on its four children, which plain
    decimation would shift by half a fine pixel.
    """
    h, w = d.shape
    if h % 2:
        d, c = np.vstack([d, d[-1:]]), np.vstack([c, c[-1:]])
    if w % 2:
        d, c = np.hstack([d, d[:, -1:]]), np.hstack([c, c[:, -1:]])
    cd = (c * d).reshape(d.shape[0] // 2, 2, d.shape[1] // 2, 2).sum(axis=(1, 3))
    cs = c.reshape(c.shape[0] // 2, 2, c.shape[1] // 2, 2).sum(axis=(1, 3))
    pd = np.divide(cd, cs, out=np.zeros_like(cs), where=cs > 0)
    if np.any(cs > 0):
        pd = np.where(cs > 0, np.clip(pd, d[c > 0].min(), d[c > 0].max()), pd)
    return pd, 0.25 * cs


def _upsample_nearest(x: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    rows = np.minimum(np.arange(shape[0]) // 2, x.shape[0] - 1)
    cols = np.minimum(np.arange(shape[1]) // 2, x.shape[1] - 1)
    return x[rows][:, cols]


def densify_multiscale(
    sparse: DepthMap,
    cfg: DensifyConfig = DensifyConfig(),
    conf=None,
    anchors=None,
) -> tuple[DepthMap, np.ndarray]:
    """Fill a sparse range map.

    ``conf`` optionally gives per-pixel input confidence (defaults to 1 on
    valid pixels). ``anchors`` is an optional ``(rows, cols, values)`` triple
    of extra samples inserted at confidence 1; they overwrite the sparse input.
    Returns the dense map (valid everywhere) and its confidence.
    """
    d0 = np.where(sparse.valid, sparse.values, 0.0)
    c0 = sparse.valid.astype(float) if conf is None else np.where(sparse.valid, np.clip(conf, 0.0, 1.0), 0.0)
    if anchors is not None:
        rows, cols, vals = (np.asarray(a) for a in anchors)
        good = np.isfinite(vals) & (vals > 0)
        d0 = d0.copy()
        c0 = c0.copy()
        d0[rows[good], cols[good]] = vals[good]
        c0[rows[good], cols[good]] = 1.0
    if not np.any(c0 > 0):
        raise DensifyError("no valid samples to densify")
    kernel = gaussian_kernel(cfg.kernel_size, cfg.kernel_sigma)

    # pyramid: nconv then 2x confidence-weighted pooling
    own = []
    d, c = d0, c0
    for _ in range(cfg.levels - 1):
        dv, cv = _nconv_rescaled(d, c, kernel)
        own.append((dv, cv))
        d, c = _pool2(dv, cv)

    # coarsest level: iterate until every confidence clears c_min or the budget runs out
    for _ in range(cfg.max_iters):
        if c.min() > cfg.c_min:
            break
        d, c = _nconv_rescaled(d, c, kernel)
    # sparse inputs can exhaust the budget before every pixel has support; keep spreading
    while np.any(c <= 0):
        d, c = _nconv_rescaled(d, c, kernel)

    # coarse to fine: nearest upsampling, damped confidence, keep the more confident candidate
    for dv, cv in reversed(own):
        up_d = _upsample_nearest(d, dv.shape)
        up_c = cfg.gamma * _upsample_nearest(c, cv.shape)
        take_own = cv >= up_c
        d = np.where(take_own, dv, up_d)
        c = np.where(take_own, cv, up_c)
        # two smoothing passes remove the blocks left by nearest upsampling
        d, c = _nconv_rescaled(*_nconv_rescaled(d, c, kernel), kernel)
    c = np.clip(c, 0.0, 1.0)
    # strictly positive everywhere, even where confidence underflowed
    c = np.maximum(c, np.finfo(float).tiny)
    return DepthMap(d, np.ones_like(d, dtype=bool)), c


def guided_refine(dense: DepthMap, conf: np.ndarray, rgb: np.ndarray, cfg: DensifyConfig = DensifyConfig()) -> DepthMap:
    """Confidence-weighted cross-bilateral passes guided by the color image (RGB in [0, 255])."""
    if cfg.refine_passes <= 0:
        return DepthMap(dense.values.copy(), dense.valid.copy())
    d = np.asarray(dense.values, dtype=np.float64)
    c = np.asarray(conf, dtype=np.float32)
    img = np.asarray(rgb, dtype=np.float32) / np.float32(255.0)
    if img.shape[:2] != d.shape or c.shape != d.shape:
        raise DensifyError("depth, confidence and color dimensions must match")
    h, w = d.shape
    r = int(np.ceil(2.0 * cfg.refine_sigma_s))
    inv_2ss = 1.0 / (2.0 * cfg.refine_sigma_s**2)
    inv_2sr = np.float32(1.0 / (2.0 * cfg.refine_sigma_r**2))

    def pad(x):
        x = np.pad(x, ((0, 0), (r, r)) + ((0, 0),) * (x.ndim - 2), mode="wrap")
        return np.pad(x, ((r, r), (0, 0)) + ((0, 0),) * (x.ndim - 2), mode="edge")

    img_p = pad(img)
    c_p = pad(c)
    valid = dense.valid
    for _ in range(cfg.refine_passes):
        # accumulate offsets from the center pixel so float32 sums stay exact on flat regions
        d32 = np.where(valid, d, 0.0).astype(np.float32)
        d_p = pad(d32)
        cv_p = pad(np.where(valid, c, 0.0).astype(np.float32)) if not valid.all() else c_p
        num = np.zeros((h, w), dtype=np.float32)
        den = np.zeros((h, w), dtype=np.float32)
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                ws = np.float32(np.exp(-(dx * dx + dy * dy) * inv_2ss))
                sl = (slice(r + dy, r + dy + h), slice(r + dx, r + dx + w))
                diff = img_p[sl] - img
                dist = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
                wgt = np.exp(dist * -inv_2sr) * cv_p[sl]
                wgt *= ws
                num += wgt * (d_p[sl] - d32)
                den += wgt
        d = d + np.where(den > 0, num.astype(np.float64) / np.where(den > 0, den, 1.0), 0.0)
    if valid.any():
        d = np.clip(d, dense.values[valid].min(), dense.values[valid].max())
    return DepthMap(np.where(valid, d, 0.0), valid.copy())


def complete_depth(sparse: DepthMap, rgb, cfg: DensifyConfig = DensifyConfig(), conf=None, anchors=None):
    """Multi-scale densification followed by guided refinement."""
    dense, c = densify_multiscale(sparse, cfg, conf=conf, anchors=anchors)
    return guided_refine(dense, c, rgb, cfg), c
