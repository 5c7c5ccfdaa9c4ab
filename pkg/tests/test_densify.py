import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panoslam.camera import make_intrinsics, pixel_grid_bearings
from panoslam.densify import (
    DensifyConfig,
    DensifyError,
    box_kernel,
    complete_depth,
    densify_multiscale,
    gaussian_kernel,
    guided_refine,
    nconv,
)
from panoslam.sparse_depth import DepthMap

H, W = 64, 128


def _sparse(rng, n, values=None, shape=(H, W)):
    v = np.zeros(shape)
    idx = rng.choice(shape[0] * shape[1], n, replace=False)
    v.flat[idx] = values if values is not None else rng.uniform(1, 20, n)
    return DepthMap.from_array(v)


def test_nconv_all_zero_confidence(rng):
    d = rng.normal(size=(H, W))
    _, c = nconv(d, np.zeros((H, W)), gaussian_kernel())
    assert np.all(c == 0)


def test_nconv_single_seed_box():
    d = np.zeros((9, 16))
    c = np.zeros((9, 16))
    d[4, 7], c[4, 7] = 2.0, 1.0
    out, oc = nconv(d, c, box_kernel(3))
    np.testing.assert_allclose(out[3:6, 6:9], 2.0, atol=1e-11)
    np.testing.assert_allclose(oc[3:6, 6:9], 1 / 9, atol=1e-15)
    assert np.all(oc[:3] == 0) and np.all(oc[:, :6] == 0)


def test_nconv_seam_wraps():
    d = np.zeros((9, 16))
    c = np.zeros((9, 16))
    d[4, 0], c[4, 0] = 2.0, 1.0
    _, oc = nconv(d, c, box_kernel(3))
    assert oc[4, 15] == pytest.approx(1 / 9) and oc[4, 1] == pytest.approx(1 / 9)


def test_kernel_validation():
    with pytest.raises(DensifyError):
        nconv(np.zeros((4, 8)), np.zeros((4, 8)), np.ones((2, 2)))
    with pytest.raises(DensifyError):
        nconv(np.zeros((4, 8)), np.zeros((4, 8)), -np.ones((3, 3)))
    with pytest.raises(DensifyError):
        nconv(np.zeros((4, 8)), np.zeros((4, 9)), np.ones((3, 3)))


def test_constant_preservation_random_patterns(rng):
    for _ in range(50):
        c = (rng.random((H, W)) < rng.uniform(0.001, 0.3)) * rng.uniform(0.01, 1, (H, W))
        d = np.where(c > 0, 3.0, rng.normal(size=(H, W)) * 100)
        k = gaussian_kernel(2 * rng.integers(1, 4) + 1, rng.uniform(0.5, 3))
        out, oc = nconv(d, c, k)
        assert np.abs(out[oc > 0] - 3.0).max() <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 300))
def test_range_closure_and_confidence_bounds(seed, n):
    rng = np.random.default_rng(seed)
    sp = _sparse(rng, n)
    lo, hi = sp.values[sp.valid].min(), sp.values[sp.valid].max()
    cfg = DensifyConfig(refine_passes=1)
    out, oc = nconv(sp.values, sp.valid.astype(float), gaussian_kernel())
    assert np.all((oc >= 0) & (oc <= 1))
    assert np.all(out[oc > 0] >= lo) and np.all(out[oc > 0] <= hi)
    dense, conf = densify_multiscale(sp, cfg)
    assert dense.valid.all()
    assert np.all((conf > 0) & (conf <= 1))
    assert dense.values.min() >= lo and dense.values.max() <= hi
    rgb = rng.integers(0, 256, (H, W, 3)).astype(np.uint8)
    ref = guided_refine(dense, conf, rgb, cfg)
    assert ref.values.min() >= lo and ref.values.max() <= hi


@pytest.mark.parametrize("shape", [(64, 128), (256, 512)])
def test_single_seed_fills_everything(rng, shape):
    sp = _sparse(rng, 1, np.array([7.25]), shape)
    dense, conf = densify_multiscale(sp)
    assert dense.valid.all()
    assert np.abs(dense.values - 7.25).max() <= 1e-9
    assert np.all(conf > 0)


def test_two_hemisphere_samples(rng):
    v = np.zeros((H, W))
    v[H // 2, W // 4] = 5.0
    v[H // 2, 3 * W // 4] = 10.0
    dense, _ = densify_multiscale(DepthMap.from_array(v))
    assert dense.values.min() >= 5.0 and dense.values.max() <= 10.0


def test_zero_samples_rejected():
    with pytest.raises(DensifyError):
        densify_multiscale(DepthMap.empty(H, W))


def test_anchors_override_samples(rng):
    sp = _sparse(rng, 20, np.full(20, 4.0))
    dense, _ = densify_multiscale(sp, anchors=(np.array([10]), np.array([10]), np.array([6.0])))
    assert dense.values.max() > 4.0 and dense.values.max() <= 6.0


def _floor_depth(h, w, height=2.0, radius=20.0):
    """Analytic range to a bounded ground plane z = -height; 0 where the ray misses it."""
    b = pixel_grid_bearings(make_intrinsics(w, h))
    with np.errstate(divide="ignore"):
        t = np.where(b[..., 2] < -1e-9, height / -b[..., 2], 0.0)
    # the floor ends at a finite radius, so range stays bounded near the horizon
    return np.where(t * np.hypot(b[..., 0], b[..., 1]) <= radius, t, 0.0)


@pytest.mark.parametrize("shape", [(128, 256), (256, 512)])
def test_plane_completion_beats_empty_baseline(rng, shape):
    h, w = shape
    truth = _floor_depth(h, w)
    region = truth > 0
    pick = rng.choice(np.flatnonzero(region), 500, replace=False)
    v = np.zeros((h, w))
    v.flat[pick] = truth.flat[pick]
    for dense in (densify_multiscale(DepthMap.from_array(v))[0], complete_depth(DepthMap.from_array(v), np.zeros((h, w, 3), np.uint8))[0]):
        err = np.abs(dense.values - truth)[region].mean()
        baseline = np.abs(truth[region]).mean()
        assert err * 10 <= baseline


def test_guided_refine_identity_cases(rng):
    d = DepthMap(np.full((H, W), 3.7), np.ones((H, W), bool))
    out = guided_refine(d, np.ones((H, W)), np.full((H, W, 3), 120, np.uint8))
    assert np.abs(out.values - 3.7).max() <= 1e-12
    noisy = DepthMap(rng.uniform(1, 5, (H, W)), np.ones((H, W), bool))
    rgb = rng.integers(0, 256, (H, W, 3)).astype(np.uint8)
    same = guided_refine(noisy, np.ones((H, W)), rgb, DensifyConfig(refine_passes=0))
    np.testing.assert_array_equal(same.values, noisy.values)


def test_guided_refine_two_regions(rng):
    rgb = np.zeros((H, W, 3), np.uint8)
    rgb[:, : W // 2] = (200, 40, 40)
    rgb[:, W // 2 :] = (40, 40, 200)
    left = np.zeros((H, W), bool)
    left[:, : W // 2] = True
    truth = np.where(left, 4.0, 9.0)
    noisy = truth * (1 + 0.01 * rng.uniform(-1, 1, (H, W)))
    out = guided_refine(DepthMap(noisy, np.ones((H, W), bool)), np.ones((H, W)), rgb)
    for m in (left, ~left):
        assert out.values[m].var() < noisy[m].var()
    # only the seam columns (u = W/2 and the wrap at u = 0) see the other region
    interior = np.ones(W, bool)
    interior[W // 2 - 8 : W // 2 + 8] = False
    interior[:8] = interior[-8:] = False
    bleed = np.abs(out.values - truth)[:, interior].max()
    smoothing = np.abs(noisy - out.values).mean()
    assert bleed < 0.05
    assert np.abs(out.values - truth)[:, ~interior].max() < 0.05 + 1e-3
    assert smoothing > 0


@pytest.mark.parametrize("k", [8, 24, 64])
def test_seam_shift_equivariance(rng, k):
    sp = _sparse(rng, 200)
    rgb = rng.integers(0, 256, (H, W, 3)).astype(np.uint8)
    a, ca = complete_depth(sp, rgb)
    shifted = DepthMap(np.roll(sp.values, k, axis=1), np.roll(sp.valid, k, axis=1))
    b, cb = complete_depth(shifted, np.roll(rgb, k, axis=1))
    np.testing.assert_array_equal(np.roll(a.values, k, axis=1), b.values)
    np.testing.assert_array_equal(np.roll(ca, k, axis=1), cb)


def test_deterministic(rng):
    sp = _sparse(rng, 100)
    rgb = rng.integers(0, 256, (H, W, 3)).astype(np.uint8)
    a, ca = complete_depth(sp, rgb)
    b, cb = complete_depth(sp, rgb)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(ca, cb)
