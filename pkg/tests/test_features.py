import numpy as np
import pytest

from panoslam.features import (
    CIRCLE,
    FeatureConfig,
    FeatureError,
    detect_and_describe,
    fast_mask,
    grid_cells,
    hamming_matrix,
    hamming_pairs,
    level_budgets,
    match,
)

H, W = 256, 512


def _square_image():
    img = np.full((H, W), 255, np.uint8)
    img[108:148, 236:276] = 0
    return img


def _fast_oracle(img, threshold, arc=9):
    """Segment test evaluated pixel by pixel, columns wrapping."""
    img = img.astype(float)
    h, w = img.shape
    out = np.zeros((h, w), bool)
    for v in range(3, h - 3):
        for u in range(w):
            c = img[v, u]
            ring = np.array([img[v + dv, (u + du) % w] for dv, du in CIRCLE])
            for flags in (ring > c + threshold, ring < c - threshold):
                doubled = np.r_[flags, flags]
                if any(doubled[s : s + arc].all() for s in range(16)):
                    out[v, u] = True
    return out


def _textured(rng, h=H, w=W):
    from scipy import ndimage

    noise = rng.normal(size=(h, w))
    return np.clip(128 + 60 * ndimage.gaussian_filter(noise, 2.0, mode="wrap") / 0.14, 0, 255).astype(np.uint8)


def test_uniform_image_has_no_keypoints():
    assert len(detect_and_describe(np.full((H, W), 128, np.uint8))) == 0


def test_fast_mask_matches_segment_test_oracle(rng):
    img = _square_image()
    np.testing.assert_array_equal(fast_mask(img, 20.0), _fast_oracle(img, 20.0))
    small = _textured(rng, 32, 64)
    np.testing.assert_array_equal(fast_mask(small, 20.0), _fast_oracle(small, 20.0))


def test_black_square_corners():
    f = detect_and_describe(_square_image())
    corners = np.array([[235.5, 107.5], [275.5, 107.5], [235.5, 147.5], [275.5, 147.5]])
    d = np.linalg.norm(f.uv[:, None, :] - corners[None], axis=2)
    near = d.min(axis=1) <= 3.0
    assert near.sum() >= 4
    # every corner is found
    assert np.all(d.min(axis=0) <= 3.0)
    # the oracle agrees that the corners are segment-test corners
    oracle = _fast_oracle(_square_image(), 20.0)
    vv, uu = np.nonzero(oracle)
    od = np.hypot(uu[:, None] - corners[None, :, 0], vv[:, None] - corners[None, :, 1])
    assert np.all(od.min(axis=0) <= 3.0)


def test_too_small_and_bad_shape():
    with pytest.raises(FeatureError):
        detect_and_describe(np.zeros((16, 32), np.uint8))
    with pytest.raises(FeatureError):
        detect_and_describe(np.zeros((256, 256), np.uint8))


def _shift_survival(a, b, k, width):
    D = hamming_matrix(a.descriptors, b.descriptors)
    du = np.abs((b.uv[None, :, 0] - a.uv[:, None, 0] - k + width / 2) % width - width / 2)
    dv = np.abs(b.uv[None, :, 1] - a.uv[:, None, 1])
    same = (du < 1e-6) & (dv < 1e-6) & (a.octave[:, None] == b.octave[None, :])
    return float((same & (D <= 16)).any(axis=1).mean())


@pytest.mark.parametrize("k", [128, 64, -192])
def test_cyclic_shift_survival(rng, k):
    img = _textured(rng)
    a = detect_and_describe(img)
    b = detect_and_describe(np.roll(img, k, axis=1))
    assert len(a) > 500
    assert _shift_survival(a, b, k, W) >= 0.9


def test_deterministic(rng):
    img = _textured(rng)
    a, b = detect_and_describe(img), detect_and_describe(img.copy())
    for x, y in zip(
        (a.uv, a.octave, a.response, a.angle, a.descriptors), (b.uv, b.octave, b.response, b.angle, b.descriptors)
    ):
        np.testing.assert_array_equal(x, y)


def test_keypoint_invariants(rng):
    cfg = FeatureConfig(n_features=1000)
    f = detect_and_describe(_textured(rng), cfg)
    assert 0 < len(f) <= cfg.n_features
    assert np.all((f.octave >= 0) & (f.octave < cfg.n_levels))
    assert np.all((f.uv[:, 0] >= 0) & (f.uv[:, 0] < W))
    # polar band excluded
    assert np.all((f.uv[:, 1] >= cfg.polar_band * H - 1) & (f.uv[:, 1] <= (1 - cfg.polar_band) * H + 1))
    assert f.descriptors.shape == (len(f), 32) and f.descriptors.dtype == np.uint8
    # sorted by level, then v, then u
    keys = np.lexsort((f.uv[:, 0], f.uv[:, 1], f.octave))
    np.testing.assert_array_equal(keys, np.arange(len(f)))


def test_grid_quota_respected(rng):
    cfg = FeatureConfig(n_features=3000, cell_quota=2)
    f = detect_and_describe(_textured(rng), cfg)
    for lvl in np.unique(f.octave):
        m = f.octave == lvl
        counts = np.bincount(grid_cells(f.uv[m, 0], f.uv[m, 1], W, H, cfg))
        assert counts.max() <= cfg.cell_quota


def test_level_budgets_sum():
    for n in (10, 2000, 10001):
        b = level_budgets(FeatureConfig(n_features=n), 8)
        assert sum(b) == n and all(x >= y for x, y in zip(b, b[1:]))


def test_match_examples(rng):
    desc = rng.integers(0, 256, size=(200, 32), dtype=np.uint8)
    m = match(desc, desc, 0.8)
    assert [(x.index_a, x.index_b, x.distance) for x in m] == [(i, i, 0) for i in range(200)]
    other = rng.integers(0, 256, size=(200, 32), dtype=np.uint8)
    assert len(match(desc, other, 0.8, max_distance=50)) <= 2
    assert match(desc, desc[:0]) == [] and match(desc[:0], desc) == []
    with pytest.raises(ValueError):
        match(desc, desc, 0.0)


def test_hamming_against_bit_count(rng):
    a = rng.integers(0, 256, size=(20, 32), dtype=np.uint8)
    b = rng.integers(0, 256, size=(30, 32), dtype=np.uint8)
    ref = np.unpackbits(a[:, None] ^ b[None], axis=2).sum(axis=2)
    np.testing.assert_array_equal(hamming_matrix(a, b), ref)
    np.testing.assert_array_equal(hamming_pairs(a, b[:20]), np.diag(ref[:, :20]))
    assert hamming_matrix(a, ~a).diagonal().tolist() == [256] * 20
