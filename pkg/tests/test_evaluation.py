import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from conftest import random_rotation
from panoslam.evaluation import (
    EvaluationError,
    PairedPositions,
    align,
    associate,
    ate_rmse,
    evaluate,
    scale_factor,
)


def _trajectory(rng, n=50):
    s = np.linspace(0, 2 * np.pi, n)
    return np.stack([5 * np.cos(s), 3 * np.sin(s), 0.5 * np.sin(3 * s)], axis=1) + rng.normal(size=(n, 3)) * 0.05


def _brute_force_rmse(est, gt, mode, rng, restarts=4):
    """Minimize the alignment cost numerically over (log s, rotation vector, t)."""

    def cost(x):
        s = np.exp(x[0]) if mode == "sim3" else 1.0
        R = Rotation.from_rotvec(x[1:4]).as_matrix()
        return np.mean(np.sum((gt - (s * est @ R.T + x[4:])) ** 2, axis=1))

    best = np.inf
    for _ in range(restarts):
        x0 = np.r_[rng.normal() * 0.5, Rotation.from_matrix(random_rotation(rng)).as_rotvec(), gt.mean(0) - est.mean(0)]
        res = minimize(cost, x0, method="BFGS", options={"gtol": 1e-10, "maxiter": 2000})
        best = min(best, res.fun)
    return float(np.sqrt(best))


def test_identity_examples(rng):
    gt = _trajectory(rng)
    for mode in ("se3", "sim3"):
        ate, sf, al = evaluate((gt, gt), mode)
        assert ate == pytest.approx(0.0, abs=1e-12)
        assert sf == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(al.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(al.translation, 0.0, atol=1e-12)


def test_half_scale_gives_two(rng):
    gt = _trajectory(rng)
    al = align((0.5 * gt, gt), "sim3")
    assert al.scale == pytest.approx(2.0, rel=1e-14)
    np.testing.assert_allclose(al.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(al.translation, 0.0, atol=1e-12)
    assert scale_factor((0.5 * gt, gt)) == pytest.approx(2.0, rel=1e-14)
    assert scale_factor((gt / 10, gt)) == pytest.approx(10.0, rel=1e-14)


def test_rotation_and_offset_are_absorbed(rng):
    gt = _trajectory(rng)
    Rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    est = gt @ Rz.T
    al = align((est, gt), "se3")
    np.testing.assert_allclose(al.rotation, Rz.T, atol=1e-12)
    assert ate_rmse((est, gt), al) == pytest.approx(0.0, abs=1e-12)
    est = gt + [1.0, -2.0, 3.0]
    assert evaluate((est, gt), "se3")[0] == pytest.approx(0.0, abs=1e-12)


def test_reflection_is_not_allowed(rng):
    gt = _trajectory(rng)
    mirrored = gt * [1, 1, -1]
    al = align((mirrored, gt), "se3")
    assert np.linalg.det(al.rotation) == pytest.approx(1.0, abs=1e-12)


def test_alignment_matches_brute_force(rng):
    for _ in range(20):
        n = rng.integers(5, 30)
        gt = rng.normal(size=(n, 3)) * rng.uniform(0.5, 5)
        est = rng.uniform(0.2, 3) * gt @ random_rotation(rng).T + rng.normal(size=3) + rng.normal(size=(n, 3)) * 0.3
        for mode in ("se3", "sim3"):
            got = ate_rmse((est, gt), align((est, gt), mode))
            assert got == pytest.approx(_brute_force_rmse(est, gt, mode, rng), abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.floats(0.01, 100))
def test_sim3_dominates_and_scale_equivariance(seed, k):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(20, 3)) * 3
    est = gt @ random_rotation(rng).T * rng.uniform(0.3, 3) + rng.normal(size=(20, 3)) * 0.2
    ate_sim = ate_rmse((est, gt), align((est, gt), "sim3"))
    ate_se = ate_rmse((est, gt), align((est, gt), "se3"))
    assert ate_sim <= ate_se + 1e-12
    s = scale_factor((est, gt))
    assert scale_factor((k * est, gt)) == pytest.approx(s / k, rel=1e-12)


def test_degenerate_inputs(rng):
    p = np.zeros((5, 3))
    with pytest.raises(EvaluationError):
        align((p, p))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(EvaluationError):
        align((line, line))
    # the scale is still defined on a line
    assert scale_factor((line, 3 * line)) == pytest.approx(3.0, rel=1e-12)
    with pytest.raises(EvaluationError):
        align((line[:2], line[:2]))
    with pytest.raises(ValueError):
        align((line, line), "affine")


def test_associate_examples(rng):
    t = np.arange(10) * 0.1
    pos = rng.normal(size=(10, 3))
    full = associate(t, pos, t, pos, 0.01)
    assert isinstance(full, PairedPositions) and len(full) == 10
    np.testing.assert_array_equal(full.est, full.gt)
    half = associate(t + 0.005, pos, t, pos, 0.01)
    assert len(half) == 10
    np.testing.assert_array_equal(half.gt, pos)
    with pytest.raises(EvaluationError):
        associate(t + 5.0, pos, t, pos, 0.01)
    with pytest.raises(EvaluationError):
        associate([], np.zeros((0, 3)), t, pos, 0.01)


def test_associate_uses_each_pose_once():
    gt_t = np.array([0.0, 1.0])
    est_t = np.array([0.1, 0.05, 0.95])
    pairs = associate(est_t, np.eye(3), gt_t, np.zeros((2, 3)), 0.2)
    assert len(pairs) == 2
    np.testing.assert_array_equal(pairs.est_times, [0.05, 0.95])
    np.testing.assert_array_equal(pairs.gt_times, [0.0, 1.0])
