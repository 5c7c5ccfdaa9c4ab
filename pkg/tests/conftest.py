"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import os

import numpy as np
import pytest

from panoslam.dataset import builtin_scene, generate_dataset
from panoslam.geometry import Pose

# the end-to-end sequence used by the acceptance suite
SEQ_FRAMES = 200
SEQ_SIZE = (1024, 512)
SEQ_SEED = 7


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    x, y, z, w = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_pose(rng: np.random.Generator, t_scale: float = 1.0) -> Pose:
    return Pose(random_rotation(rng), rng.normal(size=3) * t_scale)


def forward_bearings(pose: Pose, points_w: np.ndarray) -> np.ndarray:
    """Observed unit bearings of world points: direct application of x_c = R x_w + t."""
    x = np.asarray(points_w, dtype=float) @ pose.R.T + pose.t
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def rotation_distance(Ra: np.ndarray, Rb: np.ndarray) -> float:
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Five 512x256 frames of the built-in scene."""
    out = tmp_path_factory.mktemp("tiny")
    generate_dataset(builtin_scene(seed=SEQ_SEED, frames=5), str(out), size=(512, 256))
    return str(out)


@pytest.fixture(scope="session")
def sequence_dir(tmp_path_factory):
    """The 200-frame 1024x512 synthetic circular sequence.

    Set ``PANOSLAM_SEQUENCE`` to an existing directory produced by
    ``panoslam synth --frames 200 --seed 7`` to skip the ~2 minute render.
    """
    cached = os.environ.get("PANOSLAM_SEQUENCE")
    if cached and os.path.exists(os.path.join(cached, "calib.txt")):
        return cached
    out = tmp_path_factory.mktemp("sequence")
    generate_dataset(builtin_scene(seed=SEQ_SEED, frames=SEQ_FRAMES), str(out), size=SEQ_SIZE)
    return str(out)
