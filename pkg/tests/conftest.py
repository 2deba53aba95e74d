import numpy as np
import pytest

from biloop.geometry import CameraIntrinsics


@pytest.fixture
def intrinsics():
    """640x480 pinhole with a 90-degree horizontal field of view."""
    return CameraIntrinsics(fx=320.0, fy=320.0, cx=320.0, cy=240.0, width=640, height=480)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)
