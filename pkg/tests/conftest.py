import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from geofuse.camgeom import CameraIntrinsics, CameraPose

warnings.filterwarnings("ignore", message="Sparse CSR tensor support is in beta")

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_pose(rng, scale=1.0) -> CameraPose:
    return CameraPose(random_rotation(rng), rng.normal(size=3) * scale)


seeds = st.integers(0, 2**32 - 1)


@pytest.fixture
def small_K():
    return CameraIntrinsics(40.0, 42.0, 15.5, 11.5, 32, 24)
