from __future__ import annotations

import numpy as np
import pytest

from voxelcap.geometry import CameraModel, CameraRig
from voxelcap.synth import RigSpec, build_ring_rig


def identity_camera(width=640, height=480, cam_id=0):
    return CameraModel(np.hstack([np.eye(3), np.zeros((3, 1))]), width, height, cam_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ring4() -> CameraRig:
    return build_ring_rig(RigSpec(4, 3000.0, 300.0, 320, 240, camera_height=1500.0, look_at=(0.0, 0.0, 1000.0)))


@pytest.fixture(scope="session")
def ring8() -> CameraRig:
    return build_ring_rig(RigSpec(8, 3000.0, 400.0, 320, 240, camera_height=1000.0, look_at=(0.0, 0.0, 1000.0)))
