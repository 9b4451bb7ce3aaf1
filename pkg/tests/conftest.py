import numpy as np
import pytest

from bevkit import (
    AugTransform,
    BEVGridSpec,
    CameraExtrinsics,
    CameraIntrinsics,
    CameraRig,
    DepthBinSpec,
    RigCamera,
)


@pytest.fixture
def identity_cam():
    return (
        CameraIntrinsics(fx=500.0, fy=500.0, cx=352.0, cy=128.0),
        CameraExtrinsics.identity(),
        AugTransform.identity(),
    )


@pytest.fixture
def small_grid():
    # 16x16 voxels of 1 m over [-8, 8)
    return BEVGridSpec(
        x_min=-8.0, x_max=8.0, y_min=-8.0, y_max=8.0, resolution=1.0, z_min=-3.0, z_max=3.0
    )


@pytest.fixture
def small_bins():
    return DepthBinSpec(d_min=1.0, d_max=9.0, num_bins=8)


def front_facing_extrinsics(yaw=0.0, tx=0.0, ty=0.0, tz=0.0):
    """Camera->ego rotation for a camera looking along ego +x, yawed by yaw."""
    cam_to_ego = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    c, s = np.cos(yaw), np.sin(yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return CameraExtrinsics(rz @ cam_to_ego, np.array([tx, ty, tz]))


@pytest.fixture
def two_cam_rig():
    intr = CameraIntrinsics(fx=50.0, fy=50.0, cx=32.0, cy=16.0)
    return CameraRig(
        (
            RigCamera("front", intr, front_facing_extrinsics(0.0)),
            RigCamera("back", intr, front_facing_extrinsics(np.pi)),
        )
    )
