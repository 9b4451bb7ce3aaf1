"""Frame buffer eviction, ego-motion warping and the BEV encoder."""

import numpy as np
import pytest

from bevkit import (
    BEVGridSpec,
    ConfigError,
    EgoPose,
    FrameBuffer,
    align_and_concat,
    bev_encoder_forward,
    init_bev_encoder_weights,
    warp_bev,
)
from bevkit.tensor import add, batchnorm_forward, conv2d_forward, relu


@pytest.fixture
def grid():
    return BEVGridSpec(
        x_min=-8.0, x_max=8.0, y_min=-8.0, y_max=8.0, resolution=0.5, z_min=-3.0, z_max=3.0
    )


def bev_like(grid, seed=0, channels=2):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (channels, grid.nx, grid.ny)).astype(np.float32)


class TestFrameBuffer:
    def test_push_into_empty(self, grid):
        buf = FrameBuffer(capacity_seconds=2.0)
        buf.push_frame(0.0, EgoPose(), bev_like(grid))
        assert len(buf) == 1

    def test_eviction_boundary(self, grid):
        buf = FrameBuffer(capacity_seconds=2.0)
        buf.push_frame(0.0, EgoPose(), bev_like(grid))
        buf.push_frame(2.5, EgoPose(), bev_like(grid))
        assert [e.timestamp for e in buf.entries] == [2.5]

    def test_strict_cutoff(self, grid):
        buf = FrameBuffer(capacity_seconds=2.0)
        for t in (0.0, 0.5, 1.0, 1.5, 2.0):
            buf.push_frame(t, EgoPose(), bev_like(grid))
        assert [e.timestamp for e in buf.entries] == [0.5, 1.0, 1.5, 2.0]

    def test_non_monotonic_rejected(self, grid):
        buf = FrameBuffer(capacity_seconds=2.0)
        buf.push_frame(1.0, EgoPose(), bev_like(grid))
        with pytest.raises(ConfigError):
            buf.push_frame(1.0, EgoPose(), bev_like(grid))


class TestWarp:
    def test_identity_warp(self, grid):
        bev = bev_like(grid, seed=1)
        pose = EgoPose(x=3.0, y=-2.0, yaw=0.7)
        out = warp_bev(bev, pose, pose, grid)
        assert np.abs(out - bev).max() <= 1e-6

    def test_one_cell_translation(self, grid):
        bev = bev_like(grid, seed=2)
        out = warp_bev(bev, EgoPose(), EgoPose(x=grid.resolution), grid)
        # ego moved +x by one cell: features shift one cell toward -x
        np.testing.assert_allclose(out[:, :-1, :], bev[:, 1:, :], atol=1e-5)
        np.testing.assert_allclose(out[:, -1, :], 0.0, atol=1e-6)

    def test_yaw_pi_rotates_180(self, grid):
        # impulse pattern; compare interior after a half-turn
        bev = np.zeros((1, grid.nx, grid.ny), np.float32)
        bev[0, 20, 9] = 1.0
        out = warp_bev(bev, EgoPose(), EgoPose(yaw=np.pi), grid)
        want = np.zeros_like(bev)
        want[0, grid.nx - 1 - 20, grid.ny - 1 - 9] = 1.0
        assert np.abs(out - want).max() <= 1e-4

    def test_inverse_consistency_integer_shift(self, grid):
        bev = np.zeros((1, grid.nx, grid.ny), np.float32)
        bev[0, 10:22, 8:25] = np.random.default_rng(3).uniform(
            0, 1, (12, 17)
        ).astype(np.float32)
        a = EgoPose()
        b = EgoPose(x=3 * grid.resolution, y=-2 * grid.resolution)
        back = warp_bev(warp_bev(bev, a, b, grid), b, a, grid)
        interior = (slice(None), slice(4, -4), slice(4, -4))
        assert np.abs(back[interior] - bev[interior]).max() <= 1e-4

    def test_mass_conservation_interior_pattern(self, grid):
        bev = np.zeros((1, grid.nx, grid.ny), np.float32)
        bev[0, 12:20, 12:20] = 1.0
        out = warp_bev(bev, EgoPose(), EgoPose(x=0.3, y=0.2, yaw=0.1), grid)
        assert abs(out.sum() - bev.sum()) / bev.sum() <= 1e-3


class TestAlignAndConcat:
    def test_empty_buffer_zero_padded(self, grid):
        buf = FrameBuffer()
        cur = bev_like(grid, seed=4, channels=3)
        out = align_and_concat(buf, EgoPose(), cur, max_frames=2, grid=grid)
        assert out.shape == (9, grid.nx, grid.ny)
        np.testing.assert_array_equal(out[:3], cur)
        assert not out[3:].any()

    def test_stationary_history_matches_current(self, grid):
        cur = bev_like(grid, seed=5, channels=2)
        buf = FrameBuffer()
        buf.push_frame(0.0, EgoPose(), cur)
        out = align_and_concat(buf, EgoPose(), cur, max_frames=2, grid=grid)
        assert np.abs(out[2:4] - cur).max() <= 1e-6
        assert not out[4:].any()

    def test_one_cell_advance_shifts_history(self, grid):
        past = bev_like(grid, seed=6, channels=1)
        buf = FrameBuffer()
        buf.push_frame(0.0, EgoPose(), past)
        out = align_and_concat(buf, EgoPose(x=grid.resolution), past, max_frames=1, grid=grid)
        want = warp_bev(past, EgoPose(), EgoPose(x=grid.resolution), grid)
        np.testing.assert_array_equal(out[1:], want)
        np.testing.assert_allclose(out[1, :-1, :], past[0, 1:, :], atol=1e-5)

    def test_newest_first_ordering(self, grid):
        buf = FrameBuffer(capacity_seconds=10.0)
        frames = [bev_like(grid, seed=s, channels=1) for s in range(3)]
        for t, f in enumerate(frames):
            buf.push_frame(float(t), EgoPose(), f)
        cur = bev_like(grid, seed=9, channels=1)
        out = align_and_concat(buf, EgoPose(), cur, max_frames=3, grid=grid)
        np.testing.assert_allclose(out[1], frames[2][0], atol=1e-6)
        np.testing.assert_allclose(out[2], frames[1][0], atol=1e-6)
        np.testing.assert_allclose(out[3], frames[0][0], atol=1e-6)

    def test_channel_count_constant(self, grid):
        buf = FrameBuffer()
        cur = bev_like(grid, seed=10, channels=2)
        for history in range(4):
            out = align_and_concat(buf, EgoPose(), cur, max_frames=2, grid=grid)
            assert out.shape[0] == 6
            buf.push_frame(float(history), EgoPose(), cur)


class TestBevEncoder:
    def test_spatial_extents_preserved(self, grid):
        wts = init_bev_encoder_weights(channels=4, seed=0)
        x = bev_like(grid, seed=11, channels=4)
        assert bev_encoder_forward(x, wts).shape == x.shape

    def test_zero_weights_is_relu_of_skip(self, grid):
        from bevkit.pipeline import _zero_encoder

        wts = _zero_encoder(3)
        x = bev_like(grid, seed=12, channels=3) - 0.5
        np.testing.assert_array_equal(bev_encoder_forward(x, wts), np.maximum(x, 0))

    def test_matches_primitive_composition_bit_exactly(self, grid):
        wts = init_bev_encoder_weights(channels=3, seed=13)
        x = bev_like(grid, seed=14, channels=3)

        def block(b, v):
            y = relu(batchnorm_forward(conv2d_forward(v, b.conv1), b.bn1))
            y = batchnorm_forward(conv2d_forward(y, b.conv2), b.bn2)
            return relu(add(y, v))

        want = block(wts.block2, block(wts.block1, x))
        np.testing.assert_array_equal(bev_encoder_forward(x, wts), want)
