"""Ego-aligned temporal fusion of historical BEV maps plus the BEV encoder.

History is kept in a time-windowed ring buffer. At fusion time each retained
map is warped from its capture pose into the current ego frame by bilinear
resampling of BEV cell centers, then stacked channel-wise (newest first)
behind the current map; missing history is zero-filled so the channel count
is constant and a fixed-weight encoder can run from the first frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .depthnet import ResidualBlock
from .errors import ConfigError, ShapeMismatchError
from .liftsplat import BEVGridSpec
from .tensor import as_tensor


def normalize_yaw(yaw: float) -> float:
    """Wrap into (-pi, pi]."""
    y = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if y <= 0.0:
        y += 2.0 * math.pi
    return y - math.pi


@dataclass(frozen=True)
class EgoPose:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))


@dataclass(frozen=True, eq=False)
class BufferEntry:
    timestamp: float
    pose: EgoPose
    bev: np.ndarray


@dataclass
class FrameBuffer:
    """Single-writer ring of (timestamp, pose, BEV map) tuples.

    Entries strictly older than ``newest - capacity_seconds`` are evicted on
    every push; timestamps must be strictly increasing.
    """

    capacity_seconds: float = 2.0
    entries: list[BufferEntry] = field(default_factory=list)

    def push_frame(self, t: float, pose: EgoPose, bev: np.ndarray) -> "FrameBuffer":
        if self.entries and t <= self.entries[-1].timestamp:
            raise ConfigError(
                f"timestamps must increase: got {t} after {self.entries[-1].timestamp}"
            )
        self.entries.append(BufferEntry(float(t), pose, as_tensor(bev)))
        cutoff = t - self.capacity_seconds
        self.entries = [e for e in self.entries if e.timestamp > cutoff]
        return self

    def newest_first(self) -> list[BufferEntry]:
        return list(reversed(self.entries))

    def __len__(self):
        return len(self.entries)


def _rot2(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def warp_bev(
    bev: np.ndarray, from_pose: EgoPose, to_pose: EgoPose, grid: BEVGridSpec
) -> np.ndarray:
    """Resample a BEV map captured at ``from_pose`` into ``to_pose``'s frame.

    Every target cell center is carried to the global frame under
    ``to_pose``, mapped into ``from_pose``'s local frame and bilinearly
    sampled from the source; samples outside the grid contribute zero.
    """
    bev = as_tensor(bev)
    nx, ny = grid.nx, grid.ny
    if bev.ndim != 3 or bev.shape[1:] != (nx, ny):
        raise ShapeMismatchError(f"bev must be [C,{nx},{ny}], got {bev.shape}")

    xs = grid.x_min + (np.arange(nx, dtype=np.float64) + 0.5) * grid.resolution
    ys = grid.y_min + (np.arange(ny, dtype=np.float64) + 0.5) * grid.resolution
    gx, gy = np.meshgrid(xs, ys, indexing="ij")

    r_to = _rot2(to_pose.yaw)
    wx = r_to[0, 0] * gx + r_to[0, 1] * gy + to_pose.x
    wy = r_to[1, 0] * gx + r_to[1, 1] * gy + to_pose.y
    r_from = _rot2(from_pose.yaw)
    dx, dy = wx - from_pose.x, wy - from_pose.y
    lx = r_from[0, 0] * dx + r_from[1, 0] * dy  # R^T
    ly = r_from[0, 1] * dx + r_from[1, 1] * dy

    fx = (lx - grid.x_min) / grid.resolution - 0.5
    fy = (ly - grid.y_min) / grid.resolution - 0.5
    i0 = np.floor(fx).astype(np.int64)
    j0 = np.floor(fy).astype(np.int64)
    ti = fx - i0
    tj = fy - j0

    out = np.zeros_like(bev)
    for di, dj, wgt in (
        (0, 0, (1 - ti) * (1 - tj)),
        (1, 0, ti * (1 - tj)),
        (0, 1, (1 - ti) * tj),
        (1, 1, ti * tj),
    ):
        ii, jj = i0 + di, j0 + dj
        ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
        iic = np.clip(ii, 0, nx - 1)
        jjc = np.clip(jj, 0, ny - 1)
        w = np.where(ok, wgt, 0.0).astype(np.float32)
        out += bev[:, iic, jjc] * w[None, :, :]
    return out


def align_and_concat(
    buf: FrameBuffer,
    current_pose: EgoPose,
    current_bev: np.ndarray,
    max_frames: int,
    grid: BEVGridSpec,
) -> np.ndarray:
    """Stack [current, warped history newest->oldest, zero padding] channelwise.

    Output channel count is (1 + max_frames) * C regardless of how much
    history exists, so downstream weights never change shape.
    """
    current_bev = as_tensor(current_bev)
    if max_frames < 0:
        raise ConfigError(f"max_frames must be >= 0, got {max_frames}")
    parts = [current_bev]
    history = buf.newest_first()[:max_frames]
    for entry in history:
        parts.append(warp_bev(entry.bev, entry.pose, current_pose, grid))
    for _ in range(max_frames - len(history)):
        parts.append(np.zeros_like(current_bev))
    return np.concatenate(parts, axis=0)


@dataclass(frozen=True, eq=False)
class BevEncoderWeights:
    block1: ResidualBlock
    block2: ResidualBlock

    def __post_init__(self):
        if self.block1.conv1.in_channels != self.block2.conv1.in_channels:
            raise ShapeMismatchError("encoder blocks disagree on channel width")

    @property
    def channels(self) -> int:
        return self.block1.conv1.in_channels


def bev_encoder_forward(stacked: np.ndarray, wts: BevEncoderWeights) -> np.ndarray:
    """Two residual blocks over the concatenated temporal stack."""
    stacked = as_tensor(stacked)
    if stacked.ndim != 3 or stacked.shape[0] != wts.channels:
        raise ShapeMismatchError(
            f"encoder expects [{wts.channels},X,Y], got {stacked.shape}"
        )
    return wts.block2.forward(wts.block1.forward(stacked))


def init_bev_encoder_weights(channels: int, seed: int) -> BevEncoderWeights:
    from .depthnet import random_residual_block

    rng = np.random.default_rng(seed)
    return BevEncoderWeights(
        block1=random_residual_block(rng, channels),
        block2=random_residual_block(rng, channels),
    )
