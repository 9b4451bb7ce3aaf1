"""Outer-product lift and lookup-table voxel splat onto the BEV grid.

The expensive part of camera-to-BEV projection is mapping every frustum cell
(camera, depth bin, feature row, feature column) to its BEV voxel. That map
is fixed by the rig, the augmentation and the grid, so it is computed once
(``precompute_lut``) and replayed at frame rate (``splat``).

Determinism: valid frustum cells are stable-sorted by voxel index and each
voxel's run is reduced sequentially in that order, so repeated runs are
bit-identical no matter how work is scheduled. Cameras are flattened in
sorted-name order, which also makes the result invariant to permutations of
the input collection.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, FormatError, ShapeMismatchError, StaleLutError
from .tensor import as_tensor

INVALID_VOXEL = np.uint32(0xFFFFFFFF)
LUT_MAGIC = b"BEVLUT01"
LUT_VERSION = 1


@dataclass(frozen=True)
class BEVGridSpec:
    """Rasterized ground-plane grid plus the accepted height band."""

    x_min: float = -51.2
    x_max: float = 51.2
    y_min: float = -51.2
    y_max: float = 51.2
    resolution: float = 0.8
    z_min: float = -5.0
    z_max: float = 3.0

    def __post_init__(self):
        if self.resolution <= 0:
            raise ConfigError(f"resolution must be positive, got {self.resolution}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.z_min < self.z_max):
            raise ConfigError("grid bounds must be non-empty")
        for lo, hi, axis in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y")):
            n = round((hi - lo) / self.resolution)
            if n < 1 or abs(n * self.resolution - (hi - lo)) > 1e-6:
                raise ConfigError(
                    f"{axis} span {hi - lo} is not a multiple of resolution {self.resolution}"
                )

    @property
    def nx(self) -> int:
        return round((self.x_max - self.x_min) / self.resolution)

    @property
    def ny(self) -> int:
        return round((self.y_max - self.y_min) / self.resolution)

    @property
    def num_voxels(self) -> int:
        return self.nx * self.ny

    def voxel_of(self, x: float, y: float, z: float) -> int | None:
        """Flat voxel index (ix*ny + iy) of a point, or None if outside."""
        if not (
            self.x_min <= x < self.x_max
            and self.y_min <= y < self.y_max
            and self.z_min <= z < self.z_max
        ):
            return None
        ix = min(int((x - self.x_min) / self.resolution), self.nx - 1)
        iy = min(int((y - self.y_min) / self.resolution), self.ny - 1)
        return ix * self.ny + iy

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.x_min + (ix + 0.5) * self.resolution,
            self.y_min + (iy + 0.5) * self.resolution,
        )


@dataclass(frozen=True, eq=False)
class LookupTable:
    """Immutable frustum-cell -> BEV-voxel map with voxel-sorted segments.

    ``flat_voxel_index`` has one entry per frustum cell (cameras flattened in
    ``cam_names`` order, then bins, rows, columns); out-of-grid cells hold
    ``INVALID_VOXEL``. ``sorted_order`` lists the valid cells stably sorted
    by voxel; ``segment_bounds[k]:segment_bounds[k+1]`` is the run of cells
    landing in ``segment_voxels[k]``.
    """

    cam_names: tuple[str, ...] | None
    num_cams: int
    num_bins: int
    feat_h: int
    feat_w: int
    nx: int
    ny: int
    fingerprint: int
    flat_voxel_index: np.ndarray
    sorted_order: np.ndarray
    segment_bounds: np.ndarray
    segment_voxels: np.ndarray
    # derived at build/load time, not serialized: per sorted cell, the row
    # index (cam*feat_h*feat_w + i*feat_w + j) into the stacked pixel table
    sorted_pixel_rows: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.sorted_pixel_rows is None:
            per_cam = self.num_bins * self.feat_h * self.feat_w
            cells = self.sorted_order.astype(np.int64)
            rows = (cells // per_cam) * (self.feat_h * self.feat_w) + (
                cells % (self.feat_h * self.feat_w)
            )
            object.__setattr__(self, "sorted_pixel_rows", rows)

    @property
    def num_cells(self) -> int:
        return self.num_cams * self.num_bins * self.feat_h * self.feat_w

    @property
    def num_valid(self) -> int:
        return int(self.sorted_order.shape[0])

    @property
    def num_segments(self) -> int:
        return int(self.segment_voxels.shape[0])

    def source_shapes(self) -> tuple[int, int, int, int]:
        return self.num_cams, self.num_bins, self.feat_h, self.feat_w

    def voxels_per_camera(self) -> list[np.ndarray]:
        """Sorted unique voxel indices reachable from each camera."""
        per_cam = self.num_bins * self.feat_h * self.feat_w
        out = []
        for c in range(self.num_cams):
            vox = self.flat_voxel_index[c * per_cam : (c + 1) * per_cam]
            out.append(np.unique(vox[vox != INVALID_VOXEL]))
        return out


def _grid_fingerprint_bytes(grid: BEVGridSpec) -> bytes:
    return struct.pack(
        "<7d", grid.x_min, grid.x_max, grid.y_min, grid.y_max,
        grid.resolution, grid.z_min, grid.z_max,
    )


def compute_fingerprint(frustums: Mapping[str, np.ndarray], grid: BEVGridSpec) -> int:
    """64-bit digest of grid parameters, source shapes and frustum geometry.

    The frustum grids are a pure function of rig + augmentation + depth bins,
    so the digest changes whenever any of those change.
    """
    names = sorted(frustums)
    h = hashlib.blake2b(digest_size=8)
    h.update(_grid_fingerprint_bytes(grid))
    for name in names:
        pts = np.ascontiguousarray(frustums[name], dtype=np.float32)
        h.update(name.encode())
        h.update(struct.pack("<4Q", *pts.shape))
        h.update(pts.tobytes())
    return int.from_bytes(h.digest(), "little")


def precompute_lut(frustums: Mapping[str, np.ndarray], grid: BEVGridSpec) -> LookupTable:
    """Bin every frustum point into the BEV grid and index the result.

    Points inside [x_min,x_max) x [y_min,y_max) x [z_min,z_max) map to voxel
    (floor((x-x_min)/res), floor((y-y_min)/res)); all others are INVALID.
    Rebuilding from identical inputs is bit-identical.
    """
    if grid.num_voxels < 1:
        raise ConfigError("grid has no voxels")
    if grid.num_voxels >= int(INVALID_VOXEL):
        raise ConfigError(f"grid with {grid.num_voxels} voxels overflows u32 indexing")
    if not frustums:
        raise ConfigError("need at least one camera frustum")
    names = tuple(sorted(frustums))
    shapes = {np.asarray(frustums[n]).shape for n in names}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"frustum shapes disagree across cameras: {shapes}")
    shape = shapes.pop()
    if len(shape) != 4 or shape[3] != 3:
        raise ShapeMismatchError(f"frustums must be [bins,h,w,3], got {shape}")
    bins, fh, fw, _ = shape

    pts = np.stack([np.asarray(frustums[n], dtype=np.float64) for n in names])
    pts = pts.reshape(-1, 3)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    inside = (
        (x >= grid.x_min) & (x < grid.x_max)
        & (y >= grid.y_min) & (y < grid.y_max)
        & (z >= grid.z_min) & (z < grid.z_max)
    )
    ix = np.floor((x - grid.x_min) / grid.resolution).astype(np.int64)
    iy = np.floor((y - grid.y_min) / grid.resolution).astype(np.int64)
    # points epsilon-close to the upper bound can floor onto the edge cell
    np.clip(ix, 0, grid.nx - 1, out=ix)
    np.clip(iy, 0, grid.ny - 1, out=iy)
    flat = (ix * grid.ny + iy).astype(np.uint32)
    flat_voxel = np.where(inside, flat, INVALID_VOXEL)

    valid_cells = np.flatnonzero(inside).astype(np.uint32)
    valid_vox = flat[inside]
    order = np.argsort(valid_vox, kind="stable")
    sorted_order = valid_cells[order]
    sorted_vox = valid_vox[order]
    if sorted_vox.size:
        seg_voxels, starts = np.unique(sorted_vox, return_index=True)
        bounds = np.append(starts, sorted_vox.size).astype(np.uint32)
    else:
        seg_voxels = np.empty(0, dtype=np.uint32)
        bounds = np.zeros(1, dtype=np.uint32)

    return LookupTable(
        cam_names=names,
        num_cams=len(names),
        num_bins=bins,
        feat_h=fh,
        feat_w=fw,
        nx=grid.nx,
        ny=grid.ny,
        fingerprint=compute_fingerprint(frustums, grid),
        flat_voxel_index=flat_voxel,
        sorted_order=sorted_order,
        segment_bounds=bounds,
        segment_voxels=seg_voxels.astype(np.uint32),
    )


def validate_depth_distribution(probs: np.ndarray, tol: float = 1e-5) -> np.ndarray:
    """Check a [bins, h, w] array is a per-pixel probability simplex."""
    probs = as_tensor(probs)
    if probs.ndim != 3:
        raise ShapeMismatchError(f"depth distribution must be [bins,h,w], got {probs.shape}")
    if np.any(probs < 0):
        raise ShapeMismatchError("depth distribution has negative entries")
    sums = probs.sum(axis=0)
    if np.abs(sums - 1.0).max() > tol:
        raise ShapeMismatchError(
            f"depth distribution columns must sum to 1 (worst |err|={np.abs(sums - 1.0).max():.2e})"
        )
    return probs


def lift(features: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Outer product out[d,c,i,j] = depth[d,i,j] * features[c,i,j]."""
    features = as_tensor(features)
    depth = as_tensor(depth)
    if features.ndim != 3 or depth.ndim != 3 or features.shape[1:] != depth.shape[1:]:
        raise ShapeMismatchError(
            f"lift: features {features.shape} and depth {depth.shape} spatial shapes differ"
        )
    return depth[:, None, :, :] * features[None, :, :, :]


def fuse_depth(predicted: np.ndarray, geometric: np.ndarray, w: float) -> np.ndarray:
    """Blend two depth distributions, w on predicted, and renormalize."""
    if not 0.0 <= w <= 1.0:
        raise ConfigError(f"fusion weight must be in [0,1], got {w}")
    predicted = as_tensor(predicted)
    geometric = as_tensor(geometric)
    if predicted.shape != geometric.shape:
        raise ShapeMismatchError(
            f"fuse_depth: shapes {predicted.shape} and {geometric.shape} differ"
        )
    mixed = np.float32(w) * predicted + np.float32(1.0 - w) * geometric
    return mixed / mixed.sum(axis=0, keepdims=True)


def splat(
    features: Mapping[str, np.ndarray],
    depths: Mapping[str, np.ndarray],
    lut: LookupTable,
    grid: BEVGridSpec,
    expected_fingerprint: int | None = None,
) -> np.ndarray:
    """Scatter-accumulate depth-weighted features into the BEV grid [C,nx,ny].

    Each valid frustum cell (cam, d, i, j) adds depth[cam][d,i,j] *
    features[cam][:,i,j] to its voxel; accumulation follows the table's
    voxel-sorted cell order, so results are bit-reproducible.
    """
    if expected_fingerprint is not None and lut.fingerprint != expected_fingerprint:
        raise StaleLutError(
            f"lookup table fingerprint {lut.fingerprint:#018x} does not match "
            f"expected {expected_fingerprint:#018x}; rebuild the table"
        )
    if grid.nx != lut.nx or grid.ny != lut.ny:
        raise StaleLutError(
            f"grid is {grid.nx}x{grid.ny} but table was built for {lut.nx}x{lut.ny}"
        )
    if set(features) != set(depths):
        raise ShapeMismatchError("features and depths name different cameras")
    order = lut.cam_names if lut.cam_names is not None else tuple(sorted(features))
    if set(order) != set(features):
        raise StaleLutError(
            f"table was built for cameras {order}, got {tuple(sorted(features))}"
        )
    cams, bins, fh, fw = lut.source_shapes()

    feats, deps = [], []
    for name in order:
        f = as_tensor(features[name])
        d = as_tensor(depths[name])
        if f.ndim != 3 or f.shape[1:] != (fh, fw):
            raise StaleLutError(f"{name}: features {f.shape} do not match table {fh}x{fw}")
        if d.shape != (bins, fh, fw):
            raise StaleLutError(
                f"{name}: depth {d.shape} does not match table ({bins},{fh},{fw})"
            )
        feats.append(f)
        deps.append(d)
    channels = feats[0].shape[0]
    if any(f.shape[0] != channels for f in feats):
        raise ShapeMismatchError("feature channel counts differ across cameras")

    out = np.zeros((channels, grid.nx * grid.ny), dtype=np.float32)
    if lut.num_valid:
        weights = np.concatenate([d.ravel() for d in deps])
        # per-pixel feature rows, [cams*fh*fw, C]
        pix = np.stack(feats).reshape(cams, channels, fh * fw)
        pix = np.ascontiguousarray(pix.transpose(0, 2, 1)).reshape(cams * fh * fw, channels)
        vals = np.take(pix, lut.sorted_pixel_rows, axis=0)
        vals *= weights[lut.sorted_order.astype(np.int64)][:, None]
        sums = np.add.reduceat(vals, lut.segment_bounds[:-1].astype(np.int64), axis=0)
        out[:, lut.segment_voxels.astype(np.int64)] = sums.T
    return out.reshape(channels, grid.nx, grid.ny)


# ---------------------------------------------------------------------------
# LUT binary format: magic | u32 version | 6 x u32 (cams,bins,h,w,X,Y) |
# u64 fingerprint | u64 valid count | count x (u32 cell, u32 voxel) |
# u32 segment count | (count+1) x u32 offsets. Little-endian throughout.
# ---------------------------------------------------------------------------


def lut_save(lut: LookupTable, path) -> None:
    with open(path, "wb") as f:
        f.write(LUT_MAGIC)
        f.write(struct.pack("<I", LUT_VERSION))
        f.write(
            struct.pack(
                "<6I", lut.num_cams, lut.num_bins, lut.feat_h, lut.feat_w, lut.nx, lut.ny
            )
        )
        f.write(struct.pack("<QQ", lut.fingerprint, lut.num_valid))
        pairs = np.empty((lut.num_valid, 2), dtype="<u4")
        pairs[:, 0] = lut.sorted_order
        pairs[:, 1] = lut.flat_voxel_index[lut.sorted_order.astype(np.int64)]
        f.write(pairs.tobytes())
        f.write(struct.pack("<I", lut.num_segments))
        f.write(lut.segment_bounds.astype("<u4").tobytes())


def lut_load(path) -> LookupTable:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:8] != LUT_MAGIC:
        raise FormatError(f"{path}: not a lookup table file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != LUT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(data) < 52:
        raise FormatError(f"{path}: truncated header")
    cams, bins, fh, fw, nx, ny = struct.unpack_from("<6I", data, 12)
    fingerprint, valid = struct.unpack_from("<QQ", data, 36)
    off = 52
    need = off + valid * 8 + 4
    if len(data) < need:
        raise FormatError(f"{path}: truncated cell/voxel pairs")
    pairs = np.frombuffer(data, dtype="<u4", offset=off, count=valid * 2).reshape(valid, 2)
    off += valid * 8
    (nseg,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) != off + (nseg + 1) * 4:
        raise FormatError(f"{path}: truncated segment table")
    bounds = np.frombuffer(data, dtype="<u4", offset=off, count=nseg + 1).copy()

    num_cells = cams * bins * fh * fw
    flat_voxel = np.full(num_cells, INVALID_VOXEL, dtype=np.uint32)
    sorted_order = pairs[:, 0].copy()
    vox = pairs[:, 1]
    if np.any(vox >= nx * ny) or np.any(sorted_order >= num_cells):
        raise FormatError(f"{path}: index out of range")
    flat_voxel[sorted_order.astype(np.int64)] = vox
    seg_voxels = (
        vox[bounds[:-1].astype(np.int64)].copy() if nseg else np.empty(0, dtype=np.uint32)
    )
    return LookupTable(
        cam_names=None,
        num_cams=cams,
        num_bins=bins,
        feat_h=fh,
        feat_w=fw,
        nx=nx,
        ny=ny,
        fingerprint=fingerprint,
        flat_voxel_index=flat_voxel,
        sorted_order=sorted_order,
        segment_bounds=bounds,
        segment_voxels=seg_voxels,
    )


def lut_equal(a: LookupTable, b: LookupTable) -> bool:
    """Structural equality on everything the file format stores."""
    return (
        a.source_shapes() == b.source_shapes()
        and (a.nx, a.ny) == (b.nx, b.ny)
        and a.fingerprint == b.fingerprint
        and np.array_equal(a.flat_voxel_index, b.flat_voxel_index)
        and np.array_equal(a.sorted_order, b.sorted_order)
        and np.array_equal(a.segment_bounds, b.segment_bounds)
        and np.array_equal(a.segment_voxels, b.segment_voxels)
    )
