"""Six-camera rig model, image augmentation transforms, and 2D->3D unprojection.

Geometry math runs in float64; frustum grids are cast to float32 on output so
they can feed the lookup-table builder. The unprojection carries no learnable
state: a pixel, a depth hypothesis and the camera model fully determine the
ego-frame point.

Conventions (documented so lookup tables are reproducible bit-exactly):
  * pixel-center offset 0.5 for frustum sampling; horizontal flip maps
    u -> (width - 1) - u,
  * camera frame: +x right, +y down, +z along the optical axis,
  * ego frame: +x forward, +y left, +z up,
  * augmentations compose as Crop @ Rotate(center) @ Scale @ Flip, i.e. flip
    is applied first.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GeometryError, SingularTransformError

ROT_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive: fx={self.fx}, fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    """Camera-to-ego pose: ``p_ego = rotation @ p_cam + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if np.abs(r.T @ r - np.eye(3)).max() > ROT_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ROT_TOL:
            raise GeometryError("rotation determinant is not +1")

    @classmethod
    def identity(cls) -> "CameraExtrinsics":
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True, eq=False)
class AugTransform:
    """Homogeneous 3x3 transform from original to augmented pixel coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "matrix", m)
        if not np.array_equal(m[2], [0.0, 0.0, 1.0]):
            raise GeometryError(f"aug bottom row must be [0,0,1], got {m[2]}")
        if abs(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]) <= 1e-9:
            raise SingularTransformError("aug transform is not invertible")

    @classmethod
    def identity(cls) -> "AugTransform":
        return cls(np.eye(3))

    def inverse_matrix(self) -> np.ndarray:
        try:
            return np.linalg.inv(self.matrix)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded above
            raise SingularTransformError(str(exc)) from exc

    def apply(self, u, v):
        m = self.matrix
        return m[0, 0] * u + m[0, 1] * v + m[0, 2], m[1, 0] * u + m[1, 1] * v + m[1, 2]


@dataclass(frozen=True)
class RigCamera:
    name: str
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics


# Canonical camera order for the six-camera setup.
CANONICAL_ORDER = ("front", "front-right", "front-left", "back-right", "back-left", "back")


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[RigCamera, ...]

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.cameras:
            raise ConfigError("rig must contain at least one camera")
        names = [c.name for c in self.cameras]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate camera names in rig: {names}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.cameras)

    def camera(self, name: str) -> RigCamera:
        for c in self.cameras:
            if c.name == name:
                return c
        raise ConfigError(f"unknown camera {name!r}; rig has {self.names}")

    def __iter__(self):
        return iter(self.cameras)

    def __len__(self):
        return len(self.cameras)


@dataclass(frozen=True)
class DepthBinSpec:
    """Uniformly spaced depth hypotheses along each pixel ray."""

    d_min: float = 2.0
    d_max: float = 58.0
    num_bins: int = 112

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ConfigError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if self.num_bins < 1:
            raise ConfigError(f"num_bins must be >= 1, got {self.num_bins}")

    @property
    def bin_width(self) -> float:
        return (self.d_max - self.d_min) / self.num_bins

    def bin_center(self, i: int) -> float:
        return self.d_min + (i + 0.5) * self.bin_width

    def centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.num_bins) + 0.5) * self.bin_width

    def bin_of(self, depth: float) -> int | None:
        """Index of the bin whose interval contains ``depth``, or None."""
        if not (self.d_min <= depth < self.d_max):
            return None
        return min(int((depth - self.d_min) / self.bin_width), self.num_bins - 1)


def compose_aug(
    flip_h: bool,
    scale: float,
    crop_offset: tuple[float, float],
    rotate: float,
    image_size: tuple[int, int],
) -> AugTransform:
    """Compose flip/scale/rotate/crop into one pixel-space transform.

    ``image_size`` is the (width, height) of the image the transform is
    applied to. Flip comes first (u -> width-1-u), then uniform scaling,
    then rotation about the center of the scaled image, then the crop
    translation.
    """
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    w, h = image_size
    flip = np.eye(3)
    if flip_h:
        flip = np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    scale_m = np.diag([float(scale), float(scale), 1.0])
    cu, cv = scale * (w - 1.0) / 2.0, scale * (h - 1.0) / 2.0
    if rotate:
        c, s = math.cos(rotate), math.sin(rotate)
        shift_in = np.array([[1.0, 0.0, -cu], [0.0, 1.0, -cv], [0.0, 0.0, 1.0]])
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        shift_out = np.array([[1.0, 0.0, cu], [0.0, 1.0, cv], [0.0, 0.0, 1.0]])
        rotate_m = shift_out @ rot @ shift_in
    else:
        rotate_m = np.eye(3)
    ou, ov = crop_offset
    crop = np.array([[1.0, 0.0, -float(ou)], [0.0, 1.0, -float(ov)], [0.0, 0.0, 1.0]])
    return AugTransform(crop @ rotate_m @ scale_m @ flip)


def _unproject(u, v, depth, intr: CameraIntrinsics, extr: CameraExtrinsics, aug_inv):
    """Shared elementwise unprojection; ``u``/``v``/``depth`` may be arrays.

    Kept as plain ufunc arithmetic (no matmul) so the scalar and grid paths
    produce bit-identical results.
    """
    u0 = aug_inv[0, 0] * u + aug_inv[0, 1] * v + aug_inv[0, 2]
    v0 = aug_inv[1, 0] * u + aug_inv[1, 1] * v + aug_inv[1, 2]
    xc = depth * ((u0 - intr.cx) / intr.fx)
    yc = depth * ((v0 - intr.cy) / intr.fy)
    zc = depth
    r, t = extr.rotation, extr.translation
    x = r[0, 0] * xc + r[0, 1] * yc + r[0, 2] * zc + t[0]
    y = r[1, 0] * xc + r[1, 1] * yc + r[1, 2] * zc + t[1]
    z = r[2, 0] * xc + r[2, 1] * yc + r[2, 2] * zc + t[2]
    return x, y, z


def pixel_to_ego(
    u: float,
    v: float,
    depth: float,
    intr: CameraIntrinsics,
    extr: CameraExtrinsics,
    aug: AugTransform,
) -> np.ndarray:
    """Ego-frame point of augmented pixel (u, v) at a given camera depth."""
    if not depth > 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    x, y, z = _unproject(float(u), float(v), float(depth), intr, extr, aug.inverse_matrix())
    return np.array([x, y, z])


def ego_to_pixel(
    point,
    intr: CameraIntrinsics,
    extr: CameraExtrinsics,
    aug: AugTransform,
) -> tuple[float, float, float]:
    """Project an ego-frame point; returns (u, v, depth) in augmented pixels.

    ``depth`` is the camera-frame z coordinate; callers must treat
    depth <= 0 as "behind the camera".
    """
    p = np.asarray(point, dtype=np.float64).reshape(3)
    pc = extr.rotation.T @ (p - extr.translation)
    depth = pc[2]
    if depth == 0:
        return math.nan, math.nan, 0.0
    u0 = intr.fx * (pc[0] / depth) + intr.cx
    v0 = intr.fy * (pc[1] / depth) + intr.cy
    u, v = aug.apply(u0, v0)
    return float(u), float(v), float(depth)


def build_frustum(
    feat_h: int,
    feat_w: int,
    downsample: int,
    bins: DepthBinSpec,
    intr: CameraIntrinsics,
    extr: CameraExtrinsics,
    aug: AugTransform,
) -> np.ndarray:
    """Ego-frame point grid [num_bins, feat_h, feat_w, 3] (float32).

    Entry (d, i, j) unprojects the pixel center of feature cell (i, j),
    ((j+0.5)*downsample, (i+0.5)*downsample), at depth ``bin_center(d)``.
    Deterministic; holds no learnable state.
    """
    if downsample < 1:
        raise GeometryError(f"downsample must be >= 1, got {downsample}")
    us = (np.arange(feat_w, dtype=np.float64) + 0.5) * downsample
    vs = (np.arange(feat_h, dtype=np.float64) + 0.5) * downsample
    u = us[None, None, :]
    v = vs[None, :, None]
    d = bins.centers()[:, None, None]
    x, y, z = _unproject(u, v, d, intr, extr, aug.inverse_matrix())
    out = np.empty((bins.num_bins, feat_h, feat_w, 3), dtype=np.float32)
    out[..., 0] = x
    out[..., 1] = y
    out[..., 2] = z
    return out


# ---------------------------------------------------------------------------
# Rig JSON format: [{name, fx, fy, cx, cy, rotation: 9 row-major, translation: 3}]
# ---------------------------------------------------------------------------


def rig_to_json(rig: CameraRig) -> list[dict]:
    return [
        {
            "name": c.name,
            "fx": c.intrinsics.fx,
            "fy": c.intrinsics.fy,
            "cx": c.intrinsics.cx,
            "cy": c.intrinsics.cy,
            "rotation": [float(x) for x in c.extrinsics.rotation.ravel()],
            "translation": [float(x) for x in c.extrinsics.translation],
        }
        for c in rig
    ]


def rig_from_json(records) -> CameraRig:
    cams = []
    for rec in records:
        try:
            cams.append(
                RigCamera(
                    name=rec["name"],
                    intrinsics=CameraIntrinsics(rec["fx"], rec["fy"], rec["cx"], rec["cy"]),
                    extrinsics=CameraExtrinsics(
                        np.array(rec["rotation"], dtype=np.float64).reshape(3, 3),
                        np.array(rec["translation"], dtype=np.float64),
                    ),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad rig camera record {rec!r}: {exc}") from exc
    return CameraRig(tuple(cams))


def save_rig(rig: CameraRig, path) -> None:
    Path(path).write_text(json.dumps(rig_to_json(rig), indent=2) + "\n")


def load_rig(path) -> CameraRig:
    try:
        records = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return rig_from_json(records)


def aug_to_json(aug: AugTransform) -> list[float]:
    """Nine row-major reals."""
    return [float(x) for x in aug.matrix.ravel()]


def aug_from_json(values) -> AugTransform:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != 9:
        raise ConfigError(f"aug transform needs 9 reals, got {arr.size}")
    return AugTransform(arr.reshape(3, 3))
