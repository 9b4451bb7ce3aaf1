"""CenterPoint-style BEV decoding, circular NMS and the training loss terms.

Decoding finds 3x3 local maxima of the per-class score maps, recovers metric
boxes from the regression maps and tie-breaks deterministically. Circular
NMS keeps a detection iff no already-kept, higher-scoring detection of the
same class sits within a per-class radius of its BEV center.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .geometry import AugTransform, CameraExtrinsics, CameraIntrinsics, ego_to_pixel
from .liftsplat import BEVGridSpec
from .tensor import as_tensor


@dataclass(frozen=True, eq=False)
class HeadOutput:
    """Dense per-cell prediction maps over the BEV grid.

    heatmap holds post-sigmoid scores in [0,1]; offset is in cell fractions,
    height in meters, dims in log-meters (w,l,h), rot as (sin yaw, cos yaw),
    vel in m/s.
    """

    heatmap: np.ndarray  # [num_classes, X, Y]
    offset: np.ndarray  # [2, X, Y]
    height: np.ndarray  # [1, X, Y]
    dims: np.ndarray  # [3, X, Y]
    rot: np.ndarray  # [2, X, Y]
    vel: np.ndarray  # [2, X, Y]

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, as_tensor(getattr(self, f.name)))
        xy = self.heatmap.shape[1:]
        expect = {"offset": 2, "height": 1, "dims": 3, "rot": 2, "vel": 2}
        for name, ch in expect.items():
            arr = getattr(self, name)
            if arr.shape != (ch, *xy):
                raise ShapeMismatchError(f"{name} must be [{ch},{xy[0]},{xy[1]}], got {arr.shape}")
        if np.any(self.heatmap < 0) or np.any(self.heatmap > 1):
            raise ShapeMismatchError("heatmap scores must lie in [0,1]")

    @property
    def num_classes(self) -> int:
        return self.heatmap.shape[0]


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    vx: float
    vy: float
    score: float
    class_id: int

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ShapeMismatchError(f"box dims must be positive: {self.w},{self.l},{self.h}")
        if not 0.0 <= self.score <= 1.0:
            raise ShapeMismatchError(f"score must be in [0,1], got {self.score}")
        yaw = self.yaw
        if not -math.pi < yaw <= math.pi:
            yaw = math.fmod(yaw + math.pi, 2 * math.pi)
            yaw = yaw + 2 * math.pi if yaw <= 0 else yaw
            object.__setattr__(self, "yaw", yaw - math.pi)

    def to_json(self) -> dict:
        return {
            "x": self.x, "y": self.y, "z": self.z,
            "w": self.w, "l": self.l, "h": self.h,
            "yaw": self.yaw, "vx": self.vx, "vy": self.vy,
            "score": self.score, "class_id": self.class_id,
        }


def _local_maxima(hm: np.ndarray) -> np.ndarray:
    """Boolean map of cells >= all 8 neighbors (borders compare available ones)."""
    x, y = hm.shape
    padded = np.full((x + 2, y + 2), -np.inf, dtype=hm.dtype)
    padded[1:-1, 1:-1] = hm
    best = hm.copy()
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                np.maximum(best, padded[1 + di : 1 + di + x, 1 + dj : 1 + dj + y], out=best)
    return hm >= best


def decode(
    out: HeadOutput, grid: BEVGridSpec, top_k: int, score_thresh: float
) -> list[Detection]:
    """Peaks -> boxes. Keeps 3x3 local maxima above threshold, top_k by score.

    Ties are broken by ascending (class, i, j), so output order is unique.
    """
    if out.heatmap.shape[1:] != (grid.nx, grid.ny):
        raise ShapeMismatchError(
            f"head maps are {out.heatmap.shape[1:]}, grid is {(grid.nx, grid.ny)}"
        )
    ks, is_, js = [], [], []
    for k in range(out.num_classes):
        hm = out.heatmap[k]
        peak = _local_maxima(hm) & (hm > score_thresh)
        pi, pj = np.nonzero(peak)
        ks.append(np.full(pi.shape, k))
        is_.append(pi)
        js.append(pj)
    k = np.concatenate(ks)
    i = np.concatenate(is_)
    j = np.concatenate(js)
    if k.size == 0:
        return []
    scores = out.heatmap[k, i, j]
    order = np.lexsort((j, i, k, -scores.astype(np.float64)))[:top_k]

    dets = []
    res = grid.resolution
    for idx in order:
        ki, ii, ji = int(k[idx]), int(i[idx]), int(j[idx])
        dims = np.exp(out.dims[:, ii, ji].astype(np.float64))
        dets.append(
            Detection(
                x=grid.x_min + (ii + 0.5 + float(out.offset[0, ii, ji])) * res,
                y=grid.y_min + (ji + 0.5 + float(out.offset[1, ii, ji])) * res,
                z=float(out.height[0, ii, ji]),
                w=float(dims[0]),
                l=float(dims[1]),
                h=float(dims[2]),
                yaw=math.atan2(float(out.rot[0, ii, ji]), float(out.rot[1, ii, ji])),
                vx=float(out.vel[0, ii, ji]),
                vy=float(out.vel[1, ii, ji]),
                score=float(scores[idx]),
                class_id=ki,
            )
        )
    return dets


def circular_nms(
    dets: Sequence[Detection], radius: Mapping[int, float] | float
) -> list[Detection]:
    """Greedy same-class suppression by BEV center distance.

    Walks detections in descending score (ties by input order) and keeps one
    iff every already-kept detection of its class is at distance >= radius
    for that class. Returns survivors sorted by descending score.
    """
    classes = {d.class_id for d in dets}
    if isinstance(radius, Mapping):
        missing = sorted(c for c in classes if c not in radius)
        if missing:
            raise ConfigError(f"no NMS radius configured for class ids {missing}")
        radii = {c: float(radius[c]) for c in classes}
    else:
        radii = {c: float(radius) for c in classes}
    if any(r <= 0 for r in radii.values()):
        raise ConfigError(f"NMS radii must be positive, got {radii}")

    order = sorted(range(len(dets)), key=lambda idx: (-dets[idx].score, idx))
    kept: list[Detection] = []
    kept_xy: dict[int, list[tuple[float, float]]] = {}
    for idx in order:
        d = dets[idx]
        r2 = radii[d.class_id] ** 2
        close = any(
            (d.x - px) ** 2 + (d.y - py) ** 2 < r2 for px, py in kept_xy.get(d.class_id, ())
        )
        if not close:
            kept.append(d)
            kept_xy.setdefault(d.class_id, []).append((d.x, d.y))
    return kept


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

_CLAMP = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Eq. weights for the total objective plus the positive-count normalizer."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    num_positives: int = 1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.num_positives < 1:
            raise ConfigError(f"normalizer must be >= 1, got {self.num_positives}")


def gaussian_focal_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Penalty-reduced focal loss on a Gaussian-smoothed target heatmap.

    Cells with target exactly 1 are positives; all others are negatives
    down-weighted by (1 - target)^4. Summed, not averaged.
    """
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    p = np.clip(pred.astype(np.float64), _CLAMP, 1.0 - _CLAMP)
    t = target.astype(np.float64)
    pos = t == 1.0
    pos_term = np.where(pos, (1.0 - p) ** 2 * np.log(p), 0.0)
    neg_term = np.where(~pos, (1.0 - t) ** 4 * p**2 * np.log(1.0 - p), 0.0)
    return float(-(pos_term.sum() + neg_term.sum()))


def smooth_l1(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Masked Huber-style sum: 0.5 d^2 below |d| < 1, |d| - 0.5 above."""
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    d = (pred - target).astype(np.float64)
    rho = np.where(np.abs(d) < 1.0, 0.5 * d * d, np.abs(d) - 0.5)
    if mask is not None:
        mask = as_tensor(mask)
        if mask.shape != pred.shape:
            raise ShapeMismatchError(f"mask shape {mask.shape} differs from {pred.shape}")
        rho = rho * mask
    return float(rho.sum())


def total_loss(l_det: float, l_cls: float, l_2d: float, w: LossWeights) -> float:
    """(alpha*l_det + beta*l_cls + gamma*l_2d) / num_positives."""
    return (w.alpha * l_det + w.beta * l_cls + w.gamma * l_2d) / w.num_positives


def box_corners_3d(det: Detection) -> np.ndarray:
    """The eight ego-frame corners [8,3] of an oriented box."""
    dx, dy, dz = det.l / 2.0, det.w / 2.0, det.h / 2.0
    sx = np.array([1, 1, 1, 1, -1, -1, -1, -1], dtype=np.float64)
    sy = np.array([1, 1, -1, -1, 1, 1, -1, -1], dtype=np.float64)
    sz = np.array([1, -1, 1, -1, 1, -1, 1, -1], dtype=np.float64)
    c, s = math.cos(det.yaw), math.sin(det.yaw)
    lx, ly = sx * dx, sy * dy
    return np.stack(
        [det.x + c * lx - s * ly, det.y + s * lx + c * ly, det.z + sz * dz], axis=1
    )


def project_box_corners(
    det: Detection,
    intr: CameraIntrinsics,
    extr: CameraExtrinsics,
    aug: AugTransform,
) -> tuple[np.ndarray, np.ndarray]:
    """Project the box corners into a camera: ([8,2] pixels, [8] depths).

    Used by the 2D localization penalty; corners behind the camera report
    non-positive depth and the caller decides how to mask them.
    """
    corners = box_corners_3d(det)
    uv = np.empty((8, 2))
    depth = np.empty(8)
    for idx, p in enumerate(corners):
        u, v, d = ego_to_pixel(p, intr, extr, aug)
        uv[idx] = (u, v)
        depth[idx] = d
    return uv, depth


def loss_2d(
    pred_corners: np.ndarray, target_corners: np.ndarray, mask: np.ndarray | None = None
) -> float:
    """Smooth-L1 penalty between projected and target pixel corners."""
    return smooth_l1(
        as_tensor(pred_corners), as_tensor(target_corners),
        None if mask is None else as_tensor(mask),
    )


# ---------------------------------------------------------------------------
# JSON-lines serialization
# ---------------------------------------------------------------------------

_DET_KEYS = ("x", "y", "z", "w", "l", "h", "yaw", "vx", "vy", "score", "class_id")


def save_detections_jsonl(dets: Sequence[Detection], path) -> None:
    with open(path, "w") as f:
        for d in dets:
            f.write(json.dumps(d.to_json()) + "\n")


def load_detections_jsonl(path) -> list[Detection]:
    dets = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            dets.append(Detection(**{k: rec[k] for k in _DET_KEYS}))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}:{line_no}: bad detection record: {exc}") from exc
    return dets
