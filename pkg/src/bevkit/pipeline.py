"""End-to-end orchestration and the synthetic desk-scale scene generator.

Stage order per frame: backbone -> camera-conditioned depth -> depth fusion
-> lookup-table splat -> temporal alignment -> BEV encoder -> detection head
-> decode -> circular NMS. Frames are processed sequentially because the
temporal buffer is stateful; per-camera work inside a frame may fan out to
the worker pool (BEVKIT_THREADS).

Everything is driven by a single JSON config with explicit version and
fail-fast rejection of unknown keys, and everything downstream of one seed
is bit-reproducible.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .analysis import FlopsReport, count_module_flops, worker_count
from .depthnet import (
    DepthHeadWeights,
    depth_head_forward,
    encode_camera_params,
    init_depth_head_weights,
    zero_logits_depth_head,
)
from .errors import ConfigError, ShapeMismatchError, StaleLutError
from .geometry import (
    CameraExtrinsics,
    CameraIntrinsics,
    CameraRig,
    DepthBinSpec,
    RigCamera,
    build_frustum,
    compose_aug,
    ego_to_pixel,
    load_rig,
)
from .head import Detection, HeadOutput, circular_nms, decode
from .liftsplat import (
    BEVGridSpec,
    LookupTable,
    compute_fingerprint,
    fuse_depth,
    precompute_lut,
    splat,
)
from .reparam import (
    BranchBlock,
    GraphDesc,
    forward_block,
    forward_graph,
    identity_to_conv,
)
from .tensor import (
    BatchNormSpec,
    ConvSpec,
    as_tensor,
    batchnorm_forward,
    conv2d_forward,
    relu,
)
from .temporal import (
    BevEncoderWeights,
    EgoPose,
    FrameBuffer,
    bev_encoder_forward,
    align_and_concat,
    init_bev_encoder_weights,
)

TASKS = ("heatmap", "offset", "height", "dims", "rot", "vel")
# identity-weight heatmap: class-0 score = sigmoid(gain * mean-per-channel
# BEV mass + bias), normalized by channel count so behavior is config-free
HEATMAP_IDENTITY_GAIN = 1.6
HEATMAP_IDENTITY_BIAS = -3.0


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugSettings:
    flip_h: bool = False
    scale: float = 1.0
    crop_offset: tuple[float, float] = (0.0, 0.0)
    rotate: float = 0.0


@dataclass(frozen=True)
class PipelineConfig:
    rig_path: str
    grid: BEVGridSpec = BEVGridSpec()
    depth_bins: DepthBinSpec = DepthBinSpec()
    image_size: tuple[int, int] = (704, 256)
    aug: AugSettings = AugSettings()
    feature_downsample: int = 4
    channels: int = 32
    num_classes: int = 3
    depth_fusion_weight: float = 0.5
    temporal_window_seconds: float = 2.0
    temporal_max_frames: int = 4
    loss_alpha: float = 1.0
    loss_beta: float = 1.0
    loss_gamma: float = 1.0
    nms_radii: dict = field(default_factory=lambda: {0: 4.0, 1: 0.5, 2: 1.0})
    score_threshold: float = 0.3
    top_k: int = 100
    seed: int = 0
    weights: str = "identity"

    def __post_init__(self):
        if self.weights not in ("identity", "random"):
            raise ConfigError(f"weights must be 'identity' or 'random', got {self.weights!r}")
        if not 0.0 <= self.depth_fusion_weight <= 1.0:
            raise ConfigError(
                f"depth_fusion_weight must be in [0,1], got {self.depth_fusion_weight}"
            )
        if self.feature_downsample < 1 or self.channels < 1 or self.num_classes < 1:
            raise ConfigError("feature_downsample, channels, num_classes must be >= 1")
        if self.temporal_max_frames < 0 or self.top_k < 1:
            raise ConfigError("temporal_max_frames must be >= 0 and top_k >= 1")

    @property
    def input_size(self) -> tuple[int, int]:
        """(width, height) of the augmented network input."""
        w, h = self.image_size
        return int(round(w * self.aug.scale)), int(round(h * self.aug.scale))

    @property
    def feature_size(self) -> tuple[int, int]:
        """(feat_h, feat_w) of the backbone output."""
        w, h = self.input_size
        return h // self.feature_downsample, w // self.feature_downsample

    @property
    def stacked_channels(self) -> int:
        return self.channels * (1 + self.temporal_max_frames)


def _take(d: dict, known: dict, where: str) -> dict:
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {sorted(unknown)}")
    out = dict(known)
    out.update(d)
    return out


def config_from_json(doc: dict, base: Path | None = None) -> PipelineConfig:
    if doc.get("version") != 1:
        raise ConfigError(f"unsupported config version {doc.get('version')!r}")
    top = _take(
        doc,
        {
            "version": 1,
            "rig": None,
            "grid": {},
            "depth_bins": {},
            "image_size": [704, 256],
            "aug": {},
            "feature_downsample": 4,
            "channels": 32,
            "num_classes": 3,
            "depth_fusion_weight": 0.5,
            "temporal": {},
            "loss": {},
            "nms_radii": {"0": 4.0, "1": 0.5, "2": 1.0},
            "score_threshold": 0.3,
            "top_k": 100,
            "seed": 0,
            "weights": "identity",
        },
        "config",
    )
    if not top["rig"]:
        raise ConfigError("config is missing the rig file path")
    grid = _take(
        top["grid"],
        {"x_min": -51.2, "x_max": 51.2, "y_min": -51.2, "y_max": 51.2,
         "resolution": 0.8, "z_min": -5.0, "z_max": 3.0},
        "grid",
    )
    bins = _take(top["depth_bins"], {"d_min": 2.0, "d_max": 58.0, "num_bins": 112}, "depth_bins")
    aug = _take(
        top["aug"],
        {"flip_h": False, "scale": 1.0, "crop_offset": [0.0, 0.0], "rotate": 0.0},
        "aug",
    )
    temporal = _take(top["temporal"], {"window_seconds": 2.0, "max_frames": 4}, "temporal")
    loss = _take(top["loss"], {"alpha": 1.0, "beta": 1.0, "gamma": 1.0}, "loss")
    try:
        radii = {int(k): float(v) for k, v in top["nms_radii"].items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"nms_radii must map class ids to radii: {exc}") from exc
    rig_path = top["rig"]
    if base is not None and not Path(rig_path).is_absolute():
        rig_path = str(base / rig_path)
    return PipelineConfig(
        rig_path=rig_path,
        grid=BEVGridSpec(**grid),
        depth_bins=DepthBinSpec(**bins),
        image_size=tuple(top["image_size"]),
        aug=AugSettings(
            flip_h=bool(aug["flip_h"]),
            scale=float(aug["scale"]),
            crop_offset=tuple(aug["crop_offset"]),
            rotate=float(aug["rotate"]),
        ),
        feature_downsample=int(top["feature_downsample"]),
        channels=int(top["channels"]),
        num_classes=int(top["num_classes"]),
        depth_fusion_weight=float(top["depth_fusion_weight"]),
        temporal_window_seconds=float(temporal["window_seconds"]),
        temporal_max_frames=int(temporal["max_frames"]),
        loss_alpha=float(loss["alpha"]),
        loss_beta=float(loss["beta"]),
        loss_gamma=float(loss["gamma"]),
        nms_radii=radii,
        score_threshold=float(top["score_threshold"]),
        top_k=int(top["top_k"]),
        seed=int(top["seed"]),
        weights=top["weights"],
    )


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    return config_from_json(doc, base=path.parent)


def make_default_rig(
    image_size: tuple[int, int] = (704, 256),
    focal: float = 450.0,
    ring_radius: float = 1.2,
    height: float = 1.5,
) -> CameraRig:
    """Six-camera surround rig with overlapping horizontal coverage."""
    w, h = image_size
    intr = CameraIntrinsics(fx=focal, fy=focal, cx=w / 2.0, cy=h / 2.0)
    # camera frame (+x right, +y down, +z forward) to ego (+x fwd, +y left, +z up)
    cam_to_ego = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    cams = []
    for name, yaw_deg in (
        ("front", 0.0),
        ("front-right", -55.0),
        ("front-left", 55.0),
        ("back-right", -125.0),
        ("back-left", 125.0),
        ("back", 180.0),
    ):
        yaw = math.radians(yaw_deg)
        c, s = math.cos(yaw), math.sin(yaw)
        rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        t = np.array([ring_radius * c, ring_radius * s, height])
        cams.append(RigCamera(name, intr, CameraExtrinsics(rz @ cam_to_ego, t)))
    return CameraRig(tuple(cams))


# ---------------------------------------------------------------------------
# Toy network weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BackboneWeights:
    """Three conv-BN-relu stages; the first two downsample by 2."""

    stages: tuple[tuple[ConvSpec, BatchNormSpec], ...]

    def forward(self, image: np.ndarray) -> np.ndarray:
        x = as_tensor(image)
        for conv, bn in self.stages:
            x = relu(batchnorm_forward(conv2d_forward(x, conv), bn))
        return x


@dataclass(frozen=True, eq=False)
class HeadWeights:
    """Shared multi-branch trunk plus one 3x3 block and 1x1 out per task."""

    trunk: GraphDesc
    task_blocks: tuple[tuple[str, BranchBlock], ...]
    outs: tuple[tuple[str, ConvSpec], ...]

    def out_conv(self, name: str) -> ConvSpec:
        return dict(self.outs)[name]


@dataclass(frozen=True, eq=False)
class ToyWeights:
    backbone: BackboneWeights
    depth_head: DepthHeadWeights
    bev_encoder: BevEncoderWeights
    head: HeadWeights


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.float32(1.0) / (np.float32(1.0) + np.exp(-x))


def head_forward(encoded: np.ndarray, weights: HeadWeights) -> HeadOutput:
    t = forward_graph(weights.trunk, encoded)
    maps = {}
    for name, block in weights.task_blocks:
        maps[name] = conv2d_forward(forward_block(block, t), weights.out_conv(name))
    return HeadOutput(
        heatmap=_sigmoid(maps["heatmap"]),
        offset=maps["offset"],
        height=maps["height"],
        dims=maps["dims"],
        rot=maps["rot"],
        vel=maps["vel"],
    )


def _strided_identity_conv(channels: int, stride: int) -> ConvSpec:
    base = identity_to_conv(channels, 3)
    return ConvSpec(base.weights, base.bias, stride=(stride, stride), padding=(1, 1))


def _task_channels(num_classes: int) -> tuple[tuple[str, int], ...]:
    return (
        ("heatmap", num_classes),
        ("offset", 2),
        ("height", 1),
        ("dims", 3),
        ("rot", 2),
        ("vel", 2),
    )


def build_identity_weights(cfg: PipelineConfig) -> ToyWeights:
    """Weights that pass features through unchanged (uniform depth, zero
    regressions, heatmap = sigmoid of summed channel mass)."""
    c = cfg.channels
    s = cfg.stacked_channels
    backbone = BackboneWeights(
        stages=tuple(
            (_strided_identity_conv(c, st), BatchNormSpec.identity(c))
            for st in (2, 2, 1)
        )
    )
    trunk = GraphDesc(
        input_channels=s,
        blocks=tuple(BranchBlock.plain(identity_to_conv(s, 3)) for _ in range(2)),
    )
    task_blocks = tuple(
        (name, BranchBlock.plain(identity_to_conv(s, 3))) for name, _ in _task_channels(cfg.num_classes)
    )
    outs = []
    for name, ch in _task_channels(cfg.num_classes):
        w = np.zeros((ch, s, 1, 1), dtype=np.float32)
        b = np.zeros(ch, dtype=np.float32)
        if name == "heatmap":
            # only class 0 responds
            w[0, :, 0, 0] = HEATMAP_IDENTITY_GAIN / cfg.channels
            b[:] = HEATMAP_IDENTITY_BIAS
        outs.append((name, ConvSpec(w, b)))
    return ToyWeights(
        backbone=backbone,
        depth_head=zero_logits_depth_head(c, cfg.depth_bins.num_bins, seed=cfg.seed),
        bev_encoder=_zero_encoder(s),
        head=HeadWeights(trunk=trunk, task_blocks=task_blocks, outs=tuple(outs)),
    )


def _zero_encoder(channels: int) -> BevEncoderWeights:
    from .depthnet import ResidualBlock

    def zero_block():
        zconv = ConvSpec(
            np.zeros((channels, channels, 3, 3), dtype=np.float32),
            np.zeros(channels, dtype=np.float32),
            padding=(1, 1),
        )
        return ResidualBlock(
            conv1=zconv, bn1=BatchNormSpec.identity(channels),
            conv2=zconv, bn2=BatchNormSpec.identity(channels),
        )

    return BevEncoderWeights(block1=zero_block(), block2=zero_block())


def _rand_conv(rng, out_ch, in_ch, k, stride=1, scale=0.1) -> ConvSpec:
    return ConvSpec(
        rng.uniform(-scale, scale, (out_ch, in_ch, k, k)).astype(np.float32),
        rng.uniform(-scale, scale, out_ch).astype(np.float32),
        stride=(stride, stride),
        padding=(k // 2, k // 2),
    )


def _rand_bn(rng, ch) -> BatchNormSpec:
    return BatchNormSpec(
        mean=rng.uniform(-0.1, 0.1, ch).astype(np.float32),
        var=rng.uniform(0.5, 1.5, ch).astype(np.float32),
        gamma=rng.uniform(0.9, 1.1, ch).astype(np.float32),
        beta=rng.uniform(-0.1, 0.1, ch).astype(np.float32),
        eps=1e-5,
    )


def _rand_branch_block(rng, ch, activation="relu") -> BranchBlock:
    return BranchBlock(
        main_conv=_rand_conv(rng, ch, ch, 3),
        main_bn=_rand_bn(rng, ch),
        one_by_one_conv=_rand_conv(rng, ch, ch, 1),
        one_by_one_bn=_rand_bn(rng, ch),
        identity_bn=_rand_bn(rng, ch),
        activation=activation,
    )


def build_random_weights(cfg: PipelineConfig) -> ToyWeights:
    """Seeded random weights with the same shapes as the identity variant."""
    rng = np.random.default_rng(cfg.seed)
    c = cfg.channels
    s = cfg.stacked_channels
    widths = (c, 2 * c, 2 * c, c)
    backbone = BackboneWeights(
        stages=tuple(
            (_rand_conv(rng, widths[i + 1], widths[i], 3, stride=(2, 2, 1)[i]), _rand_bn(rng, widths[i + 1]))
            for i in range(3)
        )
    )
    trunk = GraphDesc(
        input_channels=s, blocks=tuple(_rand_branch_block(rng, s) for _ in range(2))
    )
    task_blocks = tuple(
        (name, _rand_branch_block(rng, s)) for name, _ in _task_channels(cfg.num_classes)
    )
    outs = tuple(
        (name, _rand_conv(rng, ch, s, 1)) for name, ch in _task_channels(cfg.num_classes)
    )
    return ToyWeights(
        backbone=backbone,
        depth_head=init_depth_head_weights(c, cfg.depth_bins.num_bins, seed=cfg.seed + 1),
        bev_encoder=init_bev_encoder_weights(s, seed=cfg.seed + 2),
        head=HeadWeights(trunk=trunk, task_blocks=task_blocks, outs=outs),
    )


# ---------------------------------------------------------------------------
# Frames and the pipeline runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CameraFrame:
    """Per-camera input: augmented image plus geometric depth ground truth."""

    image: np.ndarray  # [C, in_h, in_w]
    gt_depth: np.ndarray  # [bins, feat_h, feat_w]


@dataclass(frozen=True, eq=False)
class Frame:
    timestamp: float
    ego_pose: EgoPose
    cameras: dict[str, CameraFrame]


@dataclass(frozen=True, eq=False)
class FrameResult:
    detections: list[Detection]
    pre_nms: list[Detection]
    bev: np.ndarray  # splatted feature map [C, nx, ny]
    head_output: HeadOutput


class Pipeline:
    """Holds the rig, the precomputed LUT, the weights and temporal state."""

    def __init__(self, cfg: PipelineConfig, rig: CameraRig | None = None,
                 lut: LookupTable | None = None):
        self.cfg = cfg
        self.rig = rig if rig is not None else load_rig(cfg.rig_path)
        self.aug = compose_aug(
            cfg.aug.flip_h, cfg.aug.scale, cfg.aug.crop_offset, cfg.aug.rotate, cfg.image_size
        )
        fh, fw = cfg.feature_size
        self.frustums = {
            cam.name: build_frustum(
                fh, fw, cfg.feature_downsample, cfg.depth_bins,
                cam.intrinsics, cam.extrinsics, self.aug,
            )
            for cam in self.rig
        }
        self.expected_fingerprint = compute_fingerprint(self.frustums, cfg.grid)
        if lut is None:
            lut = precompute_lut(self.frustums, cfg.grid)
        elif lut.fingerprint != self.expected_fingerprint:
            raise StaleLutError(
                f"lookup table fingerprint {lut.fingerprint:#018x} does not match the "
                f"configured rig/aug/grid ({self.expected_fingerprint:#018x})"
            )
        self.lut = lut
        self.weights = (
            build_identity_weights(cfg) if cfg.weights == "identity" else build_random_weights(cfg)
        )
        self.encodings = {
            cam.name: encode_camera_params(cam.intrinsics, cam.extrinsics, self.aug)
            for cam in self.rig
        }
        self.buffer = FrameBuffer(capacity_seconds=cfg.temporal_window_seconds)

    def reset(self) -> None:
        self.buffer = FrameBuffer(capacity_seconds=self.cfg.temporal_window_seconds)

    # -- per-camera stage (outside the timed region) --

    def camera_stage(
        self, frame: Frame, mask: set[str] | None = None
    ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        """Backbone + depth prediction + fusion for every camera."""
        mask = set(mask or ())
        unknown = mask - set(self.rig.names)
        if unknown:
            raise ConfigError(f"mask names unknown cameras {sorted(unknown)}")
        missing = set(self.rig.names) - set(frame.cameras)
        if missing:
            raise ShapeMismatchError(f"frame is missing cameras {sorted(missing)}")
        bins = self.cfg.depth_bins.num_bins
        fh, fw = self.cfg.feature_size

        def one(name: str) -> tuple[str, np.ndarray, np.ndarray]:
            cam_in = frame.cameras[name]
            feats = self.weights.backbone.forward(cam_in.image)
            if feats.shape != (self.cfg.channels, fh, fw):
                raise ShapeMismatchError(
                    f"{name}: backbone produced {feats.shape}, expected "
                    f"({self.cfg.channels},{fh},{fw}); check image_size/downsample"
                )
            predicted = depth_head_forward(feats, self.encodings[name], self.weights.depth_head)
            fused = fuse_depth(predicted, cam_in.gt_depth, self.cfg.depth_fusion_weight)
            return name, feats, fused

        results = _map_ordered(one, list(self.rig.names))
        feats = {name: f for name, f, _ in results}
        depths = {name: d for name, _, d in results}
        for name in mask:
            feats[name] = np.zeros_like(feats[name])
            depths[name] = np.full((bins, fh, fw), 1.0 / bins, dtype=np.float32)
        return feats, depths

    # -- timed model-forward stage: LUT lookup through NMS input --

    def bev_forward(
        self,
        feats: dict[str, np.ndarray],
        depths: dict[str, np.ndarray],
        pose: EgoPose,
        timestamp: float,
    ) -> tuple[np.ndarray, HeadOutput, list[Detection]]:
        cfg = self.cfg
        bev = splat(feats, depths, self.lut, cfg.grid, self.expected_fingerprint)
        stacked = align_and_concat(self.buffer, pose, bev, cfg.temporal_max_frames, cfg.grid)
        encoded = bev_encoder_forward(stacked, self.weights.bev_encoder)
        head_out = head_forward(encoded, self.weights.head)
        raw = decode(head_out, cfg.grid, cfg.top_k, cfg.score_threshold)
        self.buffer.push_frame(timestamp, pose, bev)
        return bev, head_out, raw

    def process_frame(self, frame: Frame, mask: set[str] | None = None) -> FrameResult:
        feats, depths = self.camera_stage(frame, mask=mask)
        bev, head_out, raw = self.bev_forward(feats, depths, frame.ego_pose, frame.timestamp)
        dets = circular_nms(raw, self.cfg.nms_radii)
        return FrameResult(detections=dets, pre_nms=raw, bev=bev, head_output=head_out)


def _map_ordered(fn, items):
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def run_pipeline(
    pipeline: Pipeline, frames: list[Frame], mask: set[str] | None = None
) -> list[FrameResult]:
    """Process frames in order through a fresh temporal buffer."""
    pipeline.reset()
    return [pipeline.process_frame(f, mask=mask) for f in frames]


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    vx: float
    vy: float


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    objects: tuple[SceneObject, ...]
    timestamp: float
    ego_pose: EgoPose


def _deposit_blob(image: np.ndarray, u: float, v: float, sigma: float) -> None:
    """Add a unit-amplitude Gaussian at (u, v) to every channel, in place."""
    _, h, w = image.shape
    r = int(math.ceil(3.0 * sigma))
    j0, j1 = max(0, int(math.floor(u)) - r), min(w - 1, int(math.floor(u)) + r)
    i0, i1 = max(0, int(math.floor(v)) - r), min(h - 1, int(math.floor(v)) + r)
    if j0 > j1 or i0 > i1:
        return
    jj = np.arange(j0, j1 + 1, dtype=np.float64)
    ii = np.arange(i0, i1 + 1, dtype=np.float64)
    g = np.exp(
        -(((ii[:, None] - v) ** 2) + ((jj[None, :] - u) ** 2)) / (2.0 * sigma * sigma)
    ).astype(np.float32)
    image[:, i0 : i1 + 1, j0 : j1 + 1] += g[None, :, :]


def generate_scene(
    seed: int,
    n_objects: int,
    cfg: PipelineConfig,
    rig: CameraRig,
    timestamp: float = 0.0,
    ego_pose: EgoPose = EgoPose(),
) -> tuple[SyntheticScene, Frame]:
    """Random objects plus per-camera image blobs and exact one-hot depth.

    Objects are drawn uniformly inside the BEV bounds; draws that no camera
    can see (outside every image or outside the depth-bin range) are
    rejected and resampled so every object leaves feature mass somewhere.
    The projected center receives a unit Gaussian blob (sigma = 1.5 feature
    cells) and a one-hot depth at the bin containing its camera depth;
    occlusion is ignored.
    """
    if n_objects < 0:
        raise ConfigError(f"n_objects must be >= 0, got {n_objects}")
    rng = np.random.default_rng(seed)
    cams = list(rig)
    aug = compose_aug(
        cfg.aug.flip_h, cfg.aug.scale, cfg.aug.crop_offset, cfg.aug.rotate, cfg.image_size
    )
    in_w, in_h = cfg.input_size
    fh, fw = cfg.feature_size
    bins = cfg.depth_bins
    grid = cfg.grid

    def visible_in(obj_xyz) -> list[tuple[RigCamera, float, float, float]]:
        hits = []
        for cam in cams:
            u, v, d = ego_to_pixel(obj_xyz, cam.intrinsics, cam.extrinsics, aug)
            if d <= 0 or bins.bin_of(d) is None:
                continue
            if 0.0 <= u < in_w and 0.0 <= v < in_h:
                hits.append((cam, u, v, d))
        return hits

    objects = []
    projections: list[list] = []
    for _ in range(n_objects):
        for _attempt in range(1000):
            x = rng.uniform(grid.x_min, grid.x_max)
            y = rng.uniform(grid.y_min, grid.y_max)
            z = rng.uniform(-0.5, 1.0)
            hits = visible_in((x, y, z))
            if hits:
                break
        else:
            raise ConfigError("could not place a visible object; check rig/grid/config")
        objects.append(
            SceneObject(
                class_id=int(rng.integers(cfg.num_classes)),
                x=x, y=y, z=z,
                w=float(rng.uniform(1.5, 3.0)),
                l=float(rng.uniform(2.0, 5.0)),
                h=float(rng.uniform(1.2, 2.2)),
                yaw=float(rng.uniform(-math.pi, math.pi)),
                vx=float(rng.uniform(-5.0, 5.0)),
                vy=float(rng.uniform(-5.0, 5.0)),
            )
        )
        projections.append(hits)

    sigma = 1.5 * cfg.feature_downsample  # 1.5 feature cells, in input pixels
    images = {
        cam.name: np.zeros((cfg.channels, in_h, in_w), dtype=np.float32) for cam in cams
    }
    depth_gt = {
        cam.name: np.full((bins.num_bins, fh, fw), 1.0 / bins.num_bins, dtype=np.float32)
        for cam in cams
    }
    # each feature cell's depth label is owned by the object whose projection
    # center is closest (z-buffer-like; avoids labels leaking across objects
    # that share a bearing)
    owner_dist = {cam.name: np.full((fh, fw), np.inf) for cam in cams}
    onehot_radius = 5  # stamp half-width in feature cells
    ds = cfg.feature_downsample
    for hits in projections:
        for cam, u, v, d in hits:
            _deposit_blob(images[cam.name], u, v, sigma)
            b = bins.bin_of(d)
            cu, cv = u / ds, v / ds  # projection center in feature coords
            fj, fi = int(cu), int(cv)
            j0, j1 = max(0, fj - onehot_radius), min(fw - 1, fj + onehot_radius)
            i0, i1 = max(0, fi - onehot_radius), min(fh - 1, fi + onehot_radius)
            jj = np.arange(j0, j1 + 1)
            ii = np.arange(i0, i1 + 1)
            d2 = ((ii[:, None] + 0.5 - cv) ** 2) + ((jj[None, :] + 0.5 - cu) ** 2)
            window = owner_dist[cam.name][i0 : i1 + 1, j0 : j1 + 1]
            win = d2 < window
            window[win] = d2[win]
            dg = depth_gt[cam.name][:, i0 : i1 + 1, j0 : j1 + 1]
            dg[:, win] = 0.0
            dg[b, win] = 1.0

    frame = Frame(
        timestamp=timestamp,
        ego_pose=ego_pose,
        cameras={
            cam.name: CameraFrame(image=images[cam.name], gt_depth=depth_gt[cam.name])
            for cam in cams
        },
    )
    scene = SyntheticScene(objects=tuple(objects), timestamp=timestamp, ego_pose=ego_pose)
    return scene, frame


# ---------------------------------------------------------------------------
# Module-level FLOPs of the toy pipeline
# ---------------------------------------------------------------------------


def count_pipeline_flops(pipeline: Pipeline) -> FlopsReport:
    """Per-module FLOPs for one frame at the configured shapes."""
    cfg = pipeline.cfg
    w = pipeline.weights
    n_cams = len(pipeline.rig)
    in_w, in_h = cfg.input_size
    fh, fw = cfg.feature_size
    bins = cfg.depth_bins.num_bins

    backbone = 0
    hw = (in_h, in_w)
    for conv, bn in w.backbone.stages:
        backbone += analysis.conv_flops(conv, hw)
        hw = analysis.conv_output_shape(hw, conv)
        backbone += analysis.batchnorm_flops(bn, hw)
        backbone += analysis.elementwise_flops((bn.channels, *hw))  # relu
    backbone *= n_cams

    def res_block_flops(block, hw, ch):
        f = analysis.conv_flops(block.conv1, hw) + analysis.batchnorm_flops(block.bn1, hw)
        f += analysis.elementwise_flops((ch, *hw))
        f += analysis.conv_flops(block.conv2, hw) + analysis.batchnorm_flops(block.bn2, hw)
        f += 2 * analysis.elementwise_flops((ch, *hw))  # skip add + relu
        return f

    dh = w.depth_head
    feat_hw = (fh, fw)
    depth = analysis.conv_flops(dh.param_proj, feat_hw)
    depth += analysis.elementwise_flops((cfg.channels, fh, fw))  # injection add
    depth += res_block_flops(dh.block1, feat_hw, cfg.channels)
    depth += res_block_flops(dh.block2, feat_hw, cfg.channels)
    depth += analysis.conv_flops(dh.logits, feat_hw)
    depth += 4 * analysis.elementwise_flops((bins, fh, fw))  # softmax
    depth += 3 * analysis.elementwise_flops((bins, fh, fw))  # fusion mix + renorm
    depth *= n_cams

    projection = 2 * cfg.channels * pipeline.lut.num_valid  # fused lift + scatter

    grid_hw = (cfg.grid.nx, cfg.grid.ny)
    s = cfg.stacked_channels
    temporal = cfg.temporal_max_frames * 12 * analysis.elementwise_flops(
        (cfg.channels, *grid_hw)
    )  # bilinear warp per history map

    enc = w.bev_encoder
    encoder = res_block_flops(enc.block1, grid_hw, s) + res_block_flops(enc.block2, grid_hw, s)

    head = sum(analysis.block_flops(b, grid_hw)[0] for b in w.head.trunk.blocks)
    for _, block in w.head.task_blocks:
        head += analysis.block_flops(block, grid_hw)[0]
    for name, conv in w.head.outs:
        head += analysis.conv_flops(conv, grid_hw)
        if name == "heatmap":
            head += 3 * analysis.elementwise_flops((conv.out_channels, *grid_hw))  # sigmoid

    return count_module_flops(
        {
            "backbone": backbone,
            "depth_head": depth,
            "view_projection": projection,
            "temporal_fusion": temporal,
            "bev_encoder": encoder,
            "detection_head": head,
        }
    )
