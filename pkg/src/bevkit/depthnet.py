"""Fully convolutional depth head conditioned on camera parameters.

The head concatenates nothing: intrinsics, extrinsics and the augmentation
matrix are flattened to a 25-vector, projected to feature width by a 1x1
conv and added onto the image features before two residual blocks and a
1x1 logits layer ending in a per-pixel softmax over depth bins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .geometry import AugTransform, CameraExtrinsics, CameraIntrinsics
from .tensor import (
    BatchNormSpec,
    ConvSpec,
    add,
    as_tensor,
    batchnorm_forward,
    conv2d_forward,
    load_tensor,
    relu,
    save_tensor,
    softmax_channel,
)

PARAM_ENCODING_LEN = 25  # 4 intrinsics + 9 rotation + 3 translation + 9 aug


def encode_camera_params(
    intr: CameraIntrinsics, extr: CameraExtrinsics, aug: AugTransform
) -> np.ndarray:
    """Flatten camera model + augmentation into a fixed-length float32 vector.

    Layout: [fx, fy, cx, cy, rotation row-major (9), translation (3),
    aug matrix row-major (9)].
    """
    vec = np.concatenate(
        [
            [intr.fx, intr.fy, intr.cx, intr.cy],
            extr.rotation.ravel(),
            extr.translation,
            aug.matrix.ravel(),
        ]
    ).astype(np.float32)
    assert vec.shape == (PARAM_ENCODING_LEN,)
    return vec


@dataclass(frozen=True, eq=False)
class ResidualBlock:
    """conv3x3-BN-relu-conv3x3-BN plus skip, then relu. Preserves shape."""

    conv1: ConvSpec
    bn1: BatchNormSpec
    conv2: ConvSpec
    bn2: BatchNormSpec

    def __post_init__(self):
        c = self.conv1.in_channels
        if not (
            self.conv1.out_channels == self.bn1.channels == self.conv2.in_channels
            and self.conv2.out_channels == self.bn2.channels == c
        ):
            raise ShapeMismatchError("residual block channel chain is inconsistent")
        for conv in (self.conv1, self.conv2):
            kh, kw = conv.kernel
            if conv.stride != (1, 1) or conv.padding != (kh // 2, kw // 2):
                raise ShapeMismatchError("residual convs must preserve spatial extents")

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = relu(batchnorm_forward(conv2d_forward(x, self.conv1), self.bn1))
        y = batchnorm_forward(conv2d_forward(y, self.conv2), self.bn2)
        return relu(add(y, as_tensor(x)))


@dataclass(frozen=True, eq=False)
class DepthHeadWeights:
    param_proj: ConvSpec  # 1x1, PARAM_ENCODING_LEN -> C
    block1: ResidualBlock
    block2: ResidualBlock
    logits: ConvSpec  # 1x1, C -> num_bins

    def __post_init__(self):
        c = self.param_proj.out_channels
        if self.param_proj.in_channels != PARAM_ENCODING_LEN:
            raise ShapeMismatchError(
                f"param_proj must take {PARAM_ENCODING_LEN} channels, "
                f"got {self.param_proj.in_channels}"
            )
        if self.block1.conv1.in_channels != c or self.block2.conv1.in_channels != c:
            raise ShapeMismatchError("trunk channel width does not match param projection")
        if self.logits.in_channels != c:
            raise ShapeMismatchError("logits layer does not match trunk width")

    @property
    def channels(self) -> int:
        return self.param_proj.out_channels

    @property
    def num_bins(self) -> int:
        return self.logits.out_channels


def depth_head_forward(
    features: np.ndarray, enc: np.ndarray, wts: DepthHeadWeights
) -> np.ndarray:
    """Per-pixel depth probability [num_bins, h, w]; columns sum to 1."""
    features = as_tensor(features)
    enc = as_tensor(enc)
    if enc.shape != (PARAM_ENCODING_LEN,):
        raise ShapeMismatchError(f"camera encoding must be [{PARAM_ENCODING_LEN}], got {enc.shape}")
    if features.ndim != 3 or features.shape[0] != wts.channels:
        raise ShapeMismatchError(
            f"features must be [{wts.channels},h,w], got {features.shape}"
        )
    _, h, w = features.shape
    param_map = np.broadcast_to(enc[:, None, None], (PARAM_ENCODING_LEN, h, w))
    x = add(features, conv2d_forward(np.ascontiguousarray(param_map), wts.param_proj))
    x = wts.block2.forward(wts.block1.forward(x))
    return softmax_channel(conv2d_forward(x, wts.logits))


# ---------------------------------------------------------------------------
# Synthetic weight construction and on-disk layout
# ---------------------------------------------------------------------------


def _uniform_conv(rng, out_ch, in_ch, k, scale=0.1, stride=(1, 1), padding=None) -> ConvSpec:
    if padding is None:
        padding = (k // 2, k // 2)
    w = rng.uniform(-scale, scale, size=(out_ch, in_ch, k, k)).astype(np.float32)
    b = rng.uniform(-scale, scale, size=out_ch).astype(np.float32)
    return ConvSpec(w, b, stride=stride, padding=padding)


def _random_bn(rng, channels, scale=0.1) -> BatchNormSpec:
    return BatchNormSpec(
        mean=rng.uniform(-scale, scale, channels).astype(np.float32),
        var=rng.uniform(0.5, 1.5, channels).astype(np.float32),
        gamma=rng.uniform(1 - scale, 1 + scale, channels).astype(np.float32),
        beta=rng.uniform(-scale, scale, channels).astype(np.float32),
        eps=1e-5,
    )


def random_residual_block(rng, channels: int, scale: float = 0.1) -> ResidualBlock:
    return ResidualBlock(
        conv1=_uniform_conv(rng, channels, channels, 3, scale),
        bn1=_random_bn(rng, channels, scale),
        conv2=_uniform_conv(rng, channels, channels, 3, scale),
        bn2=_random_bn(rng, channels, scale),
    )


def init_depth_head_weights(channels: int, num_bins: int, seed: int) -> DepthHeadWeights:
    """Deterministic synthetic weights, uniform in [-0.1, 0.1]."""
    rng = np.random.default_rng(seed)
    return DepthHeadWeights(
        param_proj=_uniform_conv(rng, channels, PARAM_ENCODING_LEN, 1),
        block1=random_residual_block(rng, channels),
        block2=random_residual_block(rng, channels),
        logits=_uniform_conv(rng, num_bins, channels, 1),
    )


def zero_logits_depth_head(channels: int, num_bins: int, seed: int = 0) -> DepthHeadWeights:
    """Head whose output is exactly uniform over bins (zero logits layer)."""
    wts = init_depth_head_weights(channels, num_bins, seed)
    z = ConvSpec(
        np.zeros((num_bins, channels, 1, 1), dtype=np.float32),
        np.zeros(num_bins, dtype=np.float32),
    )
    return DepthHeadWeights(wts.param_proj, wts.block1, wts.block2, z)


def _conv_to_manifest(name: str, conv: ConvSpec, outdir: Path, files: dict) -> dict:
    files[f"{name}_weights.bevt"] = conv.weights
    files[f"{name}_bias.bevt"] = conv.bias
    return {
        "weights": f"{name}_weights.bevt",
        "bias": f"{name}_bias.bevt",
        "stride": list(conv.stride),
        "padding": list(conv.padding),
    }


def _bn_to_manifest(name: str, bn: BatchNormSpec, files: dict) -> dict:
    for field in ("mean", "var", "gamma", "beta"):
        files[f"{name}_{field}.bevt"] = getattr(bn, field)
    return {
        **{f: f"{name}_{f}.bevt" for f in ("mean", "var", "gamma", "beta")},
        "eps": bn.eps,
    }


def _conv_from_manifest(entry: dict, outdir: Path) -> ConvSpec:
    return ConvSpec(
        load_tensor(outdir / entry["weights"]),
        load_tensor(outdir / entry["bias"]),
        stride=tuple(entry["stride"]),
        padding=tuple(entry["padding"]),
    )


def _bn_from_manifest(entry: dict, outdir: Path) -> BatchNormSpec:
    return BatchNormSpec(
        *(load_tensor(outdir / entry[f]) for f in ("mean", "var", "gamma", "beta")),
        eps=entry["eps"],
    )


def save_depth_head_weights(wts: DepthHeadWeights, outdir) -> None:
    """Write layer tensors plus a JSON manifest into a directory."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files: dict[str, np.ndarray] = {}
    manifest = {
        "format": "depth-head-weights",
        "version": 1,
        "layers": {
            "param_proj": _conv_to_manifest("param_proj", wts.param_proj, outdir, files),
            "logits": _conv_to_manifest("logits", wts.logits, outdir, files),
        },
    }
    for bname, block in (("block1", wts.block1), ("block2", wts.block2)):
        manifest["layers"][bname] = {
            "conv1": _conv_to_manifest(f"{bname}_conv1", block.conv1, outdir, files),
            "bn1": _bn_to_manifest(f"{bname}_bn1", block.bn1, files),
            "conv2": _conv_to_manifest(f"{bname}_conv2", block.conv2, outdir, files),
            "bn2": _bn_to_manifest(f"{bname}_bn2", block.bn2, files),
        }
    for fname, arr in files.items():
        save_tensor(arr, outdir / fname)
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_depth_head_weights(outdir) -> DepthHeadWeights:
    outdir = Path(outdir)
    try:
        manifest = json.loads((outdir / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read weight manifest in {outdir}: {exc}") from exc
    if manifest.get("format") != "depth-head-weights":
        raise ConfigError(f"{outdir}: not a depth-head weight directory")
    layers = manifest["layers"]

    def block(entry):
        return ResidualBlock(
            conv1=_conv_from_manifest(entry["conv1"], outdir),
            bn1=_bn_from_manifest(entry["bn1"], outdir),
            conv2=_conv_from_manifest(entry["conv2"], outdir),
            bn2=_bn_from_manifest(entry["bn2"], outdir),
        )

    return DepthHeadWeights(
        param_proj=_conv_from_manifest(layers["param_proj"], outdir),
        block1=block(layers["block1"]),
        block2=block(layers["block2"]),
        logits=_conv_from_manifest(layers["logits"], outdir),
    )
