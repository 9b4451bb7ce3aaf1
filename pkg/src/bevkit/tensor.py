"""Dense float32 array primitives: conv2d, batchnorm, elementwise ops, softmax.

Tensors are plain C-contiguous ``numpy.float32`` arrays of rank <= 4. All
operations are pure; inputs are never mutated. The ``.bevt`` binary format
(``save_tensor``/``load_tensor``) is the interchange format used by every
other module and by the CLI.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError, NumericError, ShapeMismatchError

TENSOR_MAGIC = b"BEVT0001"
MAX_RANK = 4


def as_tensor(values, shape=None) -> np.ndarray:
    """Coerce ``values`` to a contiguous float32 array, optionally reshaped."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > MAX_RANK:
        raise ShapeMismatchError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
    if arr.size == 0:
        raise ShapeMismatchError("zero-sized tensors are not allowed")
    return arr


def require_shape(arr: np.ndarray, shape: tuple, name: str) -> None:
    """Raise ShapeMismatchError unless ``arr.shape == shape`` (None = any extent)."""
    if len(arr.shape) != len(shape) or any(
        e is not None and a != e for a, e in zip(arr.shape, shape)
    ):
        raise ShapeMismatchError(f"{name}: expected shape {shape}, got {arr.shape}")


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """Weights of a plain 2D convolution (cross-correlation, zero padding).

    weights: [out_ch, in_ch, kh, kw] with kh, kw odd (center-aligned kernels
    are required by branch merging). bias: [out_ch].
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "weights", as_tensor(self.weights))
        object.__setattr__(self, "bias", as_tensor(self.bias))
        object.__setattr__(self, "stride", (int(self.stride[0]), int(self.stride[1])))
        object.__setattr__(self, "padding", (int(self.padding[0]), int(self.padding[1])))
        if self.weights.ndim != 4:
            raise ShapeMismatchError(f"conv weights must be rank 4, got {self.weights.shape}")
        out_ch, _, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeMismatchError(f"kernel extents must be odd, got {kh}x{kw}")
        if self.bias.shape != (out_ch,):
            raise ShapeMismatchError(
                f"bias length {self.bias.shape} does not match out_ch {out_ch}"
            )
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise GeometryError(f"bad stride/padding {self.stride}/{self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass(frozen=True, eq=False)
class BatchNormSpec:
    """Inference-time batch normalization statistics plus affine scale/shift."""

    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("mean", "var", "gamma", "beta"):
            object.__setattr__(self, name, as_tensor(getattr(self, name)))
            if getattr(self, name).ndim != 1:
                raise ShapeMismatchError(f"bn {name} must be rank 1")
        n = self.mean.shape[0]
        if not (self.var.shape[0] == self.gamma.shape[0] == self.beta.shape[0] == n):
            raise ShapeMismatchError("bn vectors must share one channel count")
        if np.any(self.var < 0):
            raise NumericError("bn variance must be non-negative")
        if self.eps < 0:
            raise NumericError(f"bn eps must be non-negative, got {self.eps}")
        if np.any(self.var + np.float32(self.eps) <= 0):
            raise NumericError("bn requires var + eps > 0 elementwise")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def identity(cls, channels: int, eps: float = 0.0) -> "BatchNormSpec":
        """Statistics that make batchnorm the identity map (eps included)."""
        z = np.zeros(channels, dtype=np.float32)
        o = np.ones(channels, dtype=np.float32)
        return cls(mean=z, var=o, gamma=o, beta=z, eps=eps)


def conv_output_shape(
    in_hw: tuple[int, int], conv: ConvSpec
) -> tuple[int, int]:
    """Output extents of ``conv`` on an input of spatial size ``in_hw``."""
    h, w = in_hw
    kh, kw = conv.kernel
    sh, sw = conv.stride
    ph, pw = conv.padding
    out_h = (h + 2 * ph - kh) // sh + 1
    out_w = (w + 2 * pw - kw) // sw + 1
    if out_h < 1 or out_w < 1:
        raise GeometryError(
            f"conv produces empty output for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {conv.stride}, padding {conv.padding}"
        )
    return out_h, out_w


def conv2d_forward(x: np.ndarray, conv: ConvSpec) -> np.ndarray:
    """Direct cross-correlation of ``x`` [C_in,H,W] with zero padding.

    Implemented as im2col + a single float32 matmul; the test suite checks it
    against a naive six-loop reference.
    """
    x = as_tensor(x)
    require_shape(x, (conv.in_channels, None, None), "conv input")
    _, h, w = x.shape
    kh, kw = conv.kernel
    sh, sw = conv.stride
    ph, pw = conv.padding
    out_h, out_w = conv_output_shape((h, w), conv)

    if ph or pw:
        x = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    # windows: [C, out_h, out_w, kh, kw]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::sh, ::sw]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, -1)
    flat_w = conv.weights.reshape(conv.out_channels, -1)
    out = cols @ flat_w.T + conv.bias
    return np.ascontiguousarray(out.T.reshape(conv.out_channels, out_h, out_w))


def batchnorm_forward(x: np.ndarray, bn: BatchNormSpec) -> np.ndarray:
    """Per-channel y = gamma * (x - mean) / sqrt(var + eps) + beta."""
    x = as_tensor(x)
    require_shape(x, (bn.channels, None, None), "bn input")
    scale = bn.gamma / np.sqrt(bn.var + np.float32(bn.eps))
    return (x - bn.mean[:, None, None]) * scale[:, None, None] + bn.beta[:, None, None]


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} differ")
    return a + b


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(as_tensor(a), np.float32(0))


def softmax_channel(a: np.ndarray) -> np.ndarray:
    """Exp-normalize over axis 0 with max subtraction; columns sum to 1."""
    a = as_tensor(a)
    if not np.isfinite(a).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = a - a.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# Binary tensor file format (.bevt)
# ---------------------------------------------------------------------------
# magic "BEVT0001" | u8 rank + 7 pad bytes | rank x u64 LE extents | f32 LE data


def save_tensor(arr: np.ndarray, path) -> None:
    arr = as_tensor(arr)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<B7x", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype("<f4", copy=False).tobytes())


def load_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != TENSOR_MAGIC:
        raise FormatError(f"{path}: not a tensor file (bad magic)")
    rank = data[8]
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"{path}: bad rank {rank}")
    header_end = 16 + 8 * rank
    if len(data) < header_end:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", data, 16)
    count = int(np.prod(shape))
    if len(data) != header_end + 4 * count:
        raise FormatError(
            f"{path}: payload size {len(data) - header_end} does not match shape {shape}"
        )
    arr = np.frombuffer(data, dtype="<f4", offset=header_end, count=count)
    return arr.reshape(shape).copy()
