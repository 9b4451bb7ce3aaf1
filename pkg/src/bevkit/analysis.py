"""FLOPs accounting, latency benchmarking and the camera-masking harness.

Counting convention: one multiply-accumulate is 2 FLOPs. A conv therefore
costs 2*kh*kw*C_in*C_out*H'*W' plus H'*W'*C_out for its bias, an
inference-time batchnorm 4*C*H*W, and elementwise ops one FLOP per element.
Timing uses a monotonic clock and nearest-rank percentiles.
"""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .reparam import BranchBlock, GraphDesc
from .tensor import BatchNormSpec, ConvSpec, conv_output_shape


@dataclass(frozen=True)
class FlopsEntry:
    name: str
    flops: int


@dataclass(frozen=True)
class FlopsReport:
    entries: tuple[FlopsEntry, ...]

    @property
    def total(self) -> int:
        return sum(e.flops for e in self.entries)

    def percentages(self) -> dict[str, float]:
        total = self.total
        if total == 0:
            return {e.name: 0.0 for e in self.entries}
        return {e.name: 100.0 * e.flops / total for e in self.entries}

    def to_json(self) -> dict:
        pct = self.percentages()
        return {
            "total_flops": self.total,
            "modules": [
                {"name": e.name, "flops": e.flops, "percent": pct[e.name]}
                for e in self.entries
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["module", "flops", "percent"])
        pct = self.percentages()
        for e in self.entries:
            writer.writerow([e.name, e.flops, f"{pct[e.name]:.4f}"])
        writer.writerow(["total", self.total, "100.0000"])
        return buf.getvalue()


def conv_flops(conv: ConvSpec, in_hw: tuple[int, int], with_bias: bool = True) -> int:
    """2*kh*kw*C_in*C_out*H'*W' (+ H'*W'*C_out for the bias add)."""
    out_h, out_w = conv_output_shape(in_hw, conv)
    kh, kw = conv.kernel
    macs = kh * kw * conv.in_channels * conv.out_channels * out_h * out_w
    return 2 * macs + (out_h * out_w * conv.out_channels if with_bias else 0)


def batchnorm_flops(bn: BatchNormSpec, hw: tuple[int, int]) -> int:
    return 4 * bn.channels * hw[0] * hw[1]


def elementwise_flops(shape: Iterable[int]) -> int:
    return int(np.prod(tuple(shape)))


def block_flops(block: BranchBlock, in_hw: tuple[int, int]) -> tuple[int, tuple[int, int]]:
    """FLOPs of one branch block and its output extents."""
    out_hw = conv_output_shape(in_hw, block.main_conv)
    out_elems = block.out_channels * out_hw[0] * out_hw[1]
    total = conv_flops(block.main_conv, in_hw)
    branches = 1
    if block.main_bn is not None:
        total += batchnorm_flops(block.main_bn, out_hw)
    if block.one_by_one_conv is not None:
        total += conv_flops(block.one_by_one_conv, in_hw)
        if block.one_by_one_bn is not None:
            total += batchnorm_flops(block.one_by_one_bn, out_hw)
        branches += 1
    if block.identity_bn is not None:
        total += batchnorm_flops(block.identity_bn, in_hw)
        branches += 1
    total += (branches - 1) * out_elems  # branch sums
    if block.activation == "relu":
        total += out_elems
    return total, out_hw


def count_flops(g: GraphDesc, input_shape: tuple[int, int, int]) -> FlopsReport:
    """Per-block FLOPs of a graph on a [C,H,W] input."""
    c, h, w = input_shape
    if c != g.input_channels:
        raise ShapeMismatchError(
            f"graph expects {g.input_channels} input channels, shape gives {c}"
        )
    entries = []
    hw = (h, w)
    for i, block in enumerate(g.blocks):
        f, hw = block_flops(block, hw)
        entries.append(FlopsEntry(f"block{i}", f))
    return FlopsReport(tuple(entries))


def count_module_flops(named: Mapping[str, int]) -> FlopsReport:
    """Assemble a report from already-counted per-module totals."""
    return FlopsReport(tuple(FlopsEntry(k, int(v)) for k, v in named.items()))


# ---------------------------------------------------------------------------
# Benchmarking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchResult:
    frames: int
    wall_seconds: float
    fps: float
    p50_ms: float
    p95_ms: float
    threads: int = 1

    def to_json(self) -> dict:
        return {
            "frames": self.frames,
            "wall_seconds": self.wall_seconds,
            "fps": self.fps,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
            "threads": self.threads,
        }


def nearest_rank(sorted_values, q: float) -> float:
    """Nearest-rank percentile of an ascending sequence."""
    n = len(sorted_values)
    rank = max(1, int(np.ceil(q / 100.0 * n)))
    return float(sorted_values[rank - 1])


def benchmark_pipeline(
    run: Callable[[], object], frames: int, warmup: int = 0, threads: int | None = None
) -> BenchResult:
    """Time ``frames`` calls of the supplied stage, discarding ``warmup`` calls.

    The callable is expected to be the model-forward stage only; file IO and
    serialization belong outside it.
    """
    if frames < 1:
        raise ConfigError(f"frames must be >= 1, got {frames}")
    if warmup < 0:
        raise ConfigError(f"warmup must be >= 0, got {warmup}")
    for _ in range(warmup):
        run()
    times = []
    for _ in range(frames):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    wall = float(sum(times))
    ordered = sorted(times)
    return BenchResult(
        frames=frames,
        wall_seconds=wall,
        fps=frames / wall if wall > 0 else float("inf"),
        p50_ms=nearest_rank(ordered, 50) * 1e3,
        p95_ms=nearest_rank(ordered, 95) * 1e3,
        threads=threads if threads is not None else worker_count(),
    )


def worker_count() -> int:
    """Worker count from BEVKIT_THREADS (default 1)."""
    raw = os.environ.get("BEVKIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"BEVKIT_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


# ---------------------------------------------------------------------------
# View masking
# ---------------------------------------------------------------------------


def mask_views(inputs: Mapping[str, object], mask) -> dict[str, object]:
    """Zero out the named cameras' arrays, leaving the rest untouched.

    ``inputs`` maps camera name to either an array or a tuple of arrays
    (features, depth logits/probabilities, ...); masked entries are replaced
    by zeros of identical shape. Unknown names are configuration errors.
    """
    mask = set(mask)
    unknown = mask - set(inputs)
    if unknown:
        raise ConfigError(f"mask names unknown cameras {sorted(unknown)}")

    def zeroed(value):
        if isinstance(value, tuple):
            return tuple(zeroed(v) for v in value)
        arr = np.asarray(value)
        return np.zeros_like(arr)

    return {
        name: (zeroed(value) if name in mask else value) for name, value in inputs.items()
    }
