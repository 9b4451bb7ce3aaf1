"""Structural re-parameterization: fold BN into convs and collapse branches.

Every transformation here is a linear identity: batchnorm folds into the
preceding conv's weights and bias, a 1x1 conv embeds at the center of a
k x k kernel, an identity path materializes as one-hot center kernels, and
parallel branches sum weight-wise. Activations are barriers; merging never
crosses a relu. ``verify_equivalence`` certifies the whole pass numerically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BudgetExceededError,
    ConfigError,
    GeometryError,
    ShapeMismatchError,
    VerificationError,
)
from .tensor import (
    BatchNormSpec,
    ConvSpec,
    as_tensor,
    batchnorm_forward,
    conv2d_forward,
    load_tensor,
    relu,
    save_tensor,
)

ACTIVATIONS = ("none", "relu")


@dataclass(frozen=True, eq=False)
class BranchBlock:
    """One multi-branch cell: main k x k conv, optional 1x1 and identity paths.

    All present branches share in/out channels and stride; the identity
    branch additionally requires in == out and stride 1. Each branch may
    carry its own batchnorm. ``activation`` applies after the branch sum.
    """

    main_conv: ConvSpec
    main_bn: BatchNormSpec | None = None
    one_by_one_conv: ConvSpec | None = None
    one_by_one_bn: BatchNormSpec | None = None
    identity_bn: BatchNormSpec | None = None
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation}")
        if self.one_by_one_bn is not None and self.one_by_one_conv is None:
            raise ConfigError("one_by_one_bn given without a one_by_one conv")
        out_ch, in_ch = self.main_conv.out_channels, self.main_conv.in_channels
        if self.main_bn is not None and self.main_bn.channels != out_ch:
            raise ShapeMismatchError("main bn channels do not match main conv")
        if self.one_by_one_conv is not None:
            c = self.one_by_one_conv
            if c.kernel != (1, 1):
                raise ShapeMismatchError(f"side branch must be 1x1, got {c.kernel}")
            if (c.in_channels, c.out_channels) != (in_ch, out_ch):
                raise ShapeMismatchError("1x1 branch channels do not match main conv")
            if c.stride != self.main_conv.stride:
                raise ShapeMismatchError("1x1 branch stride does not match main conv")
            if self.one_by_one_bn is not None and self.one_by_one_bn.channels != out_ch:
                raise ShapeMismatchError("1x1 bn channels do not match")
        if self.identity_bn is not None:
            if in_ch != out_ch:
                raise ShapeMismatchError("identity branch requires in_ch == out_ch")
            if self.main_conv.stride != (1, 1):
                raise ShapeMismatchError("identity branch requires stride 1")
            if self.identity_bn.channels != out_ch:
                raise ShapeMismatchError("identity bn channels do not match")

    @property
    def in_channels(self) -> int:
        return self.main_conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.main_conv.out_channels

    def num_side_branches(self) -> int:
        return (self.one_by_one_conv is not None) + (self.identity_bn is not None)

    def is_plain(self) -> bool:
        return (
            self.main_bn is None
            and self.one_by_one_conv is None
            and self.identity_bn is None
        )

    @classmethod
    def plain(cls, conv: ConvSpec, activation: str = "none") -> "BranchBlock":
        return cls(main_conv=conv, activation=activation)


@dataclass(frozen=True, eq=False)
class GraphDesc:
    """A cascade of blocks; block i's output feeds block i+1."""

    input_channels: int
    blocks: tuple[BranchBlock, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        ch = self.input_channels
        for i, b in enumerate(self.blocks):
            if b.in_channels != ch:
                raise ShapeMismatchError(
                    f"block {i} expects {b.in_channels} channels but receives {ch}"
                )
            ch = b.out_channels

    @property
    def output_channels(self) -> int:
        return self.blocks[-1].out_channels if self.blocks else self.input_channels


@dataclass(frozen=True)
class MergeBudget:
    """Error-budget cap on how many cells may merge at one site.

    ``post_error`` is the tolerated post-quantization error per cell,
    ``pre_error`` the measured full-precision error per merge; the quotient
    bounds the merge count, clamped to [1, cap].
    """

    post_error: float
    pre_error: float
    cap: int = 2

    def __post_init__(self):
        if not (self.post_error > 0 and self.pre_error > 0):
            raise ConfigError(
                f"error budgets must be positive, got E={self.post_error}, e={self.pre_error}"
            )
        if self.cap < 1:
            raise ConfigError(f"cap must be >= 1, got {self.cap}")


def merge_budget_n(budget: MergeBudget) -> int:
    """n = min(cap, max(1, floor(E / e)))."""
    return min(budget.cap, max(1, int(np.floor(budget.post_error / budget.pre_error))))


def fuse_conv_bn(conv: ConvSpec, bn: BatchNormSpec) -> ConvSpec:
    """Fold batchnorm into the conv: w' = w*g/std, b' = (b - mean)*g/std + beta.

    The returned plain conv satisfies conv'(x) == bn(conv(x)) for every x.
    """
    if bn.channels != conv.out_channels:
        raise ShapeMismatchError(
            f"bn has {bn.channels} channels but conv outputs {conv.out_channels}"
        )
    std = np.sqrt(bn.var.astype(np.float64) + bn.eps)
    scale = bn.gamma.astype(np.float64) / std
    w = conv.weights.astype(np.float64) * scale[:, None, None, None]
    b = (conv.bias.astype(np.float64) - bn.mean) * scale + bn.beta
    return ConvSpec(
        w.astype(np.float32), b.astype(np.float32), stride=conv.stride, padding=conv.padding
    )


def expand_1x1_to_kxk(conv: ConvSpec, k: int) -> ConvSpec:
    """Embed a 1x1 kernel at the center of a k x k kernel (zeros elsewhere).

    Padding grows by (k-1)/2 so the expanded conv computes the same map.
    """
    if k % 2 == 0:
        raise GeometryError(f"target kernel must be odd, got {k}")
    if conv.kernel != (1, 1):
        raise ShapeMismatchError(f"expected a 1x1 conv, got kernel {conv.kernel}")
    if k == 1:
        return conv
    out_ch, in_ch = conv.out_channels, conv.in_channels
    w = np.zeros((out_ch, in_ch, k, k), dtype=np.float32)
    w[:, :, k // 2, k // 2] = conv.weights[:, :, 0, 0]
    pad = (conv.padding[0] + k // 2, conv.padding[1] + k // 2)
    return ConvSpec(w, conv.bias, stride=conv.stride, padding=pad)


def identity_to_conv(channels: int, k: int) -> ConvSpec:
    """k x k conv that is the identity map at stride 1, padding (k-1)/2."""
    if k % 2 == 0:
        raise GeometryError(f"kernel must be odd, got {k}")
    w = np.zeros((channels, channels, k, k), dtype=np.float32)
    idx = np.arange(channels)
    w[idx, idx, k // 2, k // 2] = 1.0
    return ConvSpec(w, np.zeros(channels, dtype=np.float32), stride=(1, 1), padding=(k // 2, k // 2))


def merge_branches(block: BranchBlock) -> ConvSpec:
    """Collapse a multi-branch block into one plain conv (activation excluded).

    Each branch is reduced to a k x k conv (BN folded, 1x1 expanded,
    identity materialized) and the weights and biases are summed. Branch
    geometries that cannot be absorbed exactly are hard errors.
    """
    main = block.main_conv
    if block.main_bn is not None:
        main = fuse_conv_bn(main, block.main_bn)
    k = main.kernel[0]
    if main.kernel[1] != k:
        # non-square mains cannot absorb 1x1/identity branches symmetrically
        if block.num_side_branches():
            raise GeometryError(f"cannot absorb branches into {main.kernel} kernel")
    w = main.weights.copy()
    b = main.bias.copy()

    if block.one_by_one_conv is not None:
        side = block.one_by_one_conv
        if block.one_by_one_bn is not None:
            side = fuse_conv_bn(side, block.one_by_one_bn)
        side = expand_1x1_to_kxk(side, k)
        if side.padding != main.padding:
            raise GeometryError(
                f"1x1 branch implies padding {side.padding} but main uses {main.padding}; "
                "the branch cannot be absorbed exactly"
            )
        w += side.weights
        b += side.bias

    if block.identity_bn is not None:
        ident = fuse_conv_bn(identity_to_conv(block.in_channels, k), block.identity_bn)
        if ident.padding != main.padding:
            raise GeometryError(
                f"identity branch implies padding {ident.padding} but main uses "
                f"{main.padding}; the branch cannot be absorbed exactly"
            )
        w += ident.weights
        b += ident.bias

    return ConvSpec(w, b, stride=main.stride, padding=main.padding)


def reparam_graph(g: GraphDesc, budget: MergeBudget) -> GraphDesc:
    """Replace every block with a single plain conv, activations preserved.

    The number of side branches absorbed at any one site may not exceed the
    merge budget; exceeding it raises rather than silently partial-merging.
    Already-plain blocks pass through with bit-identical weights.
    """
    n = merge_budget_n(budget)
    out = []
    for i, block in enumerate(g.blocks):
        if block.is_plain():
            out.append(block)
            continue
        merges = block.num_side_branches()
        if merges > n:
            raise BudgetExceededError(
                f"block {i} needs {merges} branch merges but the budget allows {n}"
            )
        out.append(BranchBlock.plain(merge_branches(block), activation=block.activation))
    return GraphDesc(input_channels=g.input_channels, blocks=tuple(out))


# ---------------------------------------------------------------------------
# Forward evaluation and numerical certification
# ---------------------------------------------------------------------------


def forward_block(block: BranchBlock, x: np.ndarray) -> np.ndarray:
    """Sum of branch outputs followed by the block activation."""
    y = conv2d_forward(x, block.main_conv)
    if block.main_bn is not None:
        y = batchnorm_forward(y, block.main_bn)
    if block.one_by_one_conv is not None:
        side = conv2d_forward(x, block.one_by_one_conv)
        if block.one_by_one_bn is not None:
            side = batchnorm_forward(side, block.one_by_one_bn)
        if side.shape != y.shape:
            raise ShapeMismatchError(
                f"branch outputs disagree: main {y.shape} vs 1x1 {side.shape}"
            )
        y = y + side
    if block.identity_bn is not None:
        ident = batchnorm_forward(as_tensor(x), block.identity_bn)
        if ident.shape != y.shape:
            raise ShapeMismatchError(
                f"identity path {ident.shape} does not match main output {y.shape}"
            )
        y = y + ident
    return relu(y) if block.activation == "relu" else y


def forward_graph(g: GraphDesc, x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] != g.input_channels:
        raise ShapeMismatchError(
            f"graph expects [{g.input_channels},H,W] input, got {x.shape}"
        )
    for block in g.blocks:
        x = forward_block(block, x)
    return x


@dataclass(frozen=True)
class EquivalenceReport:
    max_abs_error: float
    trials: int
    seed: int
    tol: float
    passed: bool

    def to_json(self) -> dict:
        return {
            "max_abs_error": self.max_abs_error,
            "trials": self.trials,
            "seed": self.seed,
            "tol": self.tol,
            "pass": self.passed,
        }


def verify_equivalence(
    g1: GraphDesc,
    g2: GraphDesc,
    trials: int,
    seed: int,
    tol: float,
    input_hw: tuple[int, int] = (16, 16),
    input_range: tuple[float, float] = (-10.0, 10.0),
) -> EquivalenceReport:
    """Compare two graphs on seeded random inputs; pass iff max error <= tol.

    Per-trial generators are spawned from the master seed, so the report is
    reproducible and trials could be evaluated in any order.
    """
    if g1.input_channels != g2.input_channels or g1.output_channels != g2.output_channels:
        raise ShapeMismatchError(
            "graphs have different signatures: "
            f"{g1.input_channels}->{g1.output_channels} vs "
            f"{g2.input_channels}->{g2.output_channels}"
        )
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    h, w = input_hw
    lo, hi = input_range
    worst = 0.0
    for ss in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(ss)
        x = rng.uniform(lo, hi, size=(g1.input_channels, h, w)).astype(np.float32)
        err = float(np.abs(forward_graph(g1, x) - forward_graph(g2, x)).max())
        worst = max(worst, err)
    return EquivalenceReport(
        max_abs_error=worst, trials=trials, seed=seed, tol=tol, passed=worst <= tol
    )


# ---------------------------------------------------------------------------
# Graph JSON format
# ---------------------------------------------------------------------------
# {version, input_channels, blocks: [{main: {conv, bn?}, one_by_one?: {conv,
# bn?}, identity_bn?: {...}, activation}]} with conv/bn tensors stored as
# .bevt files next to the JSON document.


def _conv_entry(conv: ConvSpec, name: str, tensor_dir: Path, rel: str) -> dict:
    save_tensor(conv.weights, tensor_dir / f"{name}_w.bevt")
    save_tensor(conv.bias, tensor_dir / f"{name}_b.bevt")
    return {
        "weights": f"{rel}/{name}_w.bevt",
        "bias": f"{rel}/{name}_b.bevt",
        "stride": list(conv.stride),
        "padding": list(conv.padding),
    }


def _bn_entry(bn: BatchNormSpec, name: str, tensor_dir: Path, rel: str) -> dict:
    entry = {"eps": bn.eps}
    for f in ("mean", "var", "gamma", "beta"):
        save_tensor(getattr(bn, f), tensor_dir / f"{name}_{f}.bevt")
        entry[f] = f"{rel}/{name}_{f}.bevt"
    return entry


def save_graph(g: GraphDesc, path) -> None:
    path = Path(path)
    rel = path.stem + "_tensors"
    tensor_dir = path.parent / rel
    tensor_dir.mkdir(parents=True, exist_ok=True)
    blocks = []
    for i, b in enumerate(g.blocks):
        entry: dict = {
            "main": {"conv": _conv_entry(b.main_conv, f"block{i:03d}_main", tensor_dir, rel)},
            "activation": b.activation,
        }
        if b.main_bn is not None:
            entry["main"]["bn"] = _bn_entry(b.main_bn, f"block{i:03d}_main_bn", tensor_dir, rel)
        if b.one_by_one_conv is not None:
            entry["one_by_one"] = {
                "conv": _conv_entry(b.one_by_one_conv, f"block{i:03d}_1x1", tensor_dir, rel)
            }
            if b.one_by_one_bn is not None:
                entry["one_by_one"]["bn"] = _bn_entry(
                    b.one_by_one_bn, f"block{i:03d}_1x1_bn", tensor_dir, rel
                )
        if b.identity_bn is not None:
            entry["identity_bn"] = _bn_entry(b.identity_bn, f"block{i:03d}_id_bn", tensor_dir, rel)
        blocks.append(entry)
    doc = {"version": 1, "input_channels": g.input_channels, "blocks": blocks}
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _load_conv(entry: dict, base: Path) -> ConvSpec:
    return ConvSpec(
        load_tensor(base / entry["weights"]),
        load_tensor(base / entry["bias"]),
        stride=tuple(entry["stride"]),
        padding=tuple(entry["padding"]),
    )


def _load_bn(entry: dict, base: Path) -> BatchNormSpec:
    return BatchNormSpec(
        *(load_tensor(base / entry[f]) for f in ("mean", "var", "gamma", "beta")),
        eps=entry["eps"],
    )


def load_graph(path) -> GraphDesc:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read graph: {exc}") from exc
    if doc.get("version") != 1:
        raise ConfigError(f"{path}: unsupported graph version {doc.get('version')}")
    base = path.parent
    blocks = []
    try:
        for entry in doc["blocks"]:
            blocks.append(
                BranchBlock(
                    main_conv=_load_conv(entry["main"]["conv"], base),
                    main_bn=_load_bn(entry["main"]["bn"], base) if "bn" in entry["main"] else None,
                    one_by_one_conv=(
                        _load_conv(entry["one_by_one"]["conv"], base)
                        if "one_by_one" in entry
                        else None
                    ),
                    one_by_one_bn=(
                        _load_bn(entry["one_by_one"]["bn"], base)
                        if "one_by_one" in entry and "bn" in entry["one_by_one"]
                        else None
                    ),
                    identity_bn=(
                        _load_bn(entry["identity_bn"], base) if "identity_bn" in entry else None
                    ),
                    activation=entry.get("activation", "none"),
                )
            )
        return GraphDesc(input_channels=doc["input_channels"], blocks=tuple(blocks))
    except KeyError as exc:
        raise ConfigError(f"{path}: graph document is missing key {exc}") from exc


def raise_if_failed(report: EquivalenceReport) -> None:
    if not report.passed:
        raise VerificationError(
            f"equivalence check failed: max |err| {report.max_abs_error:.3e} "
            f"> tol {report.tol:.3e}"
        )
