"""The three architectural units of the backbone.

* exploration: one extraction layer (depthwise separable conv, carrying the
  block's stride) followed by `recursion` residual refinement steps that all
  reuse a single set of recursive parameters;
* backtrack: squeeze-and-excitation style channel recalibration of the
  explored features;
* block: exploration -> backtrack -> residual add with (projection)
  shortcut -> ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Node, Tape
from .errors import ConfigError
from .kernels import BatchNormParams, ConvParams
from .tensor import default_dtype

# ---------------------------------------------------------------------------
# parameter records


@dataclass
class ExtractParams:
    depthwise: ConvParams
    bn1: BatchNormParams
    dropout_rate: float
    pointwise: ConvParams
    bn2: BatchNormParams


@dataclass
class RecursiveParams:
    """One instance per exploration block, reused across every refinement step."""

    depthwise: ConvParams
    bn1: BatchNormParams
    pointwise: ConvParams
    bn2: BatchNormParams


@dataclass
class BacktrackParams:
    reduce: ConvParams
    expand: ConvParams
    reduction: int


@dataclass
class ShortcutParams:
    identity: bool
    conv: ConvParams | None = None
    bn: BatchNormParams | None = None


@dataclass
class BlockParams:
    extract: ExtractParams
    recursive: RecursiveParams
    backtrack: BacktrackParams
    shortcut: ShortcutParams
    recursion: int


# ---------------------------------------------------------------------------
# initialization


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.normal(0.0, std, size=shape)).astype(default_dtype())


def make_conv(
    rng, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0,
    groups: int = 1, bias: bool = False, zero_init: bool = False,
) -> ConvParams:
    c_in_pg = c_in // groups
    fan_in = c_in_pg * kernel * kernel
    if zero_init:
        weights = np.zeros((c_out, c_in_pg, kernel, kernel), dtype=default_dtype())
    else:
        weights = _kaiming(rng, (c_out, c_in_pg, kernel, kernel), fan_in)
    b = np.zeros(c_out, dtype=default_dtype()) if bias else None
    return ConvParams(weights=weights, bias=b, stride=stride, padding=padding, groups=groups)


def make_batchnorm(channels: int, zero_gamma: bool = False, momentum: float = 0.1) -> BatchNormParams:
    dt = default_dtype()
    gamma = np.zeros(channels, dtype=dt) if zero_gamma else np.ones(channels, dtype=dt)
    return BatchNormParams(
        gamma=gamma,
        beta=np.zeros(channels, dtype=dt),
        running_mean=np.zeros(channels, dtype=dt),
        running_var=np.ones(channels, dtype=dt),
        momentum=momentum,
    )


def make_extract(rng, c_in: int, c_out: int, stride: int, kernel: int, dropout_rate: float) -> ExtractParams:
    pad = (kernel - 1) // 2
    return ExtractParams(
        depthwise=make_conv(rng, c_in, c_in, kernel, stride=stride, padding=pad, groups=c_in),
        bn1=make_batchnorm(c_in),
        dropout_rate=dropout_rate,
        pointwise=make_conv(rng, c_in, c_out, 1),
        bn2=make_batchnorm(c_out),
    )


def make_recursive(rng, channels: int, kernel: int) -> RecursiveParams:
    pad = (kernel - 1) // 2
    return RecursiveParams(
        depthwise=make_conv(rng, channels, channels, kernel, stride=1, padding=pad, groups=channels),
        bn1=make_batchnorm(channels),
        pointwise=make_conv(rng, channels, channels, 1),
        # zero gamma: each refinement step starts as the identity, which keeps
        # deep unrollings stable at initialization
        bn2=make_batchnorm(channels, zero_gamma=True),
    )


def make_backtrack(rng, channels: int, reduction: int, width_floor: int = 4) -> BacktrackParams:
    if reduction < 1:
        raise ConfigError(f"reduction ratio must be >= 1, got {reduction}")
    if width_floor < 1:
        raise ConfigError(f"bottleneck width floor must be >= 1, got {width_floor}")
    hidden = max(channels // reduction, width_floor)
    return BacktrackParams(
        reduce=make_conv(rng, channels, hidden, 1, bias=True),
        # zero expand weights + zero bias give a neutral 0.5 gate at init
        expand=make_conv(rng, hidden, channels, 1, bias=True, zero_init=True),
        reduction=reduction,
    )


def make_shortcut(rng, c_in: int, c_out: int, stride: int) -> ShortcutParams:
    if c_in == c_out and stride == 1:
        return ShortcutParams(identity=True)
    return ShortcutParams(
        identity=False,
        conv=make_conv(rng, c_in, c_out, 1, stride=stride),
        bn=make_batchnorm(c_out),
    )


def make_block(
    rng, c_in: int, c_out: int, stride: int, kernel: int, recursion: int,
    reduction: int, dropout_rate: float, width_floor: int = 4,
) -> BlockParams:
    if recursion < 0:
        raise ConfigError(f"recursion count must be >= 0, got {recursion}")
    return BlockParams(
        extract=make_extract(rng, c_in, c_out, stride, kernel, dropout_rate),
        recursive=make_recursive(rng, c_out, kernel),
        backtrack=make_backtrack(rng, c_out, reduction, width_floor),
        shortcut=make_shortcut(rng, c_in, c_out, stride),
        recursion=recursion,
    )


# ---------------------------------------------------------------------------
# forward passes


def extract_forward(tape: Tape, x: Node, p: ExtractParams, mode: str, rng=None) -> Node:
    h = ops.conv2d(tape, x, p.depthwise)
    h = ops.batchnorm2d(tape, h, p.bn1, mode)
    h = ops.relu(tape, h)
    h = ops.dropout(tape, h, p.dropout_rate, mode, rng)
    h = ops.conv2d(tape, h, p.pointwise)
    return ops.batchnorm2d(tape, h, p.bn2, mode)


def refine_step(tape: Tape, f: Node, p: RecursiveParams, mode: str) -> Node:
    """One refinement increment; no dropout inside the recursive branch."""
    h = ops.conv2d(tape, f, p.depthwise)
    h = ops.batchnorm2d(tape, h, p.bn1, mode)
    h = ops.relu(tape, h)
    h = ops.conv2d(tape, h, p.pointwise)
    return ops.batchnorm2d(tape, h, p.bn2, mode)


def exploration_forward(
    tape: Tape, x: Node, extract: ExtractParams, recursive: RecursiveParams,
    steps: int, mode: str, rng=None,
) -> Node:
    f = extract_forward(tape, x, extract, mode, rng)
    for _ in range(steps):
        f = ops.add(tape, f, refine_step(tape, f, recursive, mode))
    return f


def backtrack_forward(tape: Tape, f: Node, p: BacktrackParams) -> Node:
    z = ops.global_avg_pool(tape, f)
    h = ops.relu(tape, ops.conv2d(tape, z, p.reduce))
    s = ops.sigmoid(tape, ops.conv2d(tape, h, p.expand))
    return ops.channel_scale(tape, f, s)


def shortcut_forward(tape: Tape, x: Node, p: ShortcutParams, mode: str) -> Node:
    if p.identity:
        return x
    h = ops.conv2d(tape, x, p.conv)
    return ops.batchnorm2d(tape, h, p.bn, mode)


def block_forward(tape: Tape, x: Node, p: BlockParams, mode: str, rng=None) -> Node:
    explored = exploration_forward(tape, x, p.extract, p.recursive, p.recursion, mode, rng)
    recalibrated = backtrack_forward(tape, explored, p.backtrack)
    skip = shortcut_forward(tape, x, p.shortcut, mode)
    return ops.relu(tape, ops.add(tape, recalibrated, skip))


# ---------------------------------------------------------------------------
# parameter enumeration (the model registry builds on these)


def conv_entries(prefix: str, p: ConvParams):
    yield f"{prefix}.weight", p.weights, True
    if p.bias is not None:
        yield f"{prefix}.bias", p.bias, False


def batchnorm_entries(prefix: str, p: BatchNormParams):
    yield f"{prefix}.gamma", p.gamma, False
    yield f"{prefix}.beta", p.beta, False


def batchnorm_buffers(prefix: str, p: BatchNormParams):
    yield f"{prefix}.running_mean", p.running_mean
    yield f"{prefix}.running_var", p.running_var


def block_entries(prefix: str, p: BlockParams):
    yield from conv_entries(f"{prefix}.extract.depthwise", p.extract.depthwise)
    yield from batchnorm_entries(f"{prefix}.extract.bn1", p.extract.bn1)
    yield from conv_entries(f"{prefix}.extract.pointwise", p.extract.pointwise)
    yield from batchnorm_entries(f"{prefix}.extract.bn2", p.extract.bn2)
    yield from conv_entries(f"{prefix}.recursive.depthwise", p.recursive.depthwise)
    yield from batchnorm_entries(f"{prefix}.recursive.bn1", p.recursive.bn1)
    yield from conv_entries(f"{prefix}.recursive.pointwise", p.recursive.pointwise)
    yield from batchnorm_entries(f"{prefix}.recursive.bn2", p.recursive.bn2)
    yield from conv_entries(f"{prefix}.backtrack.reduce", p.backtrack.reduce)
    yield from conv_entries(f"{prefix}.backtrack.expand", p.backtrack.expand)
    if not p.shortcut.identity:
        yield from conv_entries(f"{prefix}.shortcut.conv", p.shortcut.conv)
        yield from batchnorm_entries(f"{prefix}.shortcut.bn", p.shortcut.bn)


def block_buffers(prefix: str, p: BlockParams):
    yield from batchnorm_buffers(f"{prefix}.extract.bn1", p.extract.bn1)
    yield from batchnorm_buffers(f"{prefix}.extract.bn2", p.extract.bn2)
    yield from batchnorm_buffers(f"{prefix}.recursive.bn1", p.recursive.bn1)
    yield from batchnorm_buffers(f"{prefix}.recursive.bn2", p.recursive.bn2)
    if not p.shortcut.identity:
        yield from batchnorm_buffers(f"{prefix}.shortcut.bn", p.shortcut.bn)
