"""Analytic parameter and FLOP accounting.

The structural claim being verified: parameter count is constant in the
recursion depth, compute is exactly affine in it. Costs are per single
input image at a stated resolution under the documented convention
(1 MAC = 2 FLOPs with padding taps included; batchnorm 2/element at
inference; relu 1; sigmoid 4; pooling 1 per accumulated element; channel
scale and residual add 1/element; dropout 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import BlockParams
from .config import ModelConfig
from .kernels import BatchNormParams, ConvParams
from .network import Model

COST_CONVENTION = (
    "1 MAC = 2 FLOPs (padding taps counted); batchnorm 2/element (inference); "
    "relu 1; sigmoid 4; pooling 1 per accumulated element; "
    "channel scale and residual add 1/element; dropout 0"
)


@dataclass
class CostRow:
    path: str
    params: int
    flops: int


@dataclass
class CostReport:
    method: str
    input_h: int
    input_w: int
    rows: list[CostRow] = field(default_factory=list)
    notes: str = ""

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)


# ---------------------------------------------------------------------------
# parameters


def _conv_param_count(p: ConvParams) -> int:
    return p.weights.size + (p.bias.size if p.bias is not None else 0)


def _bn_param_count(p: BatchNormParams) -> int:
    return p.gamma.size + p.beta.size  # running statistics are not learnable


def _block_param_count(b: BlockParams) -> int:
    total = _conv_param_count(b.extract.depthwise) + _bn_param_count(b.extract.bn1)
    total += _conv_param_count(b.extract.pointwise) + _bn_param_count(b.extract.bn2)
    total += _conv_param_count(b.recursive.depthwise) + _bn_param_count(b.recursive.bn1)
    total += _conv_param_count(b.recursive.pointwise) + _bn_param_count(b.recursive.bn2)
    total += _conv_param_count(b.backtrack.reduce) + _conv_param_count(b.backtrack.expand)
    if not b.shortcut.identity:
        total += _conv_param_count(b.shortcut.conv) + _bn_param_count(b.shortcut.bn)
    return total


def count_params(m: Model) -> int:
    """Each distinct learnable tensor counted once; the shared recursive set
    appears once regardless of how many refinement steps reuse it."""
    total = _conv_param_count(m.stem_conv) + _bn_param_count(m.stem_bn)
    for b in m.blocks:
        total += _block_param_count(b)
    return total + _conv_param_count(m.head)


def count_params_config(cfg: ModelConfig) -> int:
    """Closed-form count straight from the configuration, independent of any
    built model; used to cross-check the registry."""
    k2 = cfg.depthwise_kernel**2
    total = cfg.input_channels * cfg.stem_channels * 9 + 2 * cfg.stem_channels
    c_in = cfg.stem_channels
    for stage in cfg.stages:
        c = stage.out_channels
        hidden = max(c // cfg.reduction, cfg.width_floor)
        for bi in range(stage.num_blocks):
            stride = stage.stride if bi == 0 else 1
            total += c_in * k2 + 2 * c_in          # extract depthwise + bn1
            total += c_in * c + 2 * c              # extract pointwise + bn2
            total += c * k2 + 2 * c                # recursive depthwise + bn1
            total += c * c + 2 * c                 # recursive pointwise + bn2
            total += hidden * c + hidden + c * hidden + c  # excitation with biases
            if not (c_in == c and stride == 1):
                total += c_in * c + 2 * c          # projection shortcut
            c_in = c
    return total + c_in * cfg.num_classes + cfg.num_classes


# ---------------------------------------------------------------------------
# FLOPs (per image)


def _conv_flops(p: ConvParams, h: int, w: int) -> tuple[int, int, int]:
    c_out, cig, kh, kw = p.weights.shape
    ho = (h + 2 * p.padding - kh) // p.stride + 1
    wo = (w + 2 * p.padding - kw) // p.stride + 1
    flops = ho * wo * c_out * 2 * cig * kh * kw
    if p.bias is not None:
        flops += ho * wo * c_out
    return flops, ho, wo


def _elems(c: int, h: int, w: int) -> int:
    return c * h * w


def _block_flops(b: BlockParams, h: int, w: int) -> tuple[int, int, int]:
    c_in = b.extract.depthwise.weights.shape[0]
    c = b.extract.pointwise.weights.shape[0]
    f, ho, wo = _conv_flops(b.extract.depthwise, h, w)
    f += 2 * _elems(c_in, ho, wo)       # bn1
    f += _elems(c_in, ho, wo)           # relu (dropout is free at inference)
    fp, _, _ = _conv_flops(b.extract.pointwise, ho, wo)
    f += fp + 2 * _elems(c, ho, wo)     # pointwise + bn2

    step = _conv_flops(b.recursive.depthwise, ho, wo)[0]
    step += 2 * _elems(c, ho, wo) + _elems(c, ho, wo)
    step += _conv_flops(b.recursive.pointwise, ho, wo)[0]
    step += 2 * _elems(c, ho, wo)
    step += _elems(c, ho, wo)           # residual add
    f += b.recursion * step

    hidden = b.backtrack.reduce.weights.shape[0]
    f += _elems(c, ho, wo)              # squeeze: 1 per accumulated element
    f += _conv_flops(b.backtrack.reduce, 1, 1)[0] + hidden
    f += _conv_flops(b.backtrack.expand, 1, 1)[0] + 4 * c
    f += _elems(c, ho, wo)              # channel scale

    if not b.shortcut.identity:
        fs, _, _ = _conv_flops(b.shortcut.conv, h, w)
        f += fs + 2 * _elems(c, ho, wo)
    f += 2 * _elems(c, ho, wo)          # residual add + final relu
    return f, ho, wo


def count_flops(m: Model, input_shape: tuple[int, int]) -> int:
    return cost_report(m, input_shape).total_flops


def cost_report(m: Model, input_shape: tuple[int, int], method: str | None = None) -> CostReport:
    h, w = input_shape
    report = CostReport(method=method or "model", input_h=h, input_w=w, notes=COST_CONVENTION)
    c_stem = m.stem_conv.weights.shape[0]
    f, h, w = _conv_flops(m.stem_conv, h, w)
    f += 3 * _elems(c_stem, h, w)  # bn + relu
    report.rows.append(CostRow("stem", _conv_param_count(m.stem_conv) + _bn_param_count(m.stem_bn), f))
    for i, b in enumerate(m.blocks):
        f, h, w = _block_flops(b, h, w)
        report.rows.append(CostRow(f"blocks.{i}", _block_param_count(b), f))
    c_last = m.head.weights.shape[1]
    f = _elems(c_last, h, w)  # global pool
    f += _conv_flops(m.head, 1, 1)[0]
    report.rows.append(CostRow("head", _conv_param_count(m.head), f))
    return report


# ---------------------------------------------------------------------------
# report rendering


_TABLE_HEADER = f"{'method':<28}{'params(M)':>12}{'flops(G)':>12}{'top1(%)':>10}{'top5(%)':>10}"


def emit_cost_table(reports: list[CostReport]) -> tuple[str, str]:
    """Deterministic text table plus its machine-readable CSV twin."""
    text_lines = [f"# cost convention: {COST_CONVENTION}", _TABLE_HEADER]
    csv_lines = ["method,input_h,input_w,params,flops,notes"]
    for r in reports:
        text_lines.append(
            f"{r.method:<28}{r.total_params / 1e6:>12.2f}{r.total_flops / 1e9:>12.4f}{'-':>10}{'-':>10}"
        )
        note = r.notes.replace(",", ";")
        csv_lines.append(f"{r.method},{r.input_h},{r.input_w},{r.total_params},{r.total_flops},{note}")
    return "\n".join(text_lines) + "\n", "\n".join(csv_lines) + "\n"
