"""Whole-model assembly: stem -> stacked blocks -> pooled linear head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks, ops
from .autograd import Node, Tape
from .config import ModelConfig
from .errors import ConfigError, FormatError
from .kernels import BatchNormParams, ConvParams


@dataclass
class ParamEntry:
    name: str
    value: np.ndarray
    decay: bool  # weight decay applies only to conv/linear weights


class Model:
    def __init__(self, config: ModelConfig, stem_conv: ConvParams, stem_bn: BatchNormParams,
                 block_list: list[blocks.BlockParams], head: ConvParams):
        self.config = config
        self.stem_conv = stem_conv
        self.stem_bn = stem_bn
        self.blocks = block_list
        self.head = head
        self._params = self._collect_params()
        self._buffers = self._collect_buffers()
        ids = [id(e.value) for e in self._params]
        if len(set(ids)) != len(ids):
            raise ConfigError("parameter registry contains a duplicate tensor")

    def _collect_params(self) -> list[ParamEntry]:
        entries = []
        for name, value, decay in blocks.conv_entries("stem.conv", self.stem_conv):
            entries.append(ParamEntry(name, value, decay))
        for name, value, decay in blocks.batchnorm_entries("stem.bn", self.stem_bn):
            entries.append(ParamEntry(name, value, decay))
        for i, b in enumerate(self.blocks):
            for name, value, decay in blocks.block_entries(f"blocks.{i}", b):
                entries.append(ParamEntry(name, value, decay))
        for name, value, decay in blocks.conv_entries("head", self.head):
            entries.append(ParamEntry(name, value, decay))
        return entries

    def _collect_buffers(self) -> list[tuple[str, np.ndarray]]:
        buffers = list(blocks.batchnorm_buffers("stem.bn", self.stem_bn))
        for i, b in enumerate(self.blocks):
            buffers.extend(blocks.block_buffers(f"blocks.{i}", b))
        return buffers

    def parameters(self) -> list[ParamEntry]:
        return self._params

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return self._buffers

    def state(self) -> dict[str, np.ndarray]:
        out = {e.name: e.value for e in self._params}
        out.update(dict(self._buffers))
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        """Copy named tensors in; every model tensor must be present with the
        right shape. Extra names in `tensors` are ignored."""
        state = self.state()
        for name, target in state.items():
            if name not in tensors:
                raise FormatError(f"checkpoint is missing tensor {name!r}")
            src = tensors[name]
            if src.shape != target.shape:
                raise FormatError(
                    f"tensor {name!r} has shape {src.shape}, model expects {target.shape}"
                )
            target[...] = src


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Deterministic construction: one generator seeded once, drawn in a fixed
    layer order."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    stem_conv = blocks.make_conv(rng, cfg.input_channels, cfg.stem_channels, 3, stride=1, padding=1)
    stem_bn = blocks.make_batchnorm(cfg.stem_channels)
    block_list = []
    c_in = cfg.stem_channels
    for stage in cfg.stages:
        recursion = stage.recursion_override if stage.recursion_override is not None else cfg.recursion
        for bi in range(stage.num_blocks):
            stride = stage.stride if bi == 0 else 1
            block_list.append(
                blocks.make_block(
                    rng, c_in, stage.out_channels, stride, cfg.depthwise_kernel,
                    recursion, cfg.reduction, cfg.dropout_rate, cfg.width_floor,
                )
            )
            c_in = stage.out_channels
    head = blocks.make_conv(rng, c_in, cfg.num_classes, 1, bias=True)
    return Model(cfg, stem_conv, stem_bn, block_list, head)


def forward(tape: Tape, model: Model, x: Node, mode: str, rng=None) -> Node:
    """Logits (N x num_classes) for a batch node. Inference mode is a pure
    function of the parameters and running statistics."""
    h = ops.conv2d(tape, x, model.stem_conv)
    h = ops.batchnorm2d(tape, h, model.stem_bn, mode)
    h = ops.relu(tape, h)
    for b in model.blocks:
        h = blocks.block_forward(tape, h, b, mode, rng)
    h = ops.global_avg_pool(tape, h)
    h = ops.conv2d(tape, h, model.head)
    n = x.value.shape[0]
    return ops.reshape(tape, h, (n, model.config.num_classes))


def forward_array(model: Model, x: np.ndarray, mode: str = "inference", rng=None) -> np.ndarray:
    """Convenience forward on a plain array without gradient recording."""
    tape = Tape(recording=False)
    return forward(tape, model, tape.constant(x), mode, rng).value


def loss_forward(tape: Tape, model: Model, x: np.ndarray, labels, mode: str, rng=None):
    """Returns (logits node, scalar loss node) for one batch."""
    logits = forward(tape, model, tape.constant(x), mode, rng)
    loss = ops.softmax_cross_entropy(tape, logits, labels)
    return logits, loss


def predict(logits: np.ndarray) -> np.ndarray:
    """Per-row argmax; ties resolve to the lowest index."""
    return np.argmax(logits, axis=1)
