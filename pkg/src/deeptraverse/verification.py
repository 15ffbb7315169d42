"""Finite-difference verification of the backward passes.

Shared by the command-line `gradcheck` entry point and the acceptance
tests. Parameters are re-randomized before checking so no gradient path is
accidentally zero (several tensors initialize to exact zeros for training
stability, which would make their checks vacuous).
"""

from __future__ import annotations

import numpy as np

from . import blocks, network, ops
from .autograd import GradCheckReport, Tape, grad_check
from .config import ModelConfig, dt_tiny
from .errors import ConfigError
from .tensor import default_dtype


def require_float64() -> None:
    if default_dtype() != np.dtype(np.float64):
        raise ConfigError("gradient checking runs in float64 only; switch the dtype back")


def randomize_params(params: dict[str, np.ndarray], rng: np.random.Generator) -> None:
    for name, arr in params.items():
        if name.endswith(".gamma"):
            arr[...] = 1.0 + 0.15 * rng.standard_normal(arr.shape)
        else:
            arr[...] = 0.15 * rng.standard_normal(arr.shape)


def randomize_buffers(buffers, rng: np.random.Generator) -> None:
    for name, arr in buffers:
        if name.endswith("running_var"):
            arr[...] = 0.6 + 0.8 * rng.random(arr.shape)
        else:
            arr[...] = 0.1 * rng.standard_normal(arr.shape)


def _grads_or_zeros(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in params.items():
        g = tape.grad_for(arr)
        out[name] = np.zeros_like(arr) if g is None else g
    return out


def _probe_pair(run, out_shape: tuple, params: dict, rng: np.random.Generator):
    """Loss/analytic callables for `grad_check` from a tape-running closure.

    The probe loss is a fixed random-weighted sum of the output. A plain sum
    would be degenerate here: outputs that end in a training-mode batchnorm
    sum to a constant per channel, zeroing every upstream gradient.
    """
    weights = rng.standard_normal(out_shape)

    def loss_fn():
        return float((run(Tape(recording=False)).value * weights).sum())

    def analytic():
        tape = Tape()
        out = run(tape)
        loss = ops.sum_all(tape, ops.mul(tape, out, tape.constant(weights)))
        tape.backward(loss)
        return _grads_or_zeros(tape, params)

    return loss_fn, analytic


def check_quadratic(seed: int = 0, samples: int = 200) -> GradCheckReport:
    """Sanity anchor: f(theta) = sum(theta^2) has gradient 2*theta exactly.

    Central differences are exact for quadratics at any step, so a large h
    keeps summation round-off out of the difference; coordinates are bounded
    away from zero so relative error is meaningful."""
    rng = np.random.default_rng(seed)
    theta = np.sign(rng.standard_normal(257)) * (0.5 + rng.random(257))
    params = {"theta": theta}

    def loss_fn():
        return float((theta**2).sum())

    return grad_check(loss_fn, params, {"theta": 2.0 * theta}, h=1e-2, tol=1e-9,
                      samples=samples, seed=seed + 1)


def check_exploration(steps: int, seed: int = 0, samples: int = 200) -> GradCheckReport:
    require_float64()
    rng = np.random.default_rng(seed)
    extract = blocks.make_extract(rng, 4, 8, 1, 3, dropout_rate=0.0)
    recursive = blocks.make_recursive(rng, 8, 3)
    params = {}
    for name, arr, _ in blocks.conv_entries("extract.depthwise", extract.depthwise):
        params[name] = arr
    for holder, prefix in (
        (extract.bn1, "extract.bn1"), (extract.bn2, "extract.bn2"),
        (recursive.bn1, "recursive.bn1"), (recursive.bn2, "recursive.bn2"),
    ):
        for name, arr, _ in blocks.batchnorm_entries(prefix, holder):
            params[name] = arr
    for holder, prefix in (
        (extract.pointwise, "extract.pointwise"),
        (recursive.depthwise, "recursive.depthwise"),
        (recursive.pointwise, "recursive.pointwise"),
    ):
        for name, arr, _ in blocks.conv_entries(prefix, holder):
            params[name] = arr
    randomize_params(params, rng)
    randomize_buffers(
        list(blocks.batchnorm_buffers("extract.bn1", extract.bn1))
        + list(blocks.batchnorm_buffers("extract.bn2", extract.bn2))
        + list(blocks.batchnorm_buffers("recursive.bn1", recursive.bn1))
        + list(blocks.batchnorm_buffers("recursive.bn2", recursive.bn2)),
        rng,
    )
    x = rng.standard_normal((2, 4, 8, 8))

    def run(tape):
        return blocks.exploration_forward(tape, tape.constant(x), extract, recursive, steps, "training")

    out_shape = run(Tape(recording=False)).value.shape
    loss_fn, analytic = _probe_pair(run, out_shape, params, rng)
    return grad_check(loss_fn, params, analytic, samples=samples, seed=seed + 1)


def check_backtrack(seed: int = 0, samples: int = 200) -> GradCheckReport:
    require_float64()
    rng = np.random.default_rng(seed)
    p = blocks.make_backtrack(rng, 8, 4, width_floor=1)
    params = {}
    for name, arr, _ in blocks.conv_entries("reduce", p.reduce):
        params[name] = arr
    for name, arr, _ in blocks.conv_entries("expand", p.expand):
        params[name] = arr
    randomize_params(params, rng)
    x = rng.standard_normal((2, 8, 6, 6))

    def run(tape):
        return blocks.backtrack_forward(tape, tape.constant(x), p)

    loss_fn, analytic = _probe_pair(run, x.shape, params, rng)
    return grad_check(loss_fn, params, analytic, samples=samples, seed=seed + 1)


def check_block(projection: bool, seed: int = 0, samples: int = 200) -> GradCheckReport:
    require_float64()
    rng = np.random.default_rng(seed)
    c_out = 8 if projection else 4
    stride = 2 if projection else 1
    bp = blocks.make_block(rng, 4, c_out, stride, 3, recursion=2, reduction=4,
                           dropout_rate=0.0, width_floor=2)
    params = {name: arr for name, arr, _ in blocks.block_entries("block", bp)}
    randomize_params(params, rng)
    randomize_buffers(blocks.block_buffers("block", bp), rng)
    x = rng.standard_normal((2, 4, 8, 8))

    def run(tape):
        return blocks.block_forward(tape, tape.constant(x), bp, "training")

    out_shape = run(Tape(recording=False)).value.shape
    loss_fn, analytic = _probe_pair(run, out_shape, params, rng)
    return grad_check(loss_fn, params, analytic, samples=samples, seed=seed + 1)


def check_model(seed: int = 0, cfg: ModelConfig | None = None, samples: int = 200) -> GradCheckReport:
    """End-to-end cross-entropy gradient of the full reference model, with
    normalization frozen: batchnorm on running statistics, dropout off."""
    require_float64()
    cfg = cfg or dt_tiny()
    model = network.build_model(cfg, seed)
    rng = np.random.default_rng(seed + 17)
    params = {e.name: e.value for e in model.parameters()}
    randomize_params(params, rng)
    randomize_buffers(model.buffers(), rng)
    x = rng.standard_normal((2, cfg.input_channels, 8, 8))
    labels = rng.integers(0, cfg.num_classes, size=2)

    def loss_fn():
        tape = Tape(recording=False)
        _, loss = network.loss_forward(tape, model, x, labels, "inference")
        return float(loss.value)

    def analytic():
        tape = Tape()
        _, loss = network.loss_forward(tape, model, x, labels, "inference")
        tape.backward(loss)
        return _grads_or_zeros(tape, params)

    return grad_check(loss_fn, params, analytic, samples=samples, seed=seed + 1)


def full_suite(seed: int = 0) -> dict[str, GradCheckReport]:
    return {
        "exploration_r0": check_exploration(0, seed),
        "exploration_r1": check_exploration(1, seed),
        "exploration_r3": check_exploration(3, seed),
        "backtrack": check_backtrack(seed),
        "block_identity": check_block(False, seed),
        "block_projection": check_block(True, seed),
        "model_dt_tiny": check_model(seed),
    }
