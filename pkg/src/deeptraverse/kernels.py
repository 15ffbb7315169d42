"""Differentiable NCHW kernels: convolution, batch normalization, activations,
pooling, channel scaling, and the classification loss.

Every forward here has a matching backward used by the autodiff tape, and a
naive loop twin in `oracles` used only by the test suite. Convolutions
dispatch on structure: pointwise (1x1) goes through BLAS matmul, depthwise
through the accelerated per-channel loops, anything else through im2col.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import _accel as accel
from .errors import ConfigError, InputError
from .tensor import guard_finite, require_nchw

# ---------------------------------------------------------------------------
# parameter records


@dataclass
class ConvParams:
    """2-d convolution weights: (C_out, C_in // groups, kh, kw), zero padding."""

    weights: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"conv stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ConfigError(f"conv padding must be >= 0, got {self.padding}")
        if self.groups < 1:
            raise ConfigError(f"conv groups must be >= 1, got {self.groups}")
        if self.weights.ndim != 4:
            raise ConfigError(f"conv weights must be 4-d, got shape {self.weights.shape}")
        if self.weights.shape[0] % self.groups != 0:
            raise ConfigError(
                f"conv output channels {self.weights.shape[0]} not divisible by groups {self.groups}"
            )


@dataclass
class BatchNormParams:
    """Per-channel affine normalization with tracked running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    mode: str = "inference"

    def __post_init__(self):
        if not (0.0 < self.momentum <= 1.0):
            raise ConfigError(f"batchnorm momentum must lie in (0, 1], got {self.momentum}")
        if self.epsilon <= 0.0:
            raise ConfigError(f"batchnorm epsilon must be positive, got {self.epsilon}")


def _resolve_mode(p: BatchNormParams, mode: str | None) -> str:
    m = p.mode if mode is None else mode
    if m not in ("training", "inference"):
        raise ConfigError(f"batchnorm mode must be 'training' or 'inference', got {m!r}")
    return m


# ---------------------------------------------------------------------------
# convolution


def _zero_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def _conv_geometry(x: np.ndarray, p: ConvParams):
    require_nchw(x, "conv2d")
    n, c_in, h, w = x.shape
    c_out, c_in_per_group, kh, kw = p.weights.shape
    if c_in % p.groups != 0:
        raise ConfigError(f"conv2d: input channels {c_in} not divisible by groups {p.groups}")
    if c_in_per_group != c_in // p.groups:
        raise ConfigError(
            f"conv2d: weights expect {c_in_per_group} input channels per group, "
            f"input provides {c_in // p.groups} ({c_in} channels / {p.groups} groups)"
        )
    if p.bias is not None and p.bias.shape != (c_out,):
        raise ConfigError(f"conv2d: bias length {p.bias.shape} does not match output channels {c_out}")
    ho = (h + 2 * p.padding - kh) // p.stride + 1
    wo = (w + 2 * p.padding - kw) // p.stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(
            f"conv2d: output extent {ho}x{wo} is not positive "
            f"(input {h}x{w}, kernel {kh}x{kw}, pad {p.padding}, stride {p.stride})"
        )
    return n, c_in, h, w, c_out, kh, kw, ho, wo


def _is_depthwise(p: ConvParams, c_in: int) -> bool:
    c_out = p.weights.shape[0]
    return p.groups == c_in and c_out == c_in and p.weights.shape[1] == 1


def _is_pointwise(p: ConvParams) -> bool:
    return p.weights.shape[2] == 1 and p.weights.shape[3] == 1 and p.groups == 1 and p.padding == 0


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    win = as_strided(
        xp,
        (n, c, ho, wo, kh, kw),
        (sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    # (n, c, kh, kw, ho, wo) flattened so kernel taps vary fastest per channel
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Grouped 2-d convolution with zero padding; channels never mix across groups."""
    n, c_in, h, w, c_out, kh, kw, ho, wo = _conv_geometry(x, p)
    wgt = p.weights
    if _is_pointwise(p):
        xs = x[:, :, :: p.stride, :: p.stride] if p.stride > 1 else x
        y = np.matmul(wgt.reshape(c_out, c_in), xs.reshape(n, c_in, ho * wo))
        y = y.reshape(n, c_out, ho, wo)
    elif _is_depthwise(p, c_in):
        xp = _zero_pad(x, p.padding)
        y = np.empty((n, c_out, ho, wo), dtype=x.dtype)
        accel.dw_fwd(xp, np.ascontiguousarray(wgt), y, p.stride)
    else:
        xp = _zero_pad(x, p.padding)
        cols = _im2col(xp, kh, kw, p.stride, ho, wo)
        g = p.groups
        k = (c_in // g) * kh * kw
        w2d = wgt.reshape(g, c_out // g, k)
        y = np.matmul(w2d[None], cols.reshape(n, g, k, ho * wo)).reshape(n, c_out, ho, wo)
    if p.bias is not None:
        y += p.bias[None, :, None, None]
    return guard_finite(y, "conv2d")


def conv2d_backward(x: np.ndarray, p: ConvParams, gy: np.ndarray, need_input_grad: bool = True):
    """Gradients of conv2d: returns (grad_x or None, grad_weights, grad_bias or None)."""
    n, c_in, h, w, c_out, kh, kw, ho, wo = _conv_geometry(x, p)
    gy = np.ascontiguousarray(gy)
    gb = np.einsum("nchw->c", gy) if p.bias is not None else None
    wgt = p.weights
    gx = None
    if _is_pointwise(p):
        xs = x[:, :, :: p.stride, :: p.stride] if p.stride > 1 else x
        gy2 = gy.reshape(n, c_out, ho * wo)
        gw = np.einsum("nol,nil->oi", gy2, xs.reshape(n, c_in, ho * wo), optimize=True)
        gw = gw.reshape(wgt.shape)
        if need_input_grad:
            gxs = np.matmul(wgt.reshape(c_out, c_in).T, gy2).reshape(n, c_in, ho, wo)
            if p.stride > 1:
                gx = np.zeros_like(x)
                gx[:, :, :: p.stride, :: p.stride] = gxs
            else:
                gx = gxs
    elif _is_depthwise(p, c_in):
        xp = _zero_pad(x, p.padding)
        gw = np.empty_like(wgt)
        accel.dw_wgrad(xp, gy, gw, p.stride)
        if need_input_grad:
            gxp = np.zeros_like(xp)
            accel.dw_dgrad(gxp, np.ascontiguousarray(wgt), gy, p.stride)
            pad = p.padding
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
            gx = np.ascontiguousarray(gx)
    else:
        xp = _zero_pad(x, p.padding)
        cols = _im2col(xp, kh, kw, p.stride, ho, wo)
        g = p.groups
        k = (c_in // g) * kh * kw
        gyg = gy.reshape(n, g, c_out // g, ho * wo)
        gw = np.einsum("ngol,ngkl->gok", gyg, cols.reshape(n, g, k, ho * wo), optimize=True)
        gw = gw.reshape(wgt.shape)
        if need_input_grad:
            w2d = wgt.reshape(g, c_out // g, k)
            gcols = np.matmul(w2d.transpose(0, 2, 1)[None], gyg)  # (n, g, k, L)
            gcols = gcols.reshape(n, c_in, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            s = p.stride
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, :, ki : ki + s * (ho - 1) + 1 : s, kj : kj + s * (wo - 1) + 1 : s] += gcols[
                        :, :, ki, kj
                    ]
            pad = p.padding
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
            gx = np.ascontiguousarray(gx)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm2d_parts(x: np.ndarray, p: BatchNormParams, mode: str | None = None):
    """Forward plus the (mu, inv_std, mode) cache the backward needs.

    Training mode normalizes with biased batch statistics and folds the batch
    into the running estimates in place; inference is a pure affine map from
    the running statistics.
    """
    require_nchw(x, "batchnorm2d")
    n, c, h, w = x.shape
    if p.gamma.shape != (c,):
        raise ConfigError(f"batchnorm2d: params sized for {p.gamma.shape[0]} channels, input has {c}")
    m = _resolve_mode(p, mode)
    if m == "training":
        count = n * h * w
        if count < 2:
            raise InputError(f"batchnorm2d training needs >= 2 values per channel, got {count}")
        sums = np.empty(c, dtype=x.dtype)
        sumsq = np.empty(c, dtype=x.dtype)
        accel.channel_sums(np.ascontiguousarray(x), sums, sumsq)
        mu = sums / count
        var = sumsq / count - mu * mu
        np.maximum(var, 0.0, out=var)  # guard tiny negative round-off
        p.running_mean *= 1.0 - p.momentum
        p.running_mean += p.momentum * mu
        p.running_var *= 1.0 - p.momentum
        p.running_var += p.momentum * var
    else:
        mu = p.running_mean
        var = p.running_var
    inv = 1.0 / np.sqrt(var + p.epsilon)
    y = np.empty_like(x)
    accel.affine_channels(np.ascontiguousarray(x), p.gamma * inv, p.beta - p.gamma * mu * inv, y)
    return guard_finite(y, "batchnorm2d"), (mu, inv, m)


def batchnorm2d(x: np.ndarray, p: BatchNormParams, mode: str | None = None) -> np.ndarray:
    y, _ = batchnorm2d_parts(x, p, mode)
    return y


def batchnorm2d_backward(x: np.ndarray, p: BatchNormParams, cache, gy: np.ndarray):
    """Returns (grad_x, grad_gamma, grad_beta); training mode differentiates
    through the batch statistics."""
    mu, inv, mode = cache
    n, c, h, w = x.shape
    gy = np.ascontiguousarray(gy)
    x = np.ascontiguousarray(x)
    sgy = np.empty(c, dtype=x.dtype)
    sgyx = np.empty(c, dtype=x.dtype)
    accel.shifted_sums(x, gy, np.ascontiguousarray(mu), sgy, sgyx)
    dbeta = sgy
    dgamma = sgyx * inv
    gi = p.gamma * inv
    gx = np.empty_like(x)
    if mode == "training":
        count = n * h * w
        a = gi
        b = -gi * inv * inv * sgyx / count
        d = gi * (inv * inv * sgyx * mu / count - sgy / count)
        accel.fused_bwd(gy, x, a, b, d, gx)
    else:
        accel.affine_channels(gy, gi, np.zeros_like(gi), gx)
    return gx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations, dropout, pooling, scaling


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    gx = np.empty_like(x)
    accel.relu_bwd(np.ascontiguousarray(x), np.ascontiguousarray(gy), gx)
    return gx


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, overflow-safe on both tails."""
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y


def sigmoid_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return gy * (y * (1.0 - y))


def dropout_parts(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None):
    """Inverted dropout: returns (y, scaled_mask or None). Identity at inference."""
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "inference" or rate == 0.0:
        return x, None
    if rng is None:
        raise InputError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype)
    mask *= 1.0 / (1.0 - rate)
    return x * mask, mask


def dropout(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    y, _ = dropout_parts(x, rate, mode, rng)
    return y


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over each channel plane, to N x C x 1 x 1.

    Computed relative to the plane's first element so constant planes pool to
    exactly that constant.
    """
    require_nchw(x, "global_avg_pool")
    ref = x[:, :, :1, :1]
    return ref + (x - ref).mean(axis=(2, 3), keepdims=True)


def channel_scale(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Multiply each channel plane of x by its scalar from s (N x C x 1 x 1)."""
    require_nchw(x, "channel_scale")
    if s.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ConfigError(
            f"channel_scale: scale shape {s.shape} does not match input batch/channels "
            f"({x.shape[0]} x {x.shape[1]} x 1 x 1 expected)"
        )
    return x * s


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ConfigError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy_parts(logits: np.ndarray, labels):
    if logits.ndim != 2:
        raise ConfigError(f"softmax_cross_entropy expects N x classes logits, got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise InputError(f"labels length {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise InputError(f"label {bad} outside [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    per_sample = np.log(denom[:, 0]) - z[np.arange(n), labels]
    loss = float(per_sample.mean())
    return loss, probs


def softmax_cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean negative log-likelihood under a softmax, max-shifted for stability."""
    loss, _ = softmax_cross_entropy_parts(logits, labels)
    return loss


def softmax_cross_entropy_backward(probs: np.ndarray, labels, gloss: float = 1.0) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    g *= gloss / n
    return g
