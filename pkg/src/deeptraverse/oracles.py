"""Naive loop twins of the optimized kernels, plus FLOP instrumentation.

These are deliberately unoptimized nested loops: slow, obvious, and
independent of the vectorized code paths they validate. The optional
counter tallies the documented cost convention (1 MAC = 2 FLOPs, padding
taps included; batchnorm 2/element; relu 1; sigmoid 4; pooling 1 per
accumulated element; channel scale and residual add 1; dropout 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import BatchNormParams, ConvParams, _conv_geometry, _resolve_mode


@dataclass
class FlopCounter:
    flops: int = 0

    def tally(self, n: int) -> None:
        self.flops += n


def conv2d_oracle(x: np.ndarray, p: ConvParams, counter: FlopCounter | None = None) -> np.ndarray:
    n, c_in, h, w, c_out, kh, kw, ho, wo = _conv_geometry(x, p)
    cig = c_in // p.groups
    cog = c_out // p.groups
    pad, stride = p.padding, p.stride
    wgt = p.weights
    y = np.zeros((n, c_out, ho, wo), dtype=x.dtype)
    for nn in range(n):
        for oc in range(c_out):
            g = oc // cog
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(cig):
                        xc = g * cig + ic
                        for ki in range(kh):
                            xi = i * stride + ki - pad
                            if xi < 0 or xi >= h:
                                continue
                            for kj in range(kw):
                                xj = j * stride + kj - pad
                                if 0 <= xj < w:
                                    acc += wgt[oc, ic, ki, kj] * x[nn, xc, xi, xj]
                    if counter is not None:
                        counter.tally(2 * cig * kh * kw)  # padding taps count as MACs
                    if p.bias is not None:
                        acc += p.bias[oc]
                        if counter is not None:
                            counter.tally(1)
                    y[nn, oc, i, j] = acc
    return y


def batchnorm2d_oracle(
    x: np.ndarray, p: BatchNormParams, mode: str | None = None, counter: FlopCounter | None = None
) -> np.ndarray:
    m = _resolve_mode(p, mode)
    n, c, h, w = x.shape
    y = np.empty_like(x)
    for ch in range(c):
        if m == "training":
            count = n * h * w
            total = 0.0
            for nn in range(n):
                for i in range(h):
                    for j in range(w):
                        total += x[nn, ch, i, j]
            mean = total / count
            sq = 0.0
            for nn in range(n):
                for i in range(h):
                    for j in range(w):
                        d = x[nn, ch, i, j] - mean
                        sq += d * d
            var = sq / count
            p.running_mean[ch] = (1.0 - p.momentum) * p.running_mean[ch] + p.momentum * mean
            p.running_var[ch] = (1.0 - p.momentum) * p.running_var[ch] + p.momentum * var
        else:
            mean = p.running_mean[ch]
            var = p.running_var[ch]
        inv = 1.0 / math.sqrt(var + p.epsilon)
        for nn in range(n):
            for i in range(h):
                for j in range(w):
                    y[nn, ch, i, j] = p.gamma[ch] * (x[nn, ch, i, j] - mean) * inv + p.beta[ch]
                    if counter is not None:
                        counter.tally(2)
    return y


def relu_oracle(x: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    y = np.empty_like(x)
    flat_x = x.reshape(-1)
    flat_y = y.reshape(-1)
    for idx in range(flat_x.size):
        flat_y[idx] = flat_x[idx] if flat_x[idx] > 0.0 else 0.0
        if counter is not None:
            counter.tally(1)
    return y


def sigmoid_oracle(x: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    y = np.empty_like(x)
    flat_x = x.reshape(-1)
    flat_y = y.reshape(-1)
    for idx in range(flat_x.size):
        v = flat_x[idx]
        if v >= 0.0:
            flat_y[idx] = 1.0 / (1.0 + math.exp(-v))
        else:
            e = math.exp(v)
            flat_y[idx] = e / (1.0 + e)
        if counter is not None:
            counter.tally(4)
    return y


def global_avg_pool_oracle(x: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    n, c, h, w = x.shape
    y = np.empty((n, c, 1, 1), dtype=x.dtype)
    for nn in range(n):
        for ch in range(c):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += x[nn, ch, i, j]
                    if counter is not None:
                        counter.tally(1)
            y[nn, ch, 0, 0] = acc / (h * w)
    return y


def channel_scale_oracle(x: np.ndarray, s: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    n, c, h, w = x.shape
    y = np.empty_like(x)
    for nn in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    y[nn, ch, i, j] = x[nn, ch, i, j] * s[nn, ch, 0, 0]
                    if counter is not None:
                        counter.tally(1)
    return y


def add_oracle(a: np.ndarray, b: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    y = np.empty_like(a)
    fa, fb, fy = a.reshape(-1), b.reshape(-1), y.reshape(-1)
    for idx in range(fa.size):
        fy[idx] = fa[idx] + fb[idx]
        if counter is not None:
            counter.tally(1)
    return y


def model_forward_instrumented(model, x: np.ndarray, counter: FlopCounter) -> np.ndarray:
    """Inference forward through the naive kernels, tallying every operation.

    Mirrors the production forward exactly (dropout is the identity and costs
    nothing at inference). Feed a batch of one image to compare against the
    per-image analytic FLOP count.
    """
    h = conv2d_oracle(x, model.stem_conv, counter)
    h = batchnorm2d_oracle(h, model.stem_bn, "inference", counter)
    h = relu_oracle(h, counter)
    for b in model.blocks:
        f = conv2d_oracle(h, b.extract.depthwise, counter)
        f = batchnorm2d_oracle(f, b.extract.bn1, "inference", counter)
        f = relu_oracle(f, counter)
        f = conv2d_oracle(f, b.extract.pointwise, counter)
        f = batchnorm2d_oracle(f, b.extract.bn2, "inference", counter)
        for _ in range(b.recursion):
            r = conv2d_oracle(f, b.recursive.depthwise, counter)
            r = batchnorm2d_oracle(r, b.recursive.bn1, "inference", counter)
            r = relu_oracle(r, counter)
            r = conv2d_oracle(r, b.recursive.pointwise, counter)
            r = batchnorm2d_oracle(r, b.recursive.bn2, "inference", counter)
            f = add_oracle(f, r, counter)
        z = global_avg_pool_oracle(f, counter)
        a = relu_oracle(conv2d_oracle(z, b.backtrack.reduce, counter), counter)
        s = sigmoid_oracle(conv2d_oracle(a, b.backtrack.expand, counter), counter)
        f = channel_scale_oracle(f, s, counter)
        if b.shortcut.identity:
            skip = h
        else:
            skip = conv2d_oracle(h, b.shortcut.conv, counter)
            skip = batchnorm2d_oracle(skip, b.shortcut.bn, "inference", counter)
        h = relu_oracle(add_oracle(f, skip, counter), counter)
    pooled = global_avg_pool_oracle(h, counter)
    logits = conv2d_oracle(pooled, model.head, counter)
    return logits.reshape(x.shape[0], -1)


def softmax_cross_entropy_oracle(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    total = 0.0
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > mx:
                mx = logits[i, j]
        denom = 0.0
        for j in range(c):
            denom += math.exp(logits[i, j] - mx)
        total += math.log(denom) - (logits[i, labels[i]] - mx)
    return total / n
