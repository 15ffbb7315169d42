"""Taped wrappers around the kernels: forward once, register the matching
vector-Jacobian product on the tape."""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .autograd import Node, Tape
from .errors import InputError


def conv2d(tape: Tape, x: Node, p: K.ConvParams) -> Node:
    w = tape.leaf(p.weights)
    y = K.conv2d(x.value, p)
    if p.bias is not None:
        b = tape.leaf(p.bias)

        def vjp(g):
            gx, gw, gb = K.conv2d_backward(x.value, p, g, need_input_grad=x.requires_grad)
            return gx, gw, gb

        return tape.record(y, (x, w, b), vjp)

    def vjp(g):
        gx, gw, _ = K.conv2d_backward(x.value, p, g, need_input_grad=x.requires_grad)
        return gx, gw

    return tape.record(y, (x, w), vjp)


def batchnorm2d(tape: Tape, x: Node, p: K.BatchNormParams, mode: str | None = None) -> Node:
    gamma = tape.leaf(p.gamma)
    beta = tape.leaf(p.beta)
    y, cache = K.batchnorm2d_parts(x.value, p, mode)

    def vjp(g):
        return K.batchnorm2d_backward(x.value, p, cache, g)

    return tape.record(y, (x, gamma, beta), vjp)


def relu(tape: Tape, x: Node) -> Node:
    y = K.relu(x.value)

    def vjp(g):
        return (K.relu_backward(x.value, g),)

    return tape.record(y, (x,), vjp)


def sigmoid(tape: Tape, x: Node) -> Node:
    y = K.sigmoid(x.value)

    def vjp(g):
        return (K.sigmoid_backward(y, g),)

    return tape.record(y, (x,), vjp)


def dropout(tape: Tape, x: Node, rate: float, mode: str, rng: np.random.Generator | None = None) -> Node:
    y, mask = K.dropout_parts(x.value, rate, mode, rng)
    if mask is None:
        return x

    def vjp(g):
        return (g * mask,)

    return tape.record(y, (x,), vjp)


def global_avg_pool(tape: Tape, x: Node) -> Node:
    y = K.global_avg_pool(x.value)
    n, c, h, w = x.value.shape

    def vjp(g):
        return (np.broadcast_to(g / (h * w), x.value.shape),)

    return tape.record(y, (x,), vjp)


def channel_scale(tape: Tape, x: Node, s: Node) -> Node:
    y = K.channel_scale(x.value, s.value)

    def vjp(g):
        gx = g * s.value if x.requires_grad else None
        n, c = x.value.shape[:2]
        gs = np.einsum("nchw,nchw->nc", g, x.value).reshape(n, c, 1, 1)
        return gx, gs

    return tape.record(y, (x, s), vjp)


def add(tape: Tape, a: Node, b: Node) -> Node:
    y = K.add(a.value, b.value)

    def vjp(g):
        return g, g

    return tape.record(y, (a, b), vjp)


def mul(tape: Tape, a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise InputError(f"mul: shape mismatch {a.value.shape} vs {b.value.shape}")
    y = a.value * b.value

    def vjp(g):
        return g * b.value, g * a.value

    return tape.record(y, (a, b), vjp)


def reshape(tape: Tape, x: Node, shape) -> Node:
    y = x.value.reshape(shape)

    def vjp(g):
        return (g.reshape(x.value.shape),)

    return tape.record(y, (x,), vjp)


def sum_all(tape: Tape, x: Node) -> Node:
    y = np.asarray(x.value.sum())

    def vjp(g):
        return (np.broadcast_to(g, x.value.shape),)

    return tape.record(y, (x,), vjp)


def softmax_cross_entropy(tape: Tape, logits: Node, labels) -> Node:
    loss, probs = K.softmax_cross_entropy_parts(logits.value, labels)

    def vjp(g):
        return (K.softmax_cross_entropy_backward(probs, labels, float(g)),)

    return tape.record(np.asarray(loss), (logits,), vjp)
