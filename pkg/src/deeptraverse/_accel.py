"""Hot inner loops for the NCHW kernels.

Each routine exists three ways: a plain numpy version (suffix ``_np``) and,
when numba is importable, a serial and a thread-parallel jitted version.
The public name dispatches on array size: the parallel variants pay a
fork/join cost per call that only amortizes on training-sized batches.
The parallel loops never reduce across threads (``prange`` over an axis
that owns its output slot), so results are bitwise identical to the serial
variants for any thread count.
"""

from __future__ import annotations

import os

import numpy as np

# the builtin threading layer is available everywhere and keeps numba from
# probing TBB/OpenMP versions at first compile
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

# below this many output elements the serial kernels win
PARALLEL_MIN_SIZE = 1 << 15


# ---------------------------------------------------------------------------
# numpy reference implementations


def dw_fwd_np(xp, w, y, stride):
    """Depthwise conv forward. xp is the zero-padded input, y preallocated."""
    _, _, ho, wo = y.shape
    kh, kw = w.shape[2], w.shape[3]
    y[...] = 0.0
    for ki in range(kh):
        for kj in range(kw):
            part = xp[:, :, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride]
            y += w[:, 0, ki, kj][None, :, None, None] * part


def dw_dgrad_np(gxp, w, gy, stride):
    """Accumulate depthwise input gradient into the padded buffer gxp."""
    _, _, ho, wo = gy.shape
    kh, kw = w.shape[2], w.shape[3]
    for ki in range(kh):
        for kj in range(kw):
            target = gxp[:, :, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride]
            target += w[:, 0, ki, kj][None, :, None, None] * gy


def dw_wgrad_np(xp, gy, gw, stride):
    _, _, ho, wo = gy.shape
    kh, kw = gw.shape[2], gw.shape[3]
    for ki in range(kh):
        for kj in range(kw):
            part = xp[:, :, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride]
            gw[:, 0, ki, kj] = np.einsum("nchw,nchw->c", part, gy)


def channel_sums_np(x, out_sum, out_sumsq):
    out_sum[...] = np.einsum("nchw->c", x)
    out_sumsq[...] = np.einsum("nchw,nchw->c", x, x)


def shifted_sums_np(x, gy, mu, out_sgy, out_sgyx):
    out_sgy[...] = np.einsum("nchw->c", gy)
    out_sgyx[...] = np.einsum("nchw,nchw->c", gy, x - mu[None, :, None, None])


def affine_channels_np(x, scale, shift, y):
    np.multiply(x, scale[None, :, None, None], out=y)
    y += shift[None, :, None, None]


def fused_bwd_np(gy, x, a, b, d, gx):
    """gx = a[c]*gy + b[c]*x + d[c], fused per-channel combine."""
    np.multiply(gy, a[None, :, None, None], out=gx)
    gx += b[None, :, None, None] * x
    gx += d[None, :, None, None]


def relu_bwd_np(x, gy, gx):
    np.multiply(gy, x > 0.0, out=gx)


if HAVE_NUMBA:

    def _both(**jit_kwargs):
        """Decorator pair: (serial, parallel) compilations of one loop body."""

        def deco(py_func):
            serial = numba.njit(cache=True, **jit_kwargs)(py_func)
            parallel = numba.njit(cache=True, parallel=True, **jit_kwargs)(py_func)
            return serial, parallel

        return deco

    @_both()
    def _dw_fwd(xp, w, y, stride):
        n_, c_, ho, wo = y.shape
        kh, kw = w.shape[2], w.shape[3]
        for n in numba.prange(n_):
            for c in range(c_):
                for i in range(ho):
                    for j in range(wo):
                        y[n, c, i, j] = 0.0
                    for ki in range(kh):
                        row = i * stride + ki
                        for kj in range(kw):
                            wv = w[c, 0, ki, kj]
                            for j in range(wo):
                                y[n, c, i, j] += wv * xp[n, c, row, j * stride + kj]

    @_both()
    def _dw_dgrad(gxp, w, gy, stride):
        n_, c_, ho, wo = gy.shape
        kh, kw = w.shape[2], w.shape[3]
        for n in numba.prange(n_):
            for c in range(c_):
                for i in range(ho):
                    for ki in range(kh):
                        row = i * stride + ki
                        for kj in range(kw):
                            wv = w[c, 0, ki, kj]
                            for j in range(wo):
                                gxp[n, c, row, j * stride + kj] += wv * gy[n, c, i, j]

    @_both()
    def _dw_wgrad(xp, gy, gw, stride):
        n_, c_, ho, wo = gy.shape
        kh, kw = gw.shape[2], gw.shape[3]
        for c in numba.prange(c_):
            for ki in range(kh):
                for kj in range(kw):
                    acc = 0.0
                    for n in range(n_):
                        for i in range(ho):
                            row = i * stride + ki
                            for j in range(wo):
                                acc += xp[n, c, row, j * stride + kj] * gy[n, c, i, j]
                    gw[c, 0, ki, kj] = acc

    @_both()
    def _channel_sums(x, out_sum, out_sumsq):
        n_, c_, h_, w_ = x.shape
        for c in numba.prange(c_):
            s = 0.0
            q = 0.0
            for n in range(n_):
                for i in range(h_):
                    for j in range(w_):
                        v = x[n, c, i, j]
                        s += v
                        q += v * v
            out_sum[c] = s
            out_sumsq[c] = q

    @_both()
    def _shifted_sums(x, gy, mu, out_sgy, out_sgyx):
        n_, c_, h_, w_ = x.shape
        for c in numba.prange(c_):
            s = 0.0
            t = 0.0
            m = mu[c]
            for n in range(n_):
                for i in range(h_):
                    for j in range(w_):
                        g = gy[n, c, i, j]
                        s += g
                        t += g * (x[n, c, i, j] - m)
            out_sgy[c] = s
            out_sgyx[c] = t

    @_both()
    def _affine_channels(x, scale, shift, y):
        n_, c_, h_, w_ = x.shape
        for n in numba.prange(n_):
            for c in range(c_):
                sc = scale[c]
                sh = shift[c]
                for i in range(h_):
                    for j in range(w_):
                        y[n, c, i, j] = x[n, c, i, j] * sc + sh

    @_both()
    def _fused_bwd(gy, x, a, b, d, gx):
        n_, c_, h_, w_ = x.shape
        for n in numba.prange(n_):
            for c in range(c_):
                ac = a[c]
                bc = b[c]
                dc = d[c]
                for i in range(h_):
                    for j in range(w_):
                        gx[n, c, i, j] = ac * gy[n, c, i, j] + bc * x[n, c, i, j] + dc

    @_both()
    def _relu_bwd(x, gy, gx):
        n_, c_, h_, w_ = x.shape
        for n in numba.prange(n_):
            for c in range(c_):
                for i in range(h_):
                    for j in range(w_):
                        if x[n, c, i, j] > 0.0:
                            gx[n, c, i, j] = gy[n, c, i, j]
                        else:
                            gx[n, c, i, j] = 0.0

    def dw_fwd(xp, w, y, stride):
        _dw_fwd[y.size >= PARALLEL_MIN_SIZE](xp, w, y, stride)

    def dw_dgrad(gxp, w, gy, stride):
        _dw_dgrad[gxp.size >= PARALLEL_MIN_SIZE](gxp, w, gy, stride)

    def dw_wgrad(xp, gy, gw, stride):
        _dw_wgrad[gy.size >= PARALLEL_MIN_SIZE](xp, gy, gw, stride)

    def channel_sums(x, out_sum, out_sumsq):
        _channel_sums[x.size >= PARALLEL_MIN_SIZE](x, out_sum, out_sumsq)

    def shifted_sums(x, gy, mu, out_sgy, out_sgyx):
        _shifted_sums[x.size >= PARALLEL_MIN_SIZE](x, gy, mu, out_sgy, out_sgyx)

    def affine_channels(x, scale, shift, y):
        _affine_channels[x.size >= PARALLEL_MIN_SIZE](x, scale, shift, y)

    def fused_bwd(gy, x, a, b, d, gx):
        _fused_bwd[x.size >= PARALLEL_MIN_SIZE](gy, x, a, b, d, gx)

    def relu_bwd(x, gy, gx):
        _relu_bwd[x.size >= PARALLEL_MIN_SIZE](x, gy, gx)

else:  # pragma: no cover - exercised only without numba
    dw_fwd = dw_fwd_np
    dw_dgrad = dw_dgrad_np
    dw_wgrad = dw_wgrad_np
    channel_sums = channel_sums_np
    shifted_sums = shifted_sums_np
    affine_channels = affine_channels_np
    fused_bwd = fused_bwd_np
    relu_bwd = relu_bwd_np
