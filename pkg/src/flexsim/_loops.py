"""Hot inner loops, each with a numba loop variant and a numpy variant.

The public dispatchers at the bottom pick one according to ``flexsim._jit``.
Everything here works on float64 reals and int64 mantissas; callers own
dtype narrowing and shape checks.
"""

import numpy as np

from flexsim import _jit

NEAREST_EVEN = 0
TRUNCATE = 1
STOCHASTIC = 2


# --------------------------------------------------------------------------
# quantization
# --------------------------------------------------------------------------

@_jit.njit
def _quantize_loop(x, scale_up, limit, mode, u, out):
    gamma = 0
    overflow = False
    for i in range(x.size):
        s = x[i] * scale_up
        if mode == NEAREST_EVEN:
            r = np.rint(s)  # ties to even
        elif mode == TRUNCATE:
            r = np.trunc(s)
        else:
            r = np.floor(s + u[i])
        if r >= limit:
            overflow = True
            m = int(limit)
        elif r <= -limit:
            overflow = True
            m = -int(limit)
        else:
            m = int(r)
        out[i] = m
        a = m if m >= 0 else -m
        if a > gamma:
            gamma = a
    return gamma, overflow


def _quantize_numpy(x, scale_up, limit, mode, u, out):
    s = x * scale_up
    if mode == NEAREST_EVEN:
        r = np.rint(s)
    elif mode == TRUNCATE:
        r = np.trunc(s)
    else:
        r = np.floor(s + u)
    overflow = bool(np.any(np.abs(r) >= limit)) if r.size else False
    np.clip(r, -limit, limit, out=r)
    out[...] = r.astype(np.int64)
    gamma = int(np.max(np.abs(out))) if out.size else 0
    return gamma, overflow


def quantize(x, scale_up, limit, mode=NEAREST_EVEN, u=None):
    """Scale, round and saturate a flat float64 array.

    Returns ``(mantissas int64, gamma, overflowed)``. ``gamma`` is taken after
    saturation, so it never exceeds ``limit``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    if np.isnan(x).any():
        raise ValueError("cannot quantize NaN")
    if u is None:
        u = np.zeros(x.size if mode == STOCHASTIC else 0)
    out = np.empty(x.size, dtype=np.int64)
    fn = _quantize_loop if _jit.use_jit() else _quantize_numpy
    gamma, overflow = fn(x, float(scale_up), float(limit), int(mode), u, out)
    return out, int(gamma), bool(overflow)


# --------------------------------------------------------------------------
# direct convolution: x [b,c,h,w], w [o,c,r,s] -> y [b,o,oh,ow]
# --------------------------------------------------------------------------

def conv_out_hw(h, w, r, s, stride, pad):
    return (h + 2 * pad - r) // stride + 1, (w + 2 * pad - s) // stride + 1


@_jit.njit
def _conv2d_loop(x, w, stride, pad, y):
    b_, c_, h_, w_ = x.shape
    o_, _, r_, s_ = w.shape
    oh, ow = y.shape[2], y.shape[3]
    y[:] = 0.0
    for b in range(b_):
        for o in range(o_):
            for c in range(c_):
                for p in range(r_):
                    for q in range(s_):
                        wv = w[o, c, p, q]
                        j0 = 0
                        while j0 * stride + q - pad < 0:
                            j0 += 1
                        for i in range(oh):
                            hi = i * stride + p - pad
                            if hi < 0 or hi >= h_:
                                continue
                            for j in range(j0, ow):
                                wi = j * stride + q - pad
                                if wi >= w_:
                                    break
                                y[b, o, i, j] += x[b, c, hi, wi] * wv


def _conv2d_numpy(x, w, stride, pad, y):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    r, s = w.shape[2], w.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(xp, (r, s), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, : y.shape[2], : y.shape[3]]
    y[...] = np.einsum("bcijpq,ocpq->boij", win, w, optimize=True)


def conv2d(x, w, stride=1, pad=0):
    b, c, h, wd = x.shape
    oh, ow = conv_out_hw(h, wd, w.shape[2], w.shape[3], stride, pad)
    y = np.empty((b, w.shape[0], oh, ow))
    fn = _conv2d_loop if _jit.use_jit() else _conv2d_numpy
    fn(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(w, dtype=np.float64), stride, pad, y)
    return y


@_jit.njit
def _conv2d_grad_input_loop(dy, w, stride, pad, dx):
    b_, c_, h_, w_ = dx.shape
    o_, _, r_, s_ = w.shape
    oh, ow = dy.shape[2], dy.shape[3]
    dx[:] = 0.0
    for b in range(b_):
        for o in range(o_):
            for i in range(oh):
                for j in range(ow):
                    g = dy[b, o, i, j]
                    if g == 0.0:
                        continue
                    for c in range(c_):
                        for p in range(r_):
                            hi = i * stride + p - pad
                            if hi < 0 or hi >= h_:
                                continue
                            for q in range(s_):
                                wi = j * stride + q - pad
                                if wi < 0 or wi >= w_:
                                    continue
                                dx[b, c, hi, wi] += g * w[o, c, p, q]


def _conv2d_grad_input_numpy(dy, w, stride, pad, dx):
    b, c, h, wd = dx.shape
    r, s = w.shape[2], w.shape[3]
    oh, ow = dy.shape[2], dy.shape[3]
    dxp = np.zeros((b, c, h + 2 * pad, wd + 2 * pad))
    for p in range(r):
        for q in range(s):
            contrib = np.einsum("boij,oc->bcij", dy, w[:, :, p, q])
            dxp[:, :, p : p + stride * oh : stride, q : q + stride * ow : stride] += contrib
    dx[...] = dxp[:, :, pad : pad + h, pad : pad + wd]


def conv2d_grad_input(dy, w, x_shape, stride=1, pad=0):
    dx = np.empty(x_shape)
    fn = _conv2d_grad_input_loop if _jit.use_jit() else _conv2d_grad_input_numpy
    fn(np.ascontiguousarray(dy, dtype=np.float64), np.ascontiguousarray(w, dtype=np.float64), stride, pad, dx)
    return dx


@_jit.njit
def _conv2d_grad_weight_loop(x, dy, stride, pad, dw):
    b_, c_, h_, w_ = x.shape
    o_, _, r_, s_ = dw.shape
    oh, ow = dy.shape[2], dy.shape[3]
    for o in range(o_):
        for c in range(c_):
            for p in range(r_):
                for q in range(s_):
                    acc = 0.0
                    for b in range(b_):
                        for i in range(oh):
                            hi = i * stride + p - pad
                            if hi < 0 or hi >= h_:
                                continue
                            for j in range(ow):
                                wi = j * stride + q - pad
                                if wi < 0 or wi >= w_:
                                    continue
                                acc += x[b, c, hi, wi] * dy[b, o, i, j]
                    dw[o, c, p, q] = acc


def _conv2d_grad_weight_numpy(x, dy, stride, pad, dw):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = dy.shape[2], dy.shape[3]
    for p in range(dw.shape[2]):
        for q in range(dw.shape[3]):
            patch = xp[:, :, p : p + stride * oh : stride, q : q + stride * ow : stride]
            dw[:, :, p, q] = np.einsum("bcij,boij->oc", patch, dy)


def conv2d_grad_weight(x, dy, w_shape, stride=1, pad=0):
    dw = np.empty(w_shape)
    fn = _conv2d_grad_weight_loop if _jit.use_jit() else _conv2d_grad_weight_numpy
    fn(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(dy, dtype=np.float64), stride, pad, dw)
    return dw


# --------------------------------------------------------------------------
# non-overlapping k x k max pooling
# --------------------------------------------------------------------------

@_jit.njit
def _maxpool_loop(x, k, y, arg):
    b_, c_, oh, ow = y.shape
    for b in range(b_):
        for c in range(c_):
            for i in range(oh):
                for j in range(ow):
                    best = x[b, c, i * k, j * k]
                    bi = 0
                    for p in range(k):
                        for q in range(k):
                            v = x[b, c, i * k + p, j * k + q]
                            if v > best:
                                best = v
                                bi = p * k + q
                    y[b, c, i, j] = best
                    arg[b, c, i, j] = bi


def _maxpool_numpy(x, k, y, arg):
    b, c, oh, ow = y.shape
    blocks = x[:, :, : oh * k, : ow * k].reshape(b, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, oh, ow, k * k)
    arg[...] = np.argmax(blocks, axis=-1)
    y[...] = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]


def maxpool(x, k):
    """Returns pooled values and the flat in-window argmax (first maximum wins)."""
    b, c, h, w = x.shape
    y = np.empty((b, c, h // k, w // k))
    arg = np.empty(y.shape, dtype=np.int64)
    fn = _maxpool_loop if _jit.use_jit() else _maxpool_numpy
    fn(np.ascontiguousarray(x, dtype=np.float64), k, y, arg)
    return y, arg


def maxpool_grad(dy, arg, k, x_shape):
    b, c, oh, ow = dy.shape
    dx = np.zeros(x_shape)
    p, q = np.divmod(arg, k)
    bi, ci, ii, jj = np.indices(dy.shape)
    dx[bi, ci, ii * k + p, jj * k + q] = dy
    return dx
