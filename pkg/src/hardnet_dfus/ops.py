"""Dense NCHW float32 tensor operations used by the forward executor.

Tensors are plain ``numpy.ndarray`` objects of dtype float32.  Reductions
over 4096 or more elements accumulate in float64.  Matrix products are
split into fixed column chunks that do not depend on the worker count, and
BLAS runs single-threaded inside the pool, so results are bit-identical for
any ``HDK_THREADS`` setting.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np
from scipy.special import erf
from threadpoolctl import ThreadpoolController

CHUNK = 8192
WIDE_REDUCTION = 4096

# Optional list collecting (kind, input shape, weight shape, output shape) for
# every parametric op; used for cost cross-checks.
_trace = None


def thread_count():
    value = os.environ.get("HDK_THREADS", "")
    try:
        n = int(value)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


_controller = None
_pools = {}


def _single_blas():
    global _controller
    if _controller is None:
        _controller = ThreadpoolController()
    return _controller.limit(limits=1, user_api="blas")


def _pool(workers):
    if workers not in _pools:
        _pools[workers] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="hdk")
    return _pools[workers]


@contextmanager
def tracing():
    """Record parametric ops executed inside the block."""
    global _trace
    previous, _trace = _trace, []
    try:
        yield _trace
    finally:
        _trace = previous


def _record(kind, x_shape, w_shape, out_shape):
    if _trace is not None:
        _trace.append((kind, tuple(x_shape), tuple(w_shape), tuple(out_shape)))


def matmul(a, b):
    """``a @ b`` for 2-D float32 arrays, chunked over the columns of ``b``."""
    k = a.shape[1]
    if k != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    wide = k >= WIDE_REDUCTION
    if wide:
        a = a.astype(np.float64)
    cols = b.shape[1]
    bounds = [(s, min(s + CHUNK, cols)) for s in range(0, cols, CHUNK)]
    out = np.empty((a.shape[0], cols), dtype=np.float64 if wide else np.float32)

    def run(span):
        s, e = span
        rhs = b[:, s:e]
        out[:, s:e] = a @ (rhs.astype(np.float64) if wide else rhs)

    workers = min(thread_count(), len(bounds))
    with _single_blas():
        if workers <= 1:
            for span in bounds:
                run(span)
        else:
            list(_pool(workers).map(run, bounds))
    return out.astype(np.float32, copy=False)


def mean(x, axis):
    """Mean with float64 accumulation over wide reductions."""
    axes = axis if isinstance(axis, tuple) else (axis,)
    count = math.prod(x.shape[a] for a in axes)
    dtype = np.float64 if count >= WIDE_REDUCTION else np.float32
    return np.mean(x, axis=axis, dtype=dtype, keepdims=True).astype(np.float32)


def conv2d(x, w, bias=None, stride=1, pad=0, groups=1):
    """2-D cross-correlation via im2col.

    ``x``: N x C x H x W, ``w``: C_out x C/groups x kh x kw.
    Output size is ``floor((H + 2 pad - kh) / stride) + 1`` per axis.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    c_out, c_per, kh, kw = w.shape
    if c % groups or c_out % groups or c // groups != c_per:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}, groups {groups}")
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (wd + 2 * pad - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"conv2d output underflow: input {x.shape}, weight {w.shape}")

    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if kh == 1 and kw == 1:
        cols = x[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
        cols = cols.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
        # (N, C, Ho, Wo, kh, kw) -> (C, kh, kw, N, Ho, Wo)
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, -1)

    g_in, g_out = c // groups, c_out // groups
    outs = []
    for gi in range(groups):
        wg = w[gi * g_out:(gi + 1) * g_out].reshape(g_out, -1)
        cg = cols[gi * g_in * kh * kw:(gi + 1) * g_in * kh * kw]
        outs.append(matmul(np.ascontiguousarray(wg), np.ascontiguousarray(cg)))
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=0)
    out = out.reshape(c_out, n, h_out, w_out).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=np.float32)
    _record("conv", (n, c, h, wd), w.shape, out.shape)
    return out


def linear(x, w, bias=None):
    """Token-wise linear map: ``x`` (M x in), ``w`` (out x in) -> M x out."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    out = matmul(np.ascontiguousarray(w), np.ascontiguousarray(x.T)).T
    if bias is not None:
        out = out + bias
    out = np.ascontiguousarray(out, dtype=np.float32)
    _record("linear", x.shape, w.shape, out.shape)
    return out


def batchnorm(x, scale, shift):
    return x * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)


def relu(x):
    return np.maximum(x, 0, dtype=np.float32)


def gelu(x):
    return (0.5 * x * (1.0 + erf(x / np.float32(math.sqrt(2.0))))).astype(np.float32)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float32)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def maxpool2(x):
    """2x2 max pooling with stride 2 (odd trailing rows/cols dropped)."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ValueError(f"maxpool2 underflow on {x.shape}")
    x = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    return x.max(axis=(3, 5))


def avgpool(x, k):
    """Non-overlapping k x k average pooling; H and W must be divisible by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avgpool kernel {k} does not divide {h}x{w}")
    return mean(x.reshape(n, c, h // k, k, w // k, k), axis=(3, 5)).reshape(n, c, h // k, w // k)


def adaptive_avgpool(x, size):
    """Adaptive average pooling to ``size x size`` bins.

    Bin i spans ``[floor(i H / s), ceil((i + 1) H / s))``.
    """
    n, c, h, w = x.shape
    out = np.empty((n, c, size, size), dtype=np.float32)
    for i in range(size):
        h0, h1 = (i * h) // size, -(-((i + 1) * h) // size)
        for j in range(size):
            w0, w1 = (j * w) // size, -(-((j + 1) * w) // size)
            out[:, :, i, j] = mean(x[:, :, h0:h1, w0:w1], axis=(2, 3))[:, :, 0, 0]
    return out


def _resize_matrix(n_in, n_out):
    # align_corners=False: src = (dst + 0.5) * n_in / n_out - 0.5, clamped at 0;
    # weights (1 - frac) on floor(src) and frac on floor(src) + 1 (clamped).
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for d in range(n_out):
        src = max((d + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[d, i0] += 1.0 - frac
        m[d, i1] += frac
    return m.astype(np.float32)


def bilinear_resize(x, out_h, out_w):
    """Bilinear resize of an N x C x H x W tensor (align_corners=False)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize target must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    rh = _resize_matrix(h, out_h)
    rw = _resize_matrix(w, out_w)
    with _single_blas():
        out = rh @ x.astype(np.float32, copy=False) @ rw.T
    return np.ascontiguousarray(out, dtype=np.float32)


def se_gate(x, fc1_w, fc1_b, fc2_w, fc2_b):
    """Squeeze-and-excitation: ``x * sigmoid(W2 relu(W1 gap(x)))`` per channel.

    FC weights are 1x1 conv kernels (out x in x 1 x 1).
    """
    for name, t in (("fc1.w", fc1_w), ("fc1.b", fc1_b), ("fc2.w", fc2_w), ("fc2.b", fc2_b)):
        if t is None:
            raise KeyError(f"se_gate: missing parameter {name}")
    squeezed = mean(x, axis=(2, 3))
    hidden = relu(conv2d(squeezed, fc1_w, fc1_b))
    gate = sigmoid(conv2d(hidden, fc2_w, fc2_b))
    return (x * gate).astype(np.float32)


def hflip(x):
    return np.ascontiguousarray(x[..., ::-1])


def vflip(x):
    return np.ascontiguousarray(x[..., ::-1, :])
