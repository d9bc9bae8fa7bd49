"""Forward/backward primitives for the toy denoiser.

The core works on channels-last (NHWC) arrays and follows the dtype of its
inputs, so the same code runs the float32 training path and the float64
gradient checks.  ``conv2d_forward``/``conv2d_backward``/``instance_norm`` at
the bottom accept NCHW tensors.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and that cache.  Kernels are stored OIHW.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..exceptions import DimensionError

NORM_EPS = 1e-5


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Rows of (ky, kx, c)-ordered patches, one per output pixel.

    Filled with k*k shifted slices: each copy is contiguous over channels,
    several times faster than gathering a transposed sliding-window view.
    """
    n, h, w, c = x.shape
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x
    ho, wo = -(-h // stride), -(-w // stride)
    cols = np.empty((n, ho, wo, k * k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j] = xp[:, i:i + h:stride, j:j + w:stride]
    return cols.reshape(n * ho * wo, k * k * c), ho, wo


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """'Same'-padded cross-correlation, NHWC input, OIHW kernel with odd size."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv expects NHWC input and OIHW kernel, got {x.shape}, {w.shape}")
    n, h, wd, c = x.shape
    o, c2, k, k2 = w.shape
    if c != c2:
        raise DimensionError(f"input has {c} channels but kernel expects {c2}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {k}x{k2}")
    if b.shape != (o,):
        raise DimensionError(f"bias shape {b.shape} does not match {o} output channels")
    if stride > 1 and (h % stride or wd % stride):
        raise DimensionError(f"spatial size {h}x{wd} not divisible by stride {stride}")
    if k == 1:
        cols = x[:, ::stride, ::stride].reshape(-1, c)
        ho, wo = h // stride, wd // stride
    else:
        cols, ho, wo = _im2col(x, k, stride)
    wm = w.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    out = (cols @ wm + b).reshape(n, ho, wo, o)
    return out, (x.shape, cols, w, stride)


def conv_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Returns ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is false.

    ``dx`` is the forward correlation of the (stride-dilated) upstream
    gradient with the spatially flipped, channel-transposed kernel.
    """
    x_shape, cols, w, stride = cache
    n, h, wd, c = x_shape
    o, _, k, _ = w.shape
    # saturated gates leave subnormal gradients, which BLAS handles very slowly
    dout = np.where(np.abs(dout) < np.finfo(dout.dtype).tiny, 0, dout).astype(dout.dtype, copy=False)
    d2 = dout.reshape(-1, o)
    dw = (cols.T @ d2).reshape(k, k, c, o).transpose(3, 2, 0, 1)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    if stride > 1:
        dil = np.zeros((n, h, wd, o), dtype=dout.dtype)
        dil[:, ::stride, ::stride] = dout
    else:
        dil = dout
    if k == 1:
        dx = dil @ w[:, :, 0, 0]
    else:
        dcols, _, _ = _im2col(dil, k, 1)
        wflip = w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * o, c)
        dx = (dcols @ wflip).reshape(n, h, wd, c)
    return dx, dw, db


def norm_forward(x: np.ndarray, eps: float = NORM_EPS):
    """Instance normalisation over the spatial axes of NHWC, no affine."""
    if x.ndim != 4:
        raise DimensionError(f"instance norm expects a 4-D tensor, got {x.shape}")
    if x.shape[1] * x.shape[2] < 2:
        raise DimensionError("instance norm needs at least two spatial positions per channel")
    mu = x.mean(axis=(1, 2), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    return y, (y, inv)


def norm_backward(dy: np.ndarray, cache) -> np.ndarray:
    y, inv = cache
    mean_dy = dy.mean(axis=(1, 2), keepdims=True)
    mean_dyy = (dy * y).mean(axis=(1, 2), keepdims=True)
    return inv * (dy - mean_dy - y * mean_dyy)


def silu_forward(x: np.ndarray):
    sig = expit(x)
    return x * sig, (x, sig)


def silu_backward(dy: np.ndarray, cache) -> np.ndarray:
    x, sig = cache
    return dy * (sig * (1.0 + x * (1.0 - sig)))


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, (x, w)


def linear_backward(dy: np.ndarray, cache):
    x, w = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def upsample2x(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2x_backward(dy: np.ndarray) -> np.ndarray:
    n, h, w, c = dy.shape
    return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def downsample_bilinear(x: np.ndarray, factor: int) -> np.ndarray:
    """Repeated half-pixel-centred bilinear halving (a 2x2 mean per halving)."""
    while factor > 1:
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"cannot halve odd spatial size {h}x{w}")
        x = x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
        factor //= 2
    return x


def downsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    return x[:, ::factor, ::factor] if factor > 1 else x


def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, 1, -1))


def to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, -1, 1))


# NCHW adapters

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    if np.ndim(x) != 4:
        raise DimensionError(f"conv2d expects NCHW input, got shape {np.shape(x)}")
    out, cache = conv_forward(to_nhwc(np.asarray(x)), np.asarray(w), np.asarray(b), stride)
    return to_nchw(out), cache


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    dx, dw, db = conv_backward(to_nhwc(dout), cache, need_dx)
    return (None if dx is None else to_nchw(dx)), dw, db


def instance_norm(f: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Per-sample, per-channel standardisation of an NCHW tensor."""
    if np.ndim(f) != 4:
        raise DimensionError(f"instance_norm expects NCHW, got shape {np.shape(f)}")
    return to_nchw(norm_forward(to_nhwc(np.asarray(f, dtype=np.float64)), eps)[0])
