 # models/numkit.py
"""Dense float64 numerics with hand-written backward passes.

Every op comes as a pair ``<op>_forward(...) -> (out, cache)`` and
``<op>_backward(dout, cache) -> grads``; grads line up with the
differentiable inputs of the forward call. There is no tape: composite
modules call the backward functions in reverse order themselves.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, log_expit, softmax
from scipy.stats import norm

from utils.errors import DimensionError, NumericError

DTYPE = np.float64


def as_tensor(x):
    return np.asarray(x, dtype=DTYPE)


def check_finite(name, x):
    x = np.asarray(x)
    finite = np.isfinite(x)
    if not np.all(finite):
        bad = tuple(int(i) for i in np.argwhere(~finite)[0])
        raise NumericError(f"{name} has a non-finite value at index {bad}")


@dataclass(frozen=True)
class DiffOp:
    """A forward/backward pair; the unit checked by ``models.gradcheck``."""
    name: str
    forward: Callable
    backward: Callable

    def __call__(self, *inputs):
        return self.forward(*inputs)[0]


# --- Linear ---
def linear_forward(x, W, b):
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2:
        raise DimensionError(f"W must be 2-D (Cin, Cout), got rank {W.ndim}")
    if x.ndim == 0 or x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"axis -1 of x has size {x.shape[-1] if x.ndim else 0}, W expects Cin={W.shape[0]}"
        )
    if b.shape != (W.shape[1],):
        raise DimensionError(f"axis 0 of b has shape {b.shape}, expected ({W.shape[1]},)")
    return x @ W + b, (x, W)


def linear_backward(dy, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


# --- Softmax over the last axis ---
def softmax_forward(x):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax needs a non-empty last axis")
    y = softmax(x, axis=-1)
    return y, y


def softmax_backward(dy, y):
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def softmax_lastdim(x):
    return softmax_forward(x)[0]


# --- Bilinear sampling ---
_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _corner_weights(fr, fc):
    return ((1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc)


def _gather(fmap, rows, cols):
    C, H, W = fmap.shape
    valid = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    out = np.zeros((rows.shape[0], C), dtype=DTYPE)
    out[valid] = fmap[:, rows[valid], cols[valid]].T
    return out, valid


def bilinear_sample_forward(fmap, coords, origin=None):
    """Sample a C×H×W map at continuous (row, col) coordinates.

    Cell (r, c) is centred at (r, c); anything outside the grid reads zero.
    ``coords`` has shape (..., 2); the result has shape (..., C). ``origin`` is
    an optional integer array broadcastable to ``coords`` that is added after
    flooring, so integer shifts of the origin never touch the fractional part.
    """
    fmap, coords = as_tensor(fmap), as_tensor(coords)
    if fmap.ndim != 3:
        raise DimensionError(f"map must be C×H×W, got rank {fmap.ndim}")
    if coords.shape[-1:] != (2,):
        raise DimensionError(f"axis -1 of coords must have size 2, got {coords.shape}")
    lead = coords.shape[:-1]
    pts = coords.reshape(-1, 2)
    base = np.floor(pts)
    frac = pts - base
    base = base.astype(np.int64)
    if origin is not None:
        base = base + np.broadcast_to(np.asarray(origin, dtype=np.int64), coords.shape).reshape(-1, 2)
    r0, c0 = base[:, 0], base[:, 1]
    fr, fc = frac[:, 0], frac[:, 1]
    out = np.zeros((pts.shape[0], fmap.shape[0]), dtype=DTYPE)
    corners = []
    for (dr, dc), w in zip(_CORNERS, _corner_weights(fr, fc)):
        values, valid = _gather(fmap, r0 + dr, c0 + dc)
        out += w[:, None] * values
        corners.append((values, valid))
    cache = (fmap.shape, r0, c0, fr, fc, corners, lead)
    return out.reshape(*lead, fmap.shape[0]), cache


def bilinear_sample_backward(dout, cache):
    shape, r0, c0, fr, fc, corners, lead = cache
    C, H, W = shape
    g = dout.reshape(-1, C)
    dflat = np.zeros((H * W, C), dtype=DTYPE)
    for (dr, dc), w, (_, valid) in zip(_CORNERS, _corner_weights(fr, fc), corners):
        flat = (r0 + dr) * W + (c0 + dc)
        np.add.at(dflat, flat[valid], w[valid, None] * g[valid])
    (v00, _), (v01, _), (v10, _), (v11, _) = corners
    d_fr = (1.0 - fc)[:, None] * (v10 - v00) + fc[:, None] * (v11 - v01)
    d_fc = (1.0 - fr)[:, None] * (v01 - v00) + fr[:, None] * (v11 - v10)
    dcoords = np.stack([np.sum(g * d_fr, axis=1), np.sum(g * d_fc, axis=1)], axis=1)
    return dflat.T.reshape(C, H, W), dcoords.reshape(*lead, 2)


def bilinear_sample(fmap, p):
    """Sample one continuous point p = (row, col); returns a length-C vector."""
    return bilinear_sample_forward(fmap, np.asarray(p, dtype=DTYPE).reshape(1, 2))[0][0]


# --- Convolution, pooling, upsampling (single C×H×W maps) ---
def conv2d_forward(x, kernel, bias=None, stride=1):
    """Zero-padded 'same'-style convolution; kernel is (Cout, Cin, k, k), k in {1, 3}."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects x C×H×W and kernel Cout×Cin×k×k, got {x.shape}, {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if kh != kw or kh not in (1, 3):
        raise DimensionError(f"kernel must be 1×1 or 3×3, got {kh}×{kw}")
    if x.shape[0] != cin:
        raise DimensionError(f"axis 0 of x has size {x.shape[0]}, kernel expects Cin={cin}")
    if bias is not None and np.shape(bias) != (cout,):
        raise DimensionError(f"bias must have shape ({cout},), got {np.shape(bias)}")
    pad = kh // 2
    _, H, W = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    y = np.zeros((cout, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            y += np.einsum("oc,chw->ohw", kernel[:, :, i, j], patch)
    if bias is not None:
        y += as_tensor(bias)[:, None, None]
    return y, (xp, kernel, stride, pad, (H, W), bias is not None)


def conv2d_backward(dy, cache):
    xp, kernel, stride, pad, (H, W), has_bias = cache
    _, _, kh, kw = kernel.shape
    _, ho, wo = dy.shape
    dxp = np.zeros_like(xp)
    dkernel = np.zeros_like(kernel)
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * (ho - 1) + 1, stride)
            cols = slice(j, j + stride * (wo - 1) + 1, stride)
            dkernel[:, :, i, j] = np.einsum("ohw,chw->oc", dy, xp[:, rows, cols])
            dxp[:, rows, cols] += np.einsum("oc,ohw->chw", kernel[:, :, i, j], dy)
    dbias = dy.sum(axis=(1, 2)) if has_bias else None
    return dxp[:, pad:pad + H, pad:pad + W], dkernel, dbias


def avgpool_forward(x, factor):
    x = as_tensor(x)
    C, H, W = x.shape
    if H % factor or W % factor:
        raise DimensionError(f"spatial dims {H}×{W} are not divisible by pooling factor {factor}")
    return x.reshape(C, H // factor, factor, W // factor, factor).mean(axis=(2, 4)), factor


def avgpool_backward(dy, factor):
    return np.repeat(np.repeat(dy, factor, axis=1), factor, axis=2) / (factor * factor)


def avgpool2(x):
    return avgpool_forward(x, 2)[0]


def upsample_nearest_forward(x, factor):
    x = as_tensor(x)
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2), factor


def upsample_nearest_backward(dy, factor):
    C, H, W = dy.shape
    return dy.reshape(C, H // factor, factor, W // factor, factor).sum(axis=(2, 4))


def upsample_nearest(x, factor):
    return upsample_nearest_forward(x, factor)[0]


# --- Normalization and nonlinearity ---
def layer_norm_forward(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis."""
    x = as_tensor(x)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    C = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, C).sum(axis=0)
    dbeta = dy.reshape(-1, C).sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def gelu_forward(x):
    """Exact GELU, x·Φ(x)."""
    x = as_tensor(x)
    return x * norm.cdf(x), x


def gelu_backward(dy, x):
    return dy * (norm.cdf(x) + x * norm.pdf(x))


# --- Binary cross-entropy on logits ---
def bce_with_logits_forward(logits, targets):
    """Mean binary cross-entropy; stable for large |logits|."""
    logits, targets = as_tensor(logits), as_tensor(targets)
    if logits.shape != targets.shape:
        raise DimensionError(f"logits {logits.shape} and targets {targets.shape} differ")
    losses = -(targets * log_expit(logits) + (1.0 - targets) * log_expit(-logits))
    return float(losses.mean()), (logits, targets)


def bce_with_logits_backward(dloss, cache):
    logits, targets = cache
    return dloss * (expit(logits) - targets) / logits.size
