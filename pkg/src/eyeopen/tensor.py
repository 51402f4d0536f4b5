"""Dense numeric kernels with hand-written backward passes.

Tensors are plain numpy arrays: float32 while training, float64 when
gradients are being checked against finite differences. Every forward
kernel returns ``(output, cache)`` and the matching backward consumes
the cache. Kernels never mutate their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

from .errors import ConfigError, OracleError, TrainingError, UsageError

DEBUG_FINITE = False


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        from .errors import NumericError

        raise NumericError(f"non-finite values in {where}")
    return x


def _debug(x, where):
    if DEBUG_FINITE:
        check_finite(x, where)
    return x


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw) plus bias.

    Channels-first im2col followed by a batched matrix product.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ConfigError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if b.shape != (o,):
        raise ConfigError(f"conv2d bias shape {b.shape} does not match {o} output channels")
    if stride < 1 or pad < 0:
        raise ConfigError("conv2d needs stride >= 1 and pad >= 0")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ConfigError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}+{pad}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)

    if pad:
        xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + wd] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w.reshape(o, -1), cols)
    out += b[:, None]
    out = out.reshape(n, o, ho, wo)
    cache = {"cols": cols, "w": w, "x_shape": x.shape, "stride": stride, "pad": pad, "out_shape": out.shape}
    return _debug(out, "conv2d"), cache


def conv2d_backward(cache, dout, need_dx=True):
    """Gradients (dInput, dWeight, dBias); dInput is None when ``need_dx`` is False."""
    if cache is None or "cols" not in cache:
        raise UsageError("conv2d_backward called without a forward cache")
    if dout.shape != cache["out_shape"]:
        raise UsageError(f"conv2d_backward: dOut shape {dout.shape} != forward output {cache['out_shape']}")
    cols, w = cache["cols"], cache["w"]
    stride, pad = cache["stride"], cache["pad"]
    n, c, h, wd = cache["x_shape"]
    o, _, kh, kw = w.shape
    _, _, ho, wo = dout.shape

    dmat = dout.reshape(n, o, ho * wo)
    dw = np.matmul(dmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dmat.sum(axis=(0, 2))
    if not need_dx:
        return None, dw, db
    dcols = np.matmul(w.reshape(o, -1).T, dmat).reshape(n, c, kh, kw, ho, wo)

    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2_forward(x):
    """2x2 / stride 2 max pooling; an odd trailing row or column is dropped.

    Ties resolve to the lowest linear index inside the window. The recorded
    argmax is the window position 0..3 in row-major order.
    """
    if x.ndim != 4:
        raise ConfigError(f"maxpool2 expects N,C,H,W input, got {x.shape}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ConfigError(f"maxpool2 needs H,W >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    a = x[:, :, 0:2 * h2:2, 0:2 * w2:2]
    b = x[:, :, 0:2 * h2:2, 1:2 * w2:2]
    cc = x[:, :, 1:2 * h2:2, 0:2 * w2:2]
    d = x[:, :, 1:2 * h2:2, 1:2 * w2:2]
    top = np.maximum(a, b)
    bottom = np.maximum(cc, d)
    out = np.maximum(top, bottom)
    arg = np.where(bottom > top, 2 + (d > cc), (b > a).astype(np.uint8)).astype(np.uint8)
    return out, {"argmax": arg, "x_shape": x.shape}


def maxpool2_backward(cache, dout):
    if cache is None or "argmax" not in cache:
        raise UsageError("maxpool2_backward called without a forward cache")
    arg = cache["argmax"]
    n, c, h, w = cache["x_shape"]
    if dout.shape != arg.shape:
        raise UsageError(f"maxpool2_backward: dOut shape {dout.shape} != {arg.shape}")
    h2, w2 = arg.shape[2:]
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    for k, (r, q) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        np.multiply(dout, arg == k, out=dx[:, :, r:2 * h2:2, q:2 * w2:2])
    return dx


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------

def linear_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ConfigError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ConfigError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    out = x @ w.T
    out += b
    return _debug(out, "linear"), {"x": x, "w": w}


def linear_backward(cache, dout):
    if cache is None or "x" not in cache:
        raise UsageError("linear_backward called without a forward cache")
    x, w = cache["x"], cache["w"]
    if dout.shape != (x.shape[0], w.shape[0]):
        raise UsageError(f"linear_backward: dOut shape {dout.shape} mismatched")
    return dout @ w, dout.T @ x, dout.sum(axis=0)


# ---------------------------------------------------------------------------
# max-feature-map
# ---------------------------------------------------------------------------

def mfm_forward(x):
    """Elementwise max of the two channel halves (axis 1)."""
    k = x.shape[1]
    if k % 2:
        raise ConfigError(f"MFM needs an even channel count, got {k}")
    half = k // 2
    a, b = x[:, :half], x[:, half:]
    return np.maximum(a, b), {"first": a >= b}


def mfm_backward(cache, dout):
    if cache is None or "first" not in cache:
        raise UsageError("mfm_backward called without a forward cache")
    first = cache["first"]
    if dout.shape != first.shape:
        raise UsageError(f"mfm_backward: dOut shape {dout.shape} != {first.shape}")
    half = first.shape[1]
    dx = np.empty((first.shape[0], 2 * half) + first.shape[2:], dtype=dout.dtype)
    np.multiply(dout, first, out=dx[:, :half])
    np.subtract(dout, dx[:, :half], out=dx[:, half:])
    return dx


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: AdamState, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    step = state.step + 1
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name!r} at step {step}")
        p = params[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for name, g in grads.items():
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    state.step = step
    return params, state


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], point, h=1e-3):
    """Central-difference gradient of a scalar function, in float64."""
    if h <= 0:
        raise OracleError("finite-difference step must be positive")
    x = np.array(point, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor=1e-8):
    """Largest elementwise gap, scaled by the largest magnitude on either side."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not a.size:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)
