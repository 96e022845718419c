"""Array primitives for the recurrent pupil tracker.

Tensors are plain ``numpy.ndarray`` objects laid out channels-first
(``[C, H, W]`` or ``[B, C, H, W]``).  Two precisions are in use: ``float64``
for oracle and gradient checks, ``float32`` for training and evaluation.
The dtype of the weights decides the precision of every op.

Sparse convolutions run as explicit loop nests compiled with numba.  The
forward kernel walks the *input* elements and skips every zero operand
outright.  Operands that are mostly nonzero (vanilla hidden states, for
instance) go through a per-tap GEMM instead, since there is nothing to skip.
Effective MACs are charged per nonzero input element either way: each one
accounts for its whole ``k*k*C_out`` fan-out, the same attribution under
which the dense count ``C_out*C_in*k*k*H*W`` is a sum over input elements.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from .errors import NumericalError, ShapeError

numba.config.THREADING_LAYER = "workqueue"
_threads = os.environ.get("THREETET_THREADS")
if _threads:
    numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))


@dataclass
class OpsCounter:
    """Running tally of dense versus effective multiply-accumulates.

    ``per_layer`` maps ``(layer, path)`` to ``[dense, effective]``.
    """

    dense_macs: int = 0
    effective_macs: int = 0
    per_layer: dict = field(default_factory=dict)

    def add(self, key, dense, effective):
        dense = int(dense)
        effective = int(effective)
        if effective > dense:
            raise AssertionError(f"effective MACs {effective} exceed dense {dense} for {key}")
        self.dense_macs += dense
        self.effective_macs += effective
        slot = self.per_layer.setdefault(key, [0, 0])
        slot[0] += dense
        slot[1] += effective

    def merge(self, other: "OpsCounter"):
        for key, (d, e) in other.per_layer.items():
            self.add(key, d, e)

    def reset(self):
        self.dense_macs = 0
        self.effective_macs = 0
        self.per_layer.clear()


def check_finite(arr, what="tensor"):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")
    return arr


def _as_batch(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution kernels (channels-last internally)


@njit(cache=True, parallel=True)
def _conv_fwd_kernel(x, w, bias, pad, skip):
    # x: [B,H,W,C]; w: [C,k,k,O]; out: [B,Ho,Wo,O]
    B, H, W, C = x.shape
    k = w.shape[1]
    O = w.shape[3]
    Ho = H + 2 * pad - k + 1
    Wo = W + 2 * pad - k + 1
    out = np.empty((B, Ho, Wo, O), dtype=x.dtype)
    counts = np.zeros(B, dtype=np.int64)
    for b in prange(B):
        for oi in range(Ho):
            for oj in range(Wo):
                for o in range(O):
                    out[b, oi, oj, o] = bias[o]
        n = 0
        for i in range(H):
            for j in range(W):
                for c in range(C):
                    v = x[b, i, j, c]
                    if skip and v == 0:
                        continue
                    n += 1
                    for ky in range(k):
                        oi = i - ky + pad
                        if oi < 0 or oi >= Ho:
                            continue
                        for kx in range(k):
                            oj = j - kx + pad
                            if oj < 0 or oj >= Wo:
                                continue
                            for o in range(O):
                                out[b, oi, oj, o] += w[c, ky, kx, o] * v
        counts[b] = n
    return out, counts.sum()


def _pad_nhwc(x, pad):
    B, H, W, C = x.shape
    xp = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=x.dtype)
    xp[:, pad : pad + H, pad : pad + W, :] = x
    return xp


def _conv_fwd_gemm(x, w, bias, pad):
    # same layout as _conv_fwd_kernel; one matmul per kernel tap
    B, H, W, C = x.shape
    k, O = w.shape[1], w.shape[3]
    Ho, Wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    xp = _pad_nhwc(x, pad)
    out = np.empty((B, Ho, Wo, O), dtype=x.dtype)
    out[...] = bias
    for ky in range(k):
        for kx in range(k):
            out += xp[:, ky : ky + Ho, kx : kx + Wo, :] @ w[:, ky, kx, :]
    return out


def _conv_grad_weight_gemm(x, g, k, pad):
    B, Ho, Wo, O = g.shape
    C = x.shape[3]
    xp = _pad_nhwc(x, pad)
    g2 = g.reshape(-1, O)
    gw = np.empty((C, k, k, O), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            gw[:, ky, kx, :] = xp[:, ky : ky + Ho, kx : kx + Wo, :].reshape(-1, C).T @ g2
    return gw


def _conv_grad_input(g, weight, pad, H, W):
    # g: [B,Ho,Wo,O]; returns [B,H,W,C].  Upstream gate gradients are dense,
    # so one GEMM over all taps followed by shifted adds beats a loop nest.
    B, Ho, Wo, O = g.shape
    _, C, k, _ = weight.shape
    taps = (g.reshape(-1, O) @ weight.reshape(O, C * k * k)).reshape(B, Ho, Wo, C, k, k)
    padded = np.zeros((B, Ho + k - 1, Wo + k - 1, C), dtype=g.dtype)
    for ky in range(k):
        for kx in range(k):
            padded[:, ky : ky + Ho, kx : kx + Wo, :] += taps[..., ky, kx]
    return padded[:, pad : pad + H, pad : pad + W, :]


@njit(cache=True, parallel=True)
def _conv_grad_weight_kernel(x, g, k, pad):
    # x: [B,H,W,C]; g: [B,Ho,Wo,O]; returns [C,k,k,O]
    B, H, W, C = x.shape
    Ho, Wo, O = g.shape[1], g.shape[2], g.shape[3]
    partial = np.zeros((B, C, k, k, O), dtype=x.dtype)
    for b in prange(B):
        for i in range(H):
            for j in range(W):
                for c in range(C):
                    v = x[b, i, j, c]
                    if v == 0:
                        continue
                    for ky in range(k):
                        oi = i - ky + pad
                        if oi < 0 or oi >= Ho:
                            continue
                        for kx in range(k):
                            oj = j - kx + pad
                            if oj < 0 or oj >= Wo:
                                continue
                            for o in range(O):
                                partial[b, c, ky, kx, o] += v * g[b, oi, oj, o]
    # fixed-order reduction keeps results independent of thread count
    gw = np.zeros((C, k, k, O), dtype=x.dtype)
    for b in range(B):
        gw += partial[b]
    return gw


def _check_conv_shapes(x, weight, padding):
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"kernel must be [C_out, C_in, k, k], got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {weight.shape[1]}"
        )
    k = weight.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError(f"input {x.shape[2:]} too small for {k}x{k} kernel")


# Above this fraction of nonzero operands the GEMM path is faster than the
# zero-skipping loop on every layer shape of the default network.
DENSE_CUTOFF = 0.4


def _use_gemm(nnz, size, method):
    if method not in ("auto", "loop", "gemm"):
        raise ValueError(f"unknown conv method {method!r}")
    return method == "gemm" or (method == "auto" and nnz > DENSE_CUTOFF * size)


def conv_dense_macs(in_ch, out_ch, k, out_h, out_w, batch=1):
    return batch * out_ch * in_ch * k * k * out_h * out_w


def conv2d_forward(x, weight, bias=None, padding=1, counter=None, key=None,
                   skip_zeros=True, method="auto"):
    """Cross-correlate ``x`` with ``weight`` under zero padding.

    ``x`` is ``[C_in, H, W]`` or ``[B, C_in, H, W]``; ``weight`` is
    ``[C_out, C_in, k, k]``.  ``method`` picks the zero-skipping loop
    (``"loop"``), the dense GEMM (``"gemm"``), or lets the operand density
    decide (``"auto"``).  In the loop, ``skip_zeros`` (the default) skips
    every multiplication whose input operand is exactly zero; with it off
    the same loop nest runs densely, which gives a bit-identical result.
    """
    dtype = weight.dtype
    xb, squeeze = _as_batch(np.asarray(x, dtype=dtype))
    _check_conv_shapes(xb, weight, padding)
    if bias is None:
        bias = np.zeros(weight.shape[0], dtype=dtype)
    x_nhwc = np.ascontiguousarray(xb.transpose(0, 2, 3, 1))
    w_ckko = np.ascontiguousarray(weight.transpose(1, 2, 3, 0))
    bias = np.asarray(bias, dtype=dtype)
    nnz = int(np.count_nonzero(x_nhwc))
    if _use_gemm(nnz, x_nhwc.size, method):
        out = _conv_fwd_gemm(x_nhwc, w_ckko, bias, padding)
    else:
        out, _ = _conv_fwd_kernel(x_nhwc, w_ckko, bias, padding, skip_zeros)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if counter is not None:
        B, O, Ho, Wo = out.shape
        dense = conv_dense_macs(weight.shape[1], O, weight.shape[2], Ho, Wo, B)
        # Each nonzero input element is charged its full k*k*C_out fan-out,
        # which for same-size output equals dense * (nonzeros / numel).
        counter.add(key, dense, dense * nnz // xb.size)
    check_finite(out, "conv2d output")
    return out[0] if squeeze else out


def conv2d_backward(x, weight, grad_out, padding=1, need_input_grad=True, method="auto"):
    """Gradients of :func:`conv2d_forward`.

    Returns ``(grad_input, grad_weight, grad_bias)``; ``grad_input`` is
    ``None`` when ``need_input_grad`` is false.
    """
    dtype = weight.dtype
    xb, squeeze = _as_batch(np.asarray(x, dtype=dtype))
    gb_, _ = _as_batch(np.asarray(grad_out, dtype=dtype))
    _check_conv_shapes(xb, weight, padding)
    k = weight.shape[2]
    B, C, H, W = xb.shape
    expected = (B, weight.shape[0], H + 2 * padding - k + 1, W + 2 * padding - k + 1)
    if gb_.shape != expected:
        raise ShapeError(f"grad_out shape {gb_.shape} does not match forward output {expected}")
    g_nhwc = np.ascontiguousarray(gb_.transpose(0, 2, 3, 1))
    x_nhwc = np.ascontiguousarray(xb.transpose(0, 2, 3, 1))
    if _use_gemm(np.count_nonzero(x_nhwc), x_nhwc.size, method):
        gw = _conv_grad_weight_gemm(x_nhwc, g_nhwc, k, padding)
    else:
        gw = _conv_grad_weight_kernel(x_nhwc, g_nhwc, k, padding)
    grad_weight = np.ascontiguousarray(gw.transpose(3, 0, 1, 2))
    grad_bias = gb_.sum(axis=(0, 2, 3))
    grad_input = None
    if need_input_grad:
        gin = _conv_grad_input(g_nhwc, weight, padding, H, W)
        grad_input = np.ascontiguousarray(gin.transpose(0, 3, 1, 2))
        if squeeze:
            grad_input = grad_input[0]
    return grad_input, grad_weight, grad_bias


# ---------------------------------------------------------------------------
# pooling


def maxpool2x2_forward(x):
    """2x2 max pool, stride 2, trailing odd row/column dropped.

    Returns ``(output, argmax)`` where ``argmax`` holds the row-major
    window position (0..3) of each selected element; ties go to the first.
    """
    xb, squeeze = _as_batch(np.asarray(x))
    B, C, H, W = xb.shape
    if H < 2 or W < 2:
        raise ShapeError(f"cannot 2x2-pool spatial size {H}x{W}")
    Ho, Wo = H // 2, W // 2
    win = xb[:, :, : 2 * Ho, : 2 * Wo].reshape(B, C, Ho, 2, Wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    cache = (idx, (H, W))
    if squeeze:
        return out[0], cache
    return out, cache


def maxpool2x2_backward(cache, grad_out):
    idx, (H, W) = cache
    gb, squeeze = _as_batch(np.asarray(grad_out))
    idx_b = idx if idx.ndim == 4 else idx[None]
    if gb.shape != idx_b.shape:
        raise ShapeError(f"grad_out {grad_out.shape} does not match pooled shape {idx.shape}")
    B, C, Ho, Wo = gb.shape
    win = np.zeros((B, C, Ho, Wo, 4), dtype=gb.dtype)
    np.put_along_axis(win, idx_b[..., None], gb[..., None], axis=-1)
    win = win.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * Ho, 2 * Wo)
    grad = np.zeros((B, C, H, W), dtype=gb.dtype)
    grad[:, :, : 2 * Ho, : 2 * Wo] = win
    return grad[0] if squeeze else grad


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormStats:
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm_forward(x, gamma, beta, stats: BatchNormStats, mode="train"):
    """Per-channel batch norm over (batch, H, W).

    Train mode normalises with batch statistics and updates ``stats`` in
    place (unbiased variance for the running estimate, as is customary).
    Returns ``(output, cache)``.
    """
    xb, squeeze = _as_batch(np.asarray(x))
    C = xb.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"gamma/beta must have shape ({C},)")
    shape = (1, C, 1, 1)
    if mode == "train":
        mean = xb.mean(axis=(0, 2, 3))
        var = xb.var(axis=(0, 2, 3))
        n = xb.size // C
        m = stats.momentum
        if stats.running_mean is None:
            stats.running_mean = np.zeros(C, dtype=xb.dtype)
            stats.running_var = np.ones(C, dtype=xb.dtype)
        unbiased = var * n / (n - 1) if n > 1 else var
        stats.running_mean[...] = (1 - m) * stats.running_mean + m * mean
        stats.running_var[...] = (1 - m) * stats.running_var + m * unbiased
    elif mode == "eval":
        if stats.running_mean is None or stats.running_var is None:
            raise ValueError("batchnorm eval mode requires running statistics")
        mean = stats.running_mean
        var = stats.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + stats.eps)
    xhat = (xb - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    check_finite(out, "batchnorm output")
    cache = (xhat, inv_std.astype(xb.dtype), gamma, mode)
    return (out[0] if squeeze else out), cache


def batchnorm_backward(cache, grad_out):
    xhat, inv_std, gamma, mode = cache
    gb, squeeze = _as_batch(np.asarray(grad_out))
    C = gb.shape[1]
    shape = (1, C, 1, 1)
    grad_gamma = (gb * xhat).sum(axis=(0, 2, 3))
    grad_beta = gb.sum(axis=(0, 2, 3))
    g_hat = gb * gamma.reshape(shape)
    if mode == "train":
        n = gb.size // C
        grad_x = (inv_std.reshape(shape) / n) * (
            n * g_hat
            - g_hat.sum(axis=(0, 2, 3)).reshape(shape)
            - xhat * (g_hat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
        )
    else:
        grad_x = g_hat * inv_std.reshape(shape)
    return (grad_x[0] if squeeze else grad_x), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# activations


def sigmoid(x):
    # tanh form: overflow-free and much faster than exp on strided views
    y = np.multiply(x, 0.5)
    if np.ndim(y) == 0:
        return 0.5 * np.tanh(y) + 0.5
    np.tanh(y, out=y)
    y *= 0.5
    y += 0.5
    return y


def sigmoid_backward(y, grad_out):
    """Backward of sigmoid given its output ``y``."""
    return grad_out * y * (1 - y)


def tanh(x):
    return np.tanh(x)


def tanh_backward(y, grad_out):
    """Backward of tanh given its output ``y``."""
    return grad_out * (1 - y * y)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Backward of relu given its *input*; the derivative at exactly 0 is 0."""
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


# ---------------------------------------------------------------------------
# fully connected


def fc_forward(x, weight, bias, counter=None, key=None):
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape ``[N]`` or ``[B, N]``.

    When a counter is given, each row is evaluated from its nonzero inputs
    only and the counter records exactly those multiplications.
    """
    x = np.asarray(x, dtype=weight.dtype)
    squeeze = x.ndim == 1
    xb = x[None] if squeeze else x
    if xb.ndim != 2 or xb.shape[1] != weight.shape[1]:
        raise ShapeError(f"input {x.shape} does not match weight {weight.shape}")
    if counter is None:
        out = xb @ weight.T + bias
    else:
        out = np.empty((xb.shape[0], weight.shape[0]), dtype=weight.dtype)
        eff = 0
        for b in range(xb.shape[0]):
            nz = np.flatnonzero(xb[b])
            out[b] = weight[:, nz] @ xb[b, nz] + bias
            eff += nz.size * weight.shape[0]
        counter.add(key, xb.shape[0] * weight.size, eff)
    check_finite(out, "fc output")
    return out[0] if squeeze else out


def fc_backward(x, weight, grad_out):
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    x = np.asarray(x, dtype=weight.dtype)
    squeeze = x.ndim == 1
    xb = x[None] if squeeze else x
    gb = grad_out[None] if grad_out.ndim == 1 else grad_out
    if gb.shape != (xb.shape[0], weight.shape[0]):
        raise ShapeError(f"grad_out {grad_out.shape} does not match output of weight {weight.shape}")
    grad_input = gb @ weight
    grad_weight = gb.T @ xb
    grad_bias = gb.sum(axis=0)
    return (grad_input[0] if squeeze else grad_input), grad_weight, grad_bias
