"""ConvLSTM and change-based ConvLSTM cells.

Both cells share one step function.  The change-based cell feeds the hidden
path with the thresholded difference ``H[t-1] - H[t-2]`` instead of
``H[t-1]``; whatever the threshold zeroes out is skipped by the convolution
kernel, which is where the savings come from.

Gate kernels are stored stacked along the output-channel axis in the order
input, forget, cell, output (``i, f, g, o``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError

GATES = ("i", "f", "g", "o")
VANILLA = "vanilla"
CHANGE_BASED = "cb"


@dataclass
class CellParams:
    wx: np.ndarray  # [4h, in, 3, 3]
    wh: np.ndarray  # [4h, h, 3, 3]
    b: np.ndarray  # [4h]

    def __post_init__(self):
        h4, h = self.wh.shape[0], self.wh.shape[1]
        if h4 != 4 * h or self.wx.shape[0] != h4 or self.b.shape != (h4,):
            raise ShapeError(
                f"inconsistent cell params wx={self.wx.shape} wh={self.wh.shape} b={self.b.shape}"
            )
        if self.wx.shape[2:] != self.wh.shape[2:]:
            raise ShapeError("input and hidden kernels must share a spatial size")

    @property
    def hidden(self):
        return self.wh.shape[1]

    def gate(self, name):
        """``(W_x, W_h, b)`` for one gate, as views."""
        k = GATES.index(name)
        h = self.hidden
        sl = slice(k * h, (k + 1) * h)
        return self.wx[sl], self.wh[sl], self.b[sl]


@dataclass
class CellState:
    H: np.ndarray
    C: np.ndarray
    H_prev: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float32):
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype), np.zeros(shape, dtype))


@dataclass
class StepCache:
    x: np.ndarray
    rec: np.ndarray  # recurrent operand actually convolved (H or delta H)
    mask: np.ndarray | None  # entries of the change that passed the threshold
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c_prev: np.ndarray
    tanh_c: np.ndarray
    kind: str


def _delta_and_mask(h1, h2, theta, signed=False):
    if theta < 0:
        raise ValueError("theta must be non-negative")
    diff = h1 - h2
    mask = (diff >= theta) if signed else (np.abs(diff) >= theta)
    return np.where(mask, diff, 0).astype(diff.dtype, copy=False), mask


def delta_encode(h_prev_1, h_prev_2, theta, signed=False):
    """Thresholded hidden-state change.

    Keeps ``h_prev_1 - h_prev_2`` wherever its magnitude is at least
    ``theta`` and zeroes it elsewhere.  ``signed=True`` compares the raw
    signed difference instead, which drops every negative change.
    Returns ``(delta, nonzero_count)``.
    """
    if h_prev_1.shape != h_prev_2.shape:
        raise ShapeError(f"shape mismatch {h_prev_1.shape} vs {h_prev_2.shape}")
    delta, _ = _delta_and_mask(h_prev_1, h_prev_2, theta, signed)
    return delta, int(np.count_nonzero(delta))


def cell_step(params: CellParams, x, state: CellState, kind=VANILLA, theta=0.0,
              counter=None, layer="layer", signed=False):
    """One timestep of either cell.  Returns ``(H_t, new_state, cache)``."""
    if state.H.shape != state.C.shape or state.H.shape != state.H_prev.shape:
        raise ShapeError("cell state tensors disagree in shape")
    if state.H.shape[-3] != params.hidden:
        raise ShapeError(f"state has {state.H.shape[-3]} channels, cell has {params.hidden}")
    if x.shape[-2:] != state.H.shape[-2:]:
        raise ShapeError(f"input spatial size {x.shape[-2:]} != state {state.H.shape[-2:]}")
    if kind == VANILLA:
        rec, mask = state.H, None
    elif kind == CHANGE_BASED:
        rec, mask = _delta_and_mask(state.H, state.H_prev, theta, signed)
    else:
        raise ValueError(f"unknown cell kind {kind!r}")
    z = T.conv2d_forward(x, params.wx, params.b, 1, counter, (layer, "input"))
    z += T.conv2d_forward(rec, params.wh, None, 1, counter, (layer, "hidden"))
    h = params.hidden
    i = T.sigmoid(z[..., 0 * h : 1 * h, :, :])
    f = T.sigmoid(z[..., 1 * h : 2 * h, :, :])
    g = T.tanh(z[..., 2 * h : 3 * h, :, :])
    o = T.sigmoid(z[..., 3 * h : 4 * h, :, :])
    c = f * state.C + i * g
    tanh_c = T.tanh(c)
    H = o * tanh_c
    T.check_finite(H, f"{layer} hidden state")
    new_state = CellState(H, c, state.H)
    cache = StepCache(np.asarray(x, dtype=params.wx.dtype), rec, mask, i, f, g, o, state.C, tanh_c, kind)
    return H, new_state, cache


def convlstm_step(params, x, state, counter=None, layer="layer"):
    return cell_step(params, x, state, VANILLA, 0.0, counter, layer)


def cb_convlstm_step(params, x, state, theta, counter=None, layer="layer", signed=False):
    return cell_step(params, x, state, CHANGE_BASED, theta, counter, layer, signed)


def cell_backward(params: CellParams, cache: StepCache, grad_state: CellState, need_input_grad=True):
    """Backward through one step.

    ``grad_state`` carries the loss gradient with respect to the fields of
    the *new* state (``H_t``, ``C_t``, and ``H_prev`` which is ``H_{t-1}``).
    Returns ``(grad_x, grad_params, grad_old_state)`` where the last item is
    the gradient with respect to the previous state's fields.  Through the
    threshold the gradient passes unchanged where the change survived and
    is zero where it was gated (exact at ``theta = 0``).
    """
    if cache is None:
        raise ValueError("no forward cache for this step")
    i, f, g, o, tc = cache.i, cache.f, cache.g, cache.o, cache.tanh_c
    dH = grad_state.H
    d_o = dH * tc
    dC = grad_state.C + dH * o * (1 - tc * tc)
    dz = np.concatenate(
        [
            T.sigmoid_backward(i, dC * g),
            T.sigmoid_backward(f, dC * cache.c_prev),
            T.tanh_backward(g, dC * i),
            T.sigmoid_backward(o, d_o),
        ],
        axis=-3,
    )
    dc_prev = dC * f
    dx, dwx, db = T.conv2d_backward(cache.x, params.wx, dz, 1, need_input_grad)
    drec, dwh, _ = T.conv2d_backward(cache.rec, params.wh, dz, 1, True)
    if cache.kind == VANILLA:
        dh_old = drec + grad_state.H_prev
        dh_prev_old = np.zeros_like(drec)
    else:
        passed = np.where(cache.mask, drec, 0).astype(drec.dtype, copy=False)
        dh_old = passed + grad_state.H_prev
        dh_prev_old = -passed
    return dx, CellParams(dwx, dwh, db), CellState(dh_old, dc_prev, dh_prev_old)


convlstm_backward = cell_backward
cb_convlstm_backward = cell_backward
