"""Minimal differentiable-layer toolkit for the segmentation networks.

Activations are plain numpy arrays laid out C x H x W (no batch axis; the
training loop feeds one image per step). Every op returns ``(output, cache)``
and has a matching ``*_backward(cache, grad_out)`` that computes exact
gradients of the forward map. Caches are opaque tuples, consumed by exactly
one backward call.

Convolution uses the cross-correlation convention (no kernel flip) and only
the valid output region, so each 3x3 conv shrinks H and W by 2. All heavy
lifting is reshaped onto matrix products; reduction order is fixed, so
identical inputs give bit-identical outputs run to run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CropImpossible, OddDimension, ShapeMismatch


@dataclass
class Param:
    """One named parameter: value plus paired gradient and momentum buffers."""

    value: np.ndarray
    grad: np.ndarray
    momentum: np.ndarray


class ParamSet:
    """Ordered name -> Param map; insertion order is the manifest order."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        value = np.ascontiguousarray(value)
        p = Param(value, np.zeros_like(value), np.zeros_like(value))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def astype(self, dtype) -> "ParamSet":
        """Copy with values/grads/momenta cast (used by float64 grad checks)."""
        out = ParamSet()
        for name, p in self._params.items():
            q = out.add(name, p.value.astype(dtype))
            q.grad[...] = p.grad
            q.momentum[...] = p.momentum
        return out


def _as_chw(x: np.ndarray, op: str) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeMismatch(f"{op}: expected C x H x W input, got shape {x.shape}")
    return x


# --- 3x3 valid convolution ---

def _conv_cols(x: np.ndarray) -> np.ndarray:
    """im2col: (H-2)*(W-2) rows of the C*9 values under each kernel position."""
    c, h, w = x.shape
    windows = sliding_window_view(x, (3, 3), axis=(1, 2))  # C,Ho,Wo,3,3
    return np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(
        (h - 2) * (w - 2), c * 9)


def conv2d_valid(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """out[k,y,x] = b[k] + sum_{c,dy,dx} x[c,y+dy,x+dx] * w[k,c,dy,dx]."""
    x = _as_chw(x, "conv2d_valid")
    c, h, wd = x.shape
    if w.ndim != 4 or w.shape[1:] != (c, 3, 3):
        raise ShapeMismatch(f"conv2d_valid: weights {w.shape} vs input channels {c}")
    k = w.shape[0]
    if b.shape != (k,):
        raise ShapeMismatch(f"conv2d_valid: bias {b.shape} vs {k} kernels")
    if h < 3 or wd < 3:
        raise ShapeMismatch(f"conv2d_valid: spatial size {h}x{wd} below 3x3")
    ho, wo = h - 2, wd - 2
    cols = _conv_cols(x)
    y = cols @ w.reshape(k, c * 9).T + b
    out = np.ascontiguousarray(y.T).reshape(k, ho, wo)
    return out, (cols, w, x.shape)


def conv2d_valid_backward(cache, grad_out: np.ndarray):
    cols, w, x_shape = cache
    c, h, wd = x_shape
    k = w.shape[0]
    if grad_out.shape != (k, h - 2, wd - 2):
        raise ShapeMismatch(f"conv2d_valid_backward: grad {grad_out.shape}")
    gmat = grad_out.reshape(k, -1)
    grad_b = gmat.sum(axis=1)
    grad_w = (gmat @ cols).reshape(w.shape)
    # full correlation of grad_out with the 180-degree-rotated kernels
    gpad = np.zeros((k, h + 2, wd + 2), dtype=grad_out.dtype)
    gpad[:, 2:-2, 2:-2] = grad_out
    gcols = np.ascontiguousarray(
        sliding_window_view(gpad, (3, 3), axis=(1, 2)).transpose(1, 2, 0, 3, 4)
    ).reshape(h * wd, k * 9)
    wrot = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, k * 9)
    grad_x = np.ascontiguousarray((gcols @ wrot.T).T).reshape(c, h, wd)
    return grad_x, grad_w, grad_b


# --- 1x1 channel-mixing convolution (output head) ---

def conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Per-pixel channel mix: out[k] = b[k] + sum_c x[c] * w[k,c,0,0]."""
    x = _as_chw(x, "conv1x1")
    c, h, wd = x.shape
    if w.ndim != 4 or w.shape[1:] != (c, 1, 1):
        raise ShapeMismatch(f"conv1x1: weights {w.shape} vs input channels {c}")
    k = w.shape[0]
    if b.shape != (k,):
        raise ShapeMismatch(f"conv1x1: bias {b.shape} vs {k} kernels")
    out = (w.reshape(k, c) @ x.reshape(c, h * wd)).reshape(k, h, wd) + b[:, None, None]
    return out, (x, w)


def conv1x1_backward(cache, grad_out: np.ndarray):
    x, w = cache
    c, h, wd = x.shape
    k = w.shape[0]
    if grad_out.shape != (k, h, wd):
        raise ShapeMismatch(f"conv1x1_backward: grad {grad_out.shape}")
    gmat = grad_out.reshape(k, h * wd)
    grad_b = gmat.sum(axis=1)
    grad_w = (gmat @ x.reshape(c, h * wd).T).reshape(k, c, 1, 1)
    grad_x = (w.reshape(k, c).T @ gmat).reshape(c, h, wd)
    return grad_x, grad_w, grad_b


# --- activations ---

def relu(x: np.ndarray):
    out = np.maximum(x, 0)
    return out, (x > 0)


def relu_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is taken as 0
    return grad_out * cache


def sigmoid(x: np.ndarray):
    """1/(1+exp(-x)), overflow-free for any magnitude."""
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return out, out


def sigmoid_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    s = cache
    return grad_out * s * (1.0 - s)


# --- 2x2 max pooling, stride 2 ---

def maxpool2(x: np.ndarray):
    x = _as_chw(x, "maxpool2")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise OddDimension(f"maxpool2: odd spatial size {h}x{w}")
    h2, w2 = h // 2, w // 2
    quads = np.ascontiguousarray(
        x.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4)).reshape(c, h2, w2, 4)
    # argmax returns the first maximum, i.e. ties break row-major in the window
    idx = quads.argmax(axis=3)
    out = np.take_along_axis(quads, idx[..., None], axis=3)[..., 0]
    return out, (idx, (c, h, w))


def maxpool2_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    idx, (c, h, w) = cache
    h2, w2 = h // 2, w // 2
    if grad_out.shape != (c, h2, w2):
        raise ShapeMismatch(f"maxpool2_backward: grad {grad_out.shape}")
    quads = np.zeros((c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(quads, idx[..., None], grad_out[..., None], axis=3)
    return np.ascontiguousarray(
        quads.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4)).reshape(c, h, w)


# --- 2x2 transposed convolution, stride 2 (no overlap) ---

def upconv2(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """out[k, 2y+dy, 2x+dx] = b[k] + sum_c x[c,y,x] * w[k,c,dy,dx]."""
    x = _as_chw(x, "upconv2")
    c, h, wd = x.shape
    if w.ndim != 4 or w.shape[1:] != (c, 2, 2):
        raise ShapeMismatch(f"upconv2: weights {w.shape} vs input channels {c}")
    k = w.shape[0]
    if b.shape != (k,):
        raise ShapeMismatch(f"upconv2: bias {b.shape} vs {k} kernels")
    xmat = x.reshape(c, h * wd)
    t = (w.transpose(0, 2, 3, 1).reshape(k * 4, c) @ xmat).reshape(k, 2, 2, h, wd)
    out = np.ascontiguousarray(t.transpose(0, 3, 1, 4, 2)).reshape(k, 2 * h, 2 * wd)
    out += b[:, None, None]
    return out, (xmat, w, (c, h, wd))


def upconv2_backward(cache, grad_out: np.ndarray):
    xmat, w, (c, h, wd) = cache
    k = w.shape[0]
    if grad_out.shape != (k, 2 * h, 2 * wd):
        raise ShapeMismatch(f"upconv2_backward: grad {grad_out.shape}")
    grad_b = grad_out.sum(axis=(1, 2))
    g = np.ascontiguousarray(
        grad_out.reshape(k, h, 2, wd, 2).transpose(0, 2, 4, 1, 3)).reshape(k * 4, h * wd)
    grad_w = (g @ xmat.T).reshape(k, 2, 2, c).transpose(0, 3, 1, 2)
    grad_x = (w.transpose(0, 2, 3, 1).reshape(k * 4, c).T @ g).reshape(c, h, wd)
    return grad_x, np.ascontiguousarray(grad_w), grad_b


# --- skip connection: center-crop + channel concat ---

def concat_crop(skip: np.ndarray, up: np.ndarray):
    """Center-crop `skip` to `up`'s spatial size, stack channels skip-first."""
    skip = _as_chw(skip, "concat_crop")
    up = _as_chw(up, "concat_crop")
    c1, hs, ws = skip.shape
    c2, hu, wu = up.shape
    dy, dx = hs - hu, ws - wu
    if dy < 0 or dx < 0 or dy % 2 or dx % 2:
        raise CropImpossible(f"cannot center-crop {hs}x{ws} to {hu}x{wu}")
    my, mx = dy // 2, dx // 2
    cropped = skip[:, my:my + hu, mx:mx + wu]
    out = np.concatenate([cropped, up], axis=0)
    return out, (c1, skip.shape, (my, mx))


def concat_crop_backward(cache, grad_out: np.ndarray):
    c1, skip_shape, (my, mx) = cache
    _, hs, ws = skip_shape
    hu, wu = grad_out.shape[1], grad_out.shape[2]
    grad_skip = np.zeros(skip_shape, dtype=grad_out.dtype)
    grad_skip[:, my:my + hu, mx:mx + wu] = grad_out[:c1]
    grad_up = grad_out[c1:].copy()
    return grad_skip, grad_up


# --- loss and optimizer ---

def bce_loss(pred: np.ndarray, target: np.ndarray):
    """Mean binary cross-entropy over all elements, plus d(loss)/d(pred).

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs; the gradient
    is evaluated at the clamped values.
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"bce_loss: pred {pred.shape} vs target {target.shape}")
    eps = 1e-7
    p = np.clip(pred, eps, 1.0 - eps)
    t = target.astype(p.dtype)
    loss = float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))
    grad = (p - t) / (p * (1.0 - p)) / p.size
    return loss, grad.astype(pred.dtype)


def sgd_step(params: ParamSet, lr: float, momentum_coeff: float) -> ParamSet:
    """m <- momentum*m + grad; value <- value - lr*m; grads zeroed. In place."""
    for _, p in params.items():
        p.momentum *= momentum_coeff
        p.momentum += p.grad
        p.value -= lr * p.momentum
        p.grad[...] = 0
    return params
