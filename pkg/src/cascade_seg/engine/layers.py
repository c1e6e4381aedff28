"""Forward and backward passes for the seven layer kinds.

Batched activations are ``(B, C, D, H, W)`` for volumetric layers and
``(B, m)`` after flattening. Reductions (batch-norm statistics, bias
gradients, the loss) accumulate in float64 whatever the storage dtype.
"""
from __future__ import annotations

import itertools

import numpy as np

from ..errors import NoForwardState, NonFiniteInput, ShapeMismatch, SingleSampleTrainBatch

PROB_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _tap_slice(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


# ------------------------------------------------------------- convolution

def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Columns ``(k^3 * C, B * D' * H' * W')``; row index is ``tap * C + channel``."""
    B, C = x.shape[:2]
    spatial = x.shape[2:]
    out = tuple(_out_size(n, k, stride, pad) for n in spatial)
    if min(out) < 1:
        raise ShapeMismatch(f"kernel {k} with pad {pad} does not fit input {spatial}")
    xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3) if pad else x
    cols = np.empty((k ** 3, C, B) + out, dtype=x.dtype)
    for t, (a, b, c) in enumerate(itertools.product(range(k), repeat=3)):
        win = xp[:, :, _tap_slice(a, stride, out[0]), _tap_slice(b, stride, out[1]),
                 _tap_slice(c, stride, out[2])]
        cols[t] = win.transpose(1, 0, 2, 3, 4)
    return cols.reshape(k ** 3 * C, -1), out


def _weight_matrix(weights: np.ndarray) -> np.ndarray:
    c_out = weights.shape[0]
    return weights.transpose(0, 2, 3, 4, 1).reshape(c_out, -1)


def conv3d_forward(x, weights, bias, stride=1, pad=0):
    """3D cross-correlation with zero padding.

    ``x`` may be a single ``(C, D, H, W)`` sample or a ``(B, C, D, H, W)`` batch;
    the result has the same rank.
    """
    y, _ = _conv3d_forward(x, weights, bias, stride, pad)
    return y


def _conv3d_forward(x, weights, bias, stride, pad):
    single = x.ndim == 4
    if single:
        x = x[None]
    if x.ndim != 5 or weights.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5D input and weights, got {x.shape}, {weights.shape}")
    c_out, c_in, k = weights.shape[:3]
    if weights.shape[2:] != (k, k, k) or x.shape[1] != c_in or bias.shape != (c_out,):
        raise ShapeMismatch(f"conv3d shapes disagree: x {x.shape}, w {weights.shape}, b {bias.shape}")
    if stride < 1 or pad < 0:
        raise ShapeMismatch("stride must be >= 1 and pad >= 0")
    cols, out = _im2col(x, k, stride, pad)
    y = _weight_matrix(weights).astype(x.dtype, copy=False) @ cols
    y += bias.astype(x.dtype)[:, None]
    y = y.reshape((c_out, x.shape[0]) + out).transpose(1, 0, 2, 3, 4)
    y = np.ascontiguousarray(y)
    cache = (cols, x.shape, weights, stride, pad)
    return (y[0] if single else y), cache


def _conv3d_backward(dy, cache, need_dx=True):
    cols, x_shape, weights, stride, pad = cache
    B, C = x_shape[:2]
    c_out, _, k = weights.shape[:3]
    out = dy.shape[2:]
    dyr = dy.transpose(1, 0, 2, 3, 4).reshape(c_out, -1)
    dw = (dyr @ cols.T).reshape(c_out, k, k, k, C).transpose(0, 4, 1, 2, 3)
    db = dyr.sum(axis=1, dtype=np.float64).astype(dy.dtype)
    dx = None
    if need_dx:
        dcols = (_weight_matrix(weights).astype(dy.dtype, copy=False).T @ dyr)
        dcols = dcols.reshape((k ** 3, C, B) + out)
        padded = tuple(n + 2 * pad for n in x_shape[2:])
        dxp = np.zeros((B, C) + padded, dtype=dy.dtype)
        for t, (a, b, c) in enumerate(itertools.product(range(k), repeat=3)):
            dxp[:, :, _tap_slice(a, stride, out[0]), _tap_slice(b, stride, out[1]),
                _tap_slice(c, stride, out[2])] += dcols[t].transpose(1, 0, 2, 3, 4)
        dx = dxp[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3], pad:pad + x_shape[4]]
        dx = np.ascontiguousarray(dx)
    return dx, np.ascontiguousarray(dw), db


# ----------------------------------------------------------------- pooling

def _blocks(x, size, out):
    """Non-overlapping windows as a trailing axis: ``(B, C, D', H', W', size^3)``."""
    B, C = x.shape[:2]
    crop = x[:, :, :out[0] * size, :out[1] * size, :out[2] * size]
    v = crop.reshape(B, C, out[0], size, out[1], size, out[2], size)
    return v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, *out, size ** 3)


def maxpool3d_forward(x, size=2, stride=2):
    """Window maxima and the window-local argmax (row-major, first index wins ties)."""
    single = x.ndim == 4
    if single:
        x = x[None]
    if x.ndim != 5:
        raise ShapeMismatch(f"maxpool3d expects 4D or 5D input, got {x.shape}")
    if size < 1 or stride < 1:
        raise ShapeMismatch("pool size and stride must be >= 1")
    out = tuple(_out_size(n, size, stride, 0) for n in x.shape[2:])
    if min(out) < 1:
        raise ShapeMismatch(f"pool window {size} larger than input {x.shape[2:]}")
    if size == stride:
        windows = _blocks(x, size, out)
        arg = windows.argmax(axis=-1).astype(np.int16)
        best = np.take_along_axis(windows, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    else:
        best = None
        arg = np.zeros(x.shape[:2] + out, dtype=np.int16)
        for o, (a, b, c) in enumerate(itertools.product(range(size), repeat=3)):
            win = x[:, :, _tap_slice(a, stride, out[0]), _tap_slice(b, stride, out[1]),
                    _tap_slice(c, stride, out[2])]
            if best is None:
                best = win.copy()
                continue
            upd = win > best
            np.copyto(best, win, where=upd)
            np.copyto(arg, o, where=upd)
    if single:
        return best[0], arg[0]
    return best, arg


def _maxpool3d_backward(dy, arg, x_shape, size, stride):
    dx = np.zeros(x_shape, dtype=dy.dtype)
    out = dy.shape[2:]
    if size == stride:
        B, C = x_shape[:2]
        scatter = np.zeros(dy.shape + (size ** 3,), dtype=dy.dtype)
        np.put_along_axis(scatter, arg[..., None].astype(np.intp), dy[..., None], axis=-1)
        scatter = scatter.reshape(B, C, *out, size, size, size).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        dx[:, :, :out[0] * size, :out[1] * size, :out[2] * size] = scatter.reshape(
            B, C, out[0] * size, out[1] * size, out[2] * size)
        return dx
    for o, (a, b, c) in enumerate(itertools.product(range(size), repeat=3)):
        dx[:, :, _tap_slice(a, stride, out[0]), _tap_slice(b, stride, out[1]),
           _tap_slice(c, stride, out[2])] += np.where(arg == o, dy, 0)
    return dx


# ---------------------------------------------------------- fully connected

def fc_forward(x, weights, bias):
    """``W @ x + b`` for a vector, or row-wise for a ``(B, m)`` batch."""
    if weights.ndim != 2 or bias.shape != (weights.shape[0],) or x.shape[-1] != weights.shape[1]:
        raise ShapeMismatch(f"fc shapes disagree: x {x.shape}, w {weights.shape}, b {bias.shape}")
    return x @ weights.T.astype(x.dtype, copy=False) + bias.astype(x.dtype)


# ------------------------------------------------------------- batch norm

def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _bn_shape(x):
    return (1, -1) + (1,) * (x.ndim - 2)


def batchnorm_forward(x, gamma, beta, mode="train", running_mean=None, running_var=None,
                      eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel normalisation over the batch and spatial axes.

    In train mode ``running_mean``/``running_var`` (if given) are updated in
    place; infer mode normalises with them instead of the batch statistics.
    """
    y, _ = _batchnorm_forward(x, gamma, beta, mode, running_mean, running_var, eps, momentum)
    return y


def _batchnorm_forward(x, gamma, beta, mode, running_mean, running_var, eps, momentum):
    if x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ShapeMismatch(f"batch-norm parameters {gamma.shape} do not match input {x.shape}")
    shape = _bn_shape(x)
    if mode == "train":
        if x.shape[0] < 2:
            raise SingleSampleTrainBatch("batch-norm needs at least two samples in train mode")
        axes = _bn_axes(x)
        mean = x.mean(axis=axes, dtype=np.float64)
        centered = x - mean.astype(x.dtype).reshape(shape)
        var = np.square(centered).mean(axis=axes, dtype=np.float64)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
            running_var *= momentum
            running_var += (1 - momentum) * var
    elif mode == "infer":
        mean = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
        centered = x - mean.astype(x.dtype).reshape(shape)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered
    xhat *= inv_std.reshape(shape)
    y = xhat * gamma.astype(x.dtype).reshape(shape)
    y += beta.astype(x.dtype).reshape(shape)
    return y, (xhat, inv_std, gamma)


def _batchnorm_backward(dy, cache):
    xhat, inv_std, gamma = cache
    axes = _bn_axes(dy)
    shape = _bn_shape(dy)
    n = dy.size // dy.shape[1]
    dgamma = (dy * xhat).sum(axis=axes, dtype=np.float64)
    dbeta = dy.sum(axis=axes, dtype=np.float64)
    dxhat_sum = dbeta * gamma
    dxhat_dot = dgamma * gamma
    dxhat = dy * gamma.astype(dy.dtype).reshape(shape)
    dx = (dxhat - (dxhat_sum / n).astype(dy.dtype).reshape(shape)
          - xhat * (dxhat_dot / n).astype(dy.dtype).reshape(shape)) * inv_std.reshape(shape)
    return dx, dgamma.astype(dy.dtype), dbeta.astype(dy.dtype)


# ----------------------------------------------------------------- dropout

def dropout_forward(x, rate=0.5, mode="train", rng=None):
    """Inverted dropout: survivors scaled by ``1 / (1 - rate)`` at train time."""
    y, _ = _dropout_forward(x, rate, mode, rng)
    return y


def _dropout_forward(x, rate, mode, rng):
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x, None
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * keep, keep


# ----------------------------------------------------- softmax and the loss

def softmax_forward(logits):
    logits = np.asarray(logits)
    if not np.isfinite(logits).all():
        raise NonFiniteInput("softmax received non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(probs, labels):
    """Mean of ``-log p[label]`` with probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.shape[0] != labels.shape[0] or probs.ndim != 2:
        raise ShapeMismatch(f"probs {probs.shape} vs labels {labels.shape}")
    picked = probs[np.arange(len(labels)), labels].astype(np.float64)
    return float(-np.log(np.clip(picked, PROB_CLAMP, 1 - PROB_CLAMP)).mean())


def softmax_cross_entropy_backward(probs, labels):
    """Gradient of the clamped mean cross-entropy with respect to the logits.

    Rows whose picked probability sits in a clamp region contribute nothing,
    which is the exact derivative of the clamped loss.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    rows = np.arange(n)
    picked = probs[rows, labels]
    grad = probs.copy()
    grad[rows, labels] -= 1
    active = (picked > PROB_CLAMP) & (picked < 1 - PROB_CLAMP)
    grad *= (active / n).astype(probs.dtype)[:, None]
    return grad


# ------------------------------------------------------------------ layers

class Layer:
    kind = "Layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy, need_dx=True):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise NoForwardState(f"{self.kind}: backward called without a recorded train forward")
        cache, self._cache = self._cache, None
        return cache

    def output_shape(self, in_shape):
        return in_shape

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        self.grads = {}
        return self


class Conv3D(Layer):
    kind = "Conv3D"

    def __init__(self, in_channels, maps, size=3, stride=1, pad=1):
        super().__init__()
        if size < 1 or stride < 1 or pad < 0:
            raise ValueError("Conv3D needs size, stride >= 1 and pad >= 0")
        self.in_channels, self.maps, self.size, self.stride, self.pad = in_channels, maps, size, stride, pad
        self.params = {"W": np.zeros((maps, in_channels, size, size, size), np.float32),
                       "b": np.zeros(maps, np.float32)}

    @property
    def fan_in(self):
        return self.in_channels * self.size ** 3

    @property
    def fan_out(self):
        return self.maps * self.size ** 3

    def forward(self, x, train=False, rng=None):
        y, cache = _conv3d_forward(x, self.params["W"], self.params["b"], self.stride, self.pad)
        self._cache = cache if train else None
        return y

    def backward(self, dy, need_dx=True):
        dx, dw, db = _conv3d_backward(dy, self._take_cache(), need_dx)
        self.grads = {"W": dw, "b": db}
        return dx

    def output_shape(self, in_shape):
        c, *sp = in_shape
        return (self.maps,) + tuple(_out_size(n, self.size, self.stride, self.pad) for n in sp)


class MaxPool3D(Layer):
    kind = "MaxPool3D"

    def __init__(self, size=2, stride=2):
        super().__init__()
        if size < 1 or stride < 1:
            raise ValueError("MaxPool3D needs size, stride >= 1")
        self.size, self.stride = size, stride

    def forward(self, x, train=False, rng=None):
        y, arg = maxpool3d_forward(x, self.size, self.stride)
        self._cache = (arg, x.shape) if train else None
        return y

    def backward(self, dy, need_dx=True):
        arg, shape = self._take_cache()
        return _maxpool3d_backward(dy, arg, shape, self.size, self.stride)

    def output_shape(self, in_shape):
        c, *sp = in_shape
        return (c,) + tuple(_out_size(n, self.size, self.stride, 0) for n in sp)


class FullyConnected(Layer):
    """Dense layer; flattens any trailing axes of its input."""

    kind = "FullyConnected"

    def __init__(self, in_features, units):
        super().__init__()
        self.in_features, self.units = in_features, units
        self.params = {"W": np.zeros((units, in_features), np.float32),
                       "b": np.zeros(units, np.float32)}

    @property
    def fan_in(self):
        return self.in_features

    @property
    def fan_out(self):
        return self.units

    def forward(self, x, train=False, rng=None):
        shape = x.shape
        x2 = x.reshape(shape[0], -1)
        y = fc_forward(x2, self.params["W"], self.params["b"])
        self._cache = (x2, shape) if train else None
        return y

    def backward(self, dy, need_dx=True):
        x2, shape = self._take_cache()
        W = self.params["W"].astype(dy.dtype, copy=False)
        self.grads = {"W": dy.T @ x2, "b": dy.sum(axis=0, dtype=np.float64).astype(dy.dtype)}
        return (dy @ W).reshape(shape) if need_dx else None

    def output_shape(self, in_shape):
        return (self.units,)


class BatchNorm(Layer):
    kind = "BatchNorm"

    def __init__(self, channels, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params = {"gamma": np.ones(channels, np.float32), "beta": np.zeros(channels, np.float32)}
        self.buffers = {"running_mean": np.zeros(channels, np.float32),
                        "running_var": np.ones(channels, np.float32)}

    def forward(self, x, train=False, rng=None):
        y, cache = _batchnorm_forward(
            x, self.params["gamma"], self.params["beta"], "train" if train else "infer",
            self.buffers["running_mean"], self.buffers["running_var"], self.eps, self.momentum)
        self._cache = cache if train else None
        return y

    def backward(self, dy, need_dx=True):
        dx, dg, db = _batchnorm_backward(dy, self._take_cache())
        self.grads = {"gamma": dg, "beta": db}
        return dx

    def affine(self):
        """Inference-time ``(scale, shift)`` per channel."""
        inv = 1.0 / np.sqrt(self.buffers["running_var"].astype(np.float64) + self.eps)
        scale = self.params["gamma"] * inv
        shift = self.params["beta"] - self.buffers["running_mean"] * scale
        return scale, shift


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, rate=0.5):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        y, keep = _dropout_forward(x, self.rate, "train" if train else "infer", rng)
        self._cache = ("mask", keep) if train else None
        return y

    def backward(self, dy, need_dx=True):
        _, keep = self._take_cache()
        return dy if keep is None else dy * keep


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train=False, rng=None):
        self._cache = (x > 0) if train else None
        return np.maximum(x, 0)

    def backward(self, dy, need_dx=True):
        return dy * self._take_cache()


class Softmax(Layer):
    """Terminal layer; its backward is fused with the cross-entropy loss."""

    kind = "Softmax"

    def forward(self, x, train=False, rng=None):
        return softmax_forward(x)

    def backward(self, dy, need_dx=True):
        return dy


LAYER_KINDS = {cls.kind: cls for cls in (Conv3D, MaxPool3D, FullyConnected, BatchNorm, Dropout, ReLU, Softmax)}
