"""Float reference kernels for every layer type of the network.

All kernels accept a single example ``(C, L)`` or a batch ``(B, C, L)``;
feature maps always sit on axis -2 and time on axis -1. Each layer class
keeps the inputs of its last ``forward`` call so that ``backward`` can
produce analytic gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, fake_quantize


# ---------------------------------------------------------------------------
# Functional kernels
# ---------------------------------------------------------------------------

def _channel_mix(x, w):
    if x.shape[-2] != w.shape[1]:
        raise ShapeError(f"weights expect {w.shape[1]} input maps, got {x.shape[-2]}")
    return np.einsum("oc,...cl->...ol", w, x)


def _channel_mix_backward(x, w, gout):
    gx = np.einsum("oc,...ol->...cl", w, gout)
    gw = np.einsum("bol,bcl->oc", gout.reshape(-1, *gout.shape[-2:]), x.reshape(-1, *x.shape[-2:]))
    return gx, gw


def spatial_conv_forward(x, w):
    """``out[k, t] = sum_c w[k, c] * x[c, t]``: one filter spanning all channels."""
    return _channel_mix(x, w)


def spatial_conv_backward(x, w, gout):
    return _channel_mix_backward(x, w, gout)


def pointwise_conv_forward(x, w):
    return _channel_mix(x, w)


def pointwise_conv_backward(x, w, gout):
    return _channel_mix_backward(x, w, gout)


def same_padding(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def temporal_depthwise_forward(x, w):
    """Depthwise cross-correlation along time with same-length zero padding.

    ``out[k, t] = sum_j w[k, j] * xpad[k, t + j]`` with ``floor((K-1)/2)``
    zeros on the left and ``ceil((K-1)/2)`` on the right.
    """
    n_maps, k = w.shape
    if x.shape[-2] != n_maps:
        raise ShapeError(f"depthwise kernel has {n_maps} maps, input has {x.shape[-2]}")
    left, right = same_padding(k)
    pad = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    xp = np.pad(x, pad)
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)
    return np.einsum("...ktj,kj->...kt", windows, w)


def temporal_depthwise_backward(x, w, gout):
    n_maps, k = w.shape
    length = x.shape[-1]
    left, right = same_padding(k)
    pad = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    xp = np.pad(x, pad)
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)
    gw = np.einsum("bktj,bkt->kj", windows.reshape(-1, *windows.shape[-3:]),
                   gout.reshape(-1, *gout.shape[-2:]))
    gxp = np.zeros(xp.shape, dtype=np.result_type(gout, w))
    for j in range(k):
        gxp[..., j:j + length] += gout * w[:, j:j + 1]
    return gxp[..., left:left + length], gw


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, gout):
    return gout * (x > 0)


def avg_pool(x, k: int = 8):
    """Non-overlapping mean over windows of ``k`` samples; the tail is dropped."""
    length = x.shape[-1]
    if length < k:
        raise ShapeError(f"pooling window {k} longer than input length {length}")
    n_out = length // k
    return x[..., : n_out * k].reshape(*x.shape[:-1], n_out, k).mean(axis=-1)


def avg_pool_backward(x_shape, gout, k: int = 8):
    gx = np.zeros(x_shape, dtype=gout.dtype)
    n_out = gout.shape[-1]
    gx[..., : n_out * k] = np.repeat(gout / k, k, axis=-1)
    return gx


def fully_connected(x, w, b):
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense layer expects {w.shape[1]} inputs, got {x.shape[-1]}")
    return x @ w.T + b


def fully_connected_backward(x, w, gout):
    gx = gout @ w
    gw = gout.reshape(-1, gout.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    gb = gout.reshape(-1, gout.shape[-1]).sum(axis=0)
    return gx, gw, gb


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Return ``(loss, grad_logits)``.

    For a batch the loss is the mean over examples and the gradient is
    scaled accordingly.
    """
    logits = np.asarray(logits)
    label = np.asarray(label)
    z = logits - logits.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_probs = z - logsumexp
    onehot = np.zeros_like(logits)
    if logits.ndim == 1:
        onehot[int(label)] = 1
        return float(-log_probs[int(label)]), np.exp(log_probs) - onehot
    n = logits.shape[0]
    onehot[np.arange(n), label] = 1
    loss = float(-log_probs[np.arange(n), label].mean())
    return loss, (np.exp(log_probs) - onehot) / n


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def identity(cls, n: int, dtype=np.float32, eps: float = 1e-5) -> "BatchNormParams":
        return cls(np.ones(n, dtype), np.zeros(n, dtype), np.zeros(n, dtype), np.ones(n, dtype), eps)

    @property
    def n_params(self) -> int:
        return 4 * self.gamma.size

    def scale_shift(self):
        """Inference-time affine map ``a * x + b`` in float64."""
        a = self.gamma.astype(np.float64) / np.sqrt(self.running_var.astype(np.float64) + self.eps)
        b = self.beta.astype(np.float64) - a * self.running_mean.astype(np.float64)
        return a, b


def _feature_view(v, ndim):
    return v.reshape((-1, 1)) if ndim >= 2 else v


def batchnorm_forward(x, p: BatchNormParams, mode: str = "infer"):
    """Normalize per feature map (axis -2); returns ``(out, cache)``.

    Train mode normalizes with batch statistics over all other axes and
    updates the running statistics in place with ``p.momentum``.
    """
    if x.shape[-2] != p.gamma.size:
        raise ShapeError(f"batch norm has {p.gamma.size} features, input has {x.shape[-2]}")
    g = _feature_view(p.gamma, x.ndim)
    b = _feature_view(p.beta, x.ndim)
    if mode == "train":
        axes = tuple(i for i in range(x.ndim) if i != x.ndim - 2)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // p.gamma.size
        unbiased = var * n / max(n - 1, 1)
        p.running_mean[...] = (1 - p.momentum) * p.running_mean + p.momentum * mean
        p.running_var[...] = (1 - p.momentum) * p.running_var + p.momentum * unbiased
    elif mode == "infer":
        mean, var = p.running_mean, p.running_var
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - _feature_view(mean, x.ndim)) * _feature_view(inv_std, x.ndim)
    out = (xhat * g + b).astype(x.dtype)
    return out, (mode, xhat, inv_std)


def batchnorm_backward(cache, p: BatchNormParams, gout):
    mode, xhat, inv_std = cache
    ndim = gout.ndim
    axes = tuple(i for i in range(ndim) if i != ndim - 2)
    ggamma = (gout * xhat).sum(axis=axes)
    gbeta = gout.sum(axis=axes)
    g = _feature_view(p.gamma, ndim)
    s = _feature_view(inv_std, ndim)
    gxhat = gout * g
    if mode == "infer":
        return gxhat * s, ggamma, gbeta
    n = gout.size // p.gamma.size
    mean_g = _feature_view(gxhat.sum(axis=axes) / n, ndim)
    mean_gx = _feature_view((gxhat * xhat).sum(axis=axes) / n, ndim)
    return s * (gxhat - mean_g - xhat * mean_gx), ggamma, gbeta


# ---------------------------------------------------------------------------
# Layer objects
# ---------------------------------------------------------------------------

class Layer:
    """A layer with named parameters and gradients plus a one-step forward cache."""

    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, mode="infer"):
        raise NotImplementedError

    def backward(self, gout):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        return cache

    def macc(self, in_shape) -> int:
        return 0

    def output_shape(self, in_shape):
        return in_shape

    def n_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())


class SpatialConv(Layer):
    name = "spatial_conv"

    def __init__(self, w):
        super().__init__()
        self.params["w"] = w

    def forward(self, x, mode="infer"):
        self._cache = x
        return spatial_conv_forward(x, self.params["w"])

    def backward(self, gout):
        gx, gw = spatial_conv_backward(self._take_cache(), self.params["w"], gout)
        self.grads["w"] = gw
        return gx

    def output_shape(self, in_shape):
        return (self.params["w"].shape[0], in_shape[-1])

    def macc(self, in_shape):
        n_out, n_in = self.params["w"].shape
        return n_out * n_in * in_shape[-1]


class PointwiseConv(SpatialConv):
    name = "pointwise_conv"


class TemporalDepthwise(Layer):
    name = "temporal_depthwise"

    def __init__(self, w):
        super().__init__()
        self.params["w"] = w

    def forward(self, x, mode="infer"):
        self._cache = x
        return temporal_depthwise_forward(x, self.params["w"])

    def backward(self, gout):
        gx, gw = temporal_depthwise_backward(self._take_cache(), self.params["w"], gout)
        self.grads["w"] = gw
        return gx

    def macc(self, in_shape):
        n_maps, k = self.params["w"].shape
        return n_maps * k * in_shape[-1]


class BatchNorm(Layer):
    name = "batchnorm"

    def __init__(self, p: BatchNormParams):
        super().__init__()
        self.bn = p
        self.params["gamma"] = p.gamma
        self.params["beta"] = p.beta

    def forward(self, x, mode="infer"):
        out, self._cache = batchnorm_forward(x, self.bn, mode)
        return out

    def backward(self, gout):
        gx, self.grads["gamma"], self.grads["beta"] = batchnorm_backward(self._take_cache(), self.bn, gout)
        return gx

    def n_params(self):
        return self.bn.n_params


class ReLU(Layer):
    name = "relu"

    def forward(self, x, mode="infer"):
        self._cache = x
        return relu(x)

    def backward(self, gout):
        return relu_backward(self._take_cache(), gout)


class AvgPool(Layer):
    name = "avg_pool"

    def __init__(self, k: int = 8):
        super().__init__()
        self.k = k

    def forward(self, x, mode="infer"):
        self._cache = x.shape
        return avg_pool(x, self.k)

    def backward(self, gout):
        return avg_pool_backward(self._take_cache(), gout, self.k)

    def output_shape(self, in_shape):
        return (in_shape[0], in_shape[1] // self.k)


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, mode="infer"):
        self._cache = x.shape
        return x.reshape(*x.shape[:-2], -1)

    def backward(self, gout):
        return gout.reshape(self._take_cache())

    def output_shape(self, in_shape):
        return (in_shape[0] * in_shape[1],)


class Dense(Layer):
    name = "dense"

    def __init__(self, w, b):
        super().__init__()
        self.params["w"] = w
        self.params["b"] = b

    def forward(self, x, mode="infer"):
        self._cache = x
        return fully_connected(x, self.params["w"], self.params["b"])

    def backward(self, gout):
        gx, self.grads["w"], self.grads["b"] = fully_connected_backward(
            self._take_cache(), self.params["w"], gout)
        return gx

    def output_shape(self, in_shape):
        return (self.params["w"].shape[0],)

    def macc(self, in_shape):
        return int(self.params["w"].size)


class QuantPoint(Layer):
    """Fake-quantization node; identity (straight-through) in the backward pass.

    ``scale_exp`` stays ``None`` until calibrated. While ``enabled`` is False
    the node is a plain identity, which is how full-precision training runs.
    With ``observe`` set, absolute values seen in forward are collected for
    percentile calibration.
    """

    def __init__(self, label: str, scale_exp: int | None = None):
        super().__init__()
        self.label = label
        self.name = f"quant:{label}"
        self.scale_exp = scale_exp
        self.enabled = False
        self.observe = False
        self.observed: list[np.ndarray] = []

    def forward(self, x, mode="infer"):
        if self.observe:
            self.observed.append(np.abs(x).reshape(-1))
        if not self.enabled or self.scale_exp is None:
            return x
        return fake_quantize(x, self.scale_exp)

    def backward(self, gout):
        return gout
