"""Layer forward and backward passes.

Every public op is a pure function of its inputs. Ops accept float32 or
float64 tensors and compute in the input's dtype, so the gradient checker
can reuse them unchanged in 64-bit.

Training code goes through :func:`forward`, which returns the output plus
a :class:`Cache`, and :func:`backward`, which consumes that cache.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .errors import ShapeError, StateError
from .tensor import check_tensor, ensure_finite

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

LAYER_KINDS = (
    "conv_full", "depthwise", "pointwise", "separable",
    "relu", "maxpool", "batchnorm", "upsample", "softmax",
)


@dataclass(frozen=True)
class ConvParams:
    """Weights, optional bias, stride and padding for one convolution.

    Weight layouts: full ``(out, in, k, k)``, depthwise ``(in, 1, k, k)``,
    pointwise ``(out, in, 1, 1)``. A ``None`` bias means no bias term.
    """

    weights: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4:
            raise ShapeError(f"conv weights must be rank 4, got shape {w.shape}")
        k = w.shape[2]
        if w.shape[3] != k or k % 2 == 0:
            raise ShapeError(f"kernel must be square with odd size, got {w.shape[2:]}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ShapeError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.bias is not None and np.asarray(self.bias).shape != (w.shape[0],):
            raise ShapeError(f"bias length {np.asarray(self.bias).shape} != out channels {w.shape[0]}")

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def pad(self) -> int:
        return (self.kernel_size - 1) // 2 if self.padding == "same" else 0


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        c = np.asarray(self.gamma).shape
        for name in ("beta", "running_mean", "running_var"):
            if np.asarray(getattr(self, name)).shape != c:
                raise ShapeError(f"batchnorm {name} shape differs from gamma shape {c}")
        if self.eps <= 0:
            raise ValueError("batchnorm eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("batchnorm momentum must lie in (0, 1)")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running variance must be non-negative")

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype), beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype), running_var=np.ones(channels, dtype),
        )


@dataclass
class Cache:
    """State saved by a forward call for the matching backward call."""

    kind: str
    out_shape: tuple
    state: dict = field(default_factory=dict)


# -- convolutions -----------------------------------------------------------

def _out_dim(size: int, k: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(f"input extent {size} too small for kernel {k} with padding {pad}")
    return out


def _fwd_conv_full(x, p: ConvParams):
    x = check_tensor(x, "input")
    w = np.asarray(p.weights, dtype=x.dtype)
    o, ci, k, _ = w.shape
    if x.shape[1] != ci:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {ci}")
    s, pad = p.stride, p.pad
    ho, wo = _out_dim(x.shape[2], k, s, pad), _out_dim(x.shape[3], k, s, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    # windows: (n, c, ho, wo, k, k); accumulate in float64, store in x.dtype
    win = sliding_window_view(xp.astype(np.float64), (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    out = np.tensordot(win, w.astype(np.float64), axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if p.bias is not None:
        out = out + np.asarray(p.bias, dtype=np.float64)[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)
    return ensure_finite(out, "conv2d_full"), Cache("conv_full", out.shape, {"x": x, "p": p})


def _bwd_conv_full(cache, g):
    x, p = cache.state["x"], cache.state["p"]
    w = np.asarray(p.weights, dtype=x.dtype)
    k, s, pad = p.kernel_size, p.stride, p.pad
    ho, wo = g.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    gxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += np.einsum(
                "nohw,oc->nchw", g, w[:, :, i, j])
    gx = gxp[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3]] if pad else gxp
    grads = {"weights": gw}
    if p.bias is not None:
        grads["bias"] = g.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(gx), grads


def _fwd_depthwise(x, p: ConvParams):
    x = check_tensor(x, "input")
    w = np.asarray(p.weights, dtype=x.dtype)
    if w.shape[1] != 1 or w.shape[0] != x.shape[1]:
        raise ShapeError(
            f"depthwise weights {w.shape} need one filter per input channel ({x.shape[1]})")
    k = w.shape[2]
    _out_dim(x.shape[2], k, p.stride, p.pad)
    _out_dim(x.shape[3], k, p.stride, p.pad)
    out = kernels.depthwise_forward(x, np.ascontiguousarray(w[:, 0]), p.stride, p.pad)
    if p.bias is not None:
        out += np.asarray(p.bias, dtype=x.dtype)[None, :, None, None]
    return ensure_finite(out, "depthwise_conv2d"), Cache("depthwise", out.shape, {"x": x, "p": p})


def _bwd_depthwise(cache, g):
    x, p = cache.state["x"], cache.state["p"]
    w = np.ascontiguousarray(np.asarray(p.weights, dtype=x.dtype)[:, 0])
    gx, gw = kernels.depthwise_backward(x, w, np.ascontiguousarray(g), p.stride, p.pad)
    grads = {"weights": gw[:, None]}
    if p.bias is not None:
        grads["bias"] = g.sum(axis=(0, 2, 3))
    return gx, grads


def _fwd_pointwise(x, p: ConvParams):
    x = check_tensor(x, "input")
    w = np.asarray(p.weights, dtype=x.dtype)
    if w.shape[2:] != (1, 1) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise weights {w.shape} do not match {x.shape[1]} input channels")
    xs = x[:, :, ::p.stride, ::p.stride] if p.stride > 1 else x
    n, c, h, wd = xs.shape
    out = np.matmul(w[:, :, 0, 0].astype(np.float64), xs.reshape(n, c, h * wd).astype(np.float64))
    out = out.reshape(n, w.shape[0], h, wd)
    if p.bias is not None:
        out += np.asarray(p.bias, dtype=np.float64)[None, :, None, None]
    out = out.astype(x.dtype)
    return ensure_finite(out, "pointwise_conv2d"), Cache(
        "pointwise", out.shape, {"x": x, "xs": np.ascontiguousarray(xs), "p": p})


def _bwd_pointwise(cache, g):
    x, xs, p = cache.state["x"], cache.state["xs"], cache.state["p"]
    w = np.asarray(p.weights, dtype=x.dtype)[:, :, 0, 0]
    n, c, h, wd = xs.shape
    g2 = g.reshape(n, g.shape[1], h * wd)
    gw = np.matmul(g2, xs.reshape(n, c, h * wd).transpose(0, 2, 1)).sum(axis=0)
    gxs = np.matmul(w.T, g2).reshape(n, c, h, wd)
    if p.stride > 1:
        gx = np.zeros_like(x)
        gx[:, :, ::p.stride, ::p.stride] = gxs
    else:
        gx = gxs
    grads = {"weights": gw[:, :, None, None]}
    if p.bias is not None:
        grads["bias"] = g.sum(axis=(0, 2, 3))
    return gx, grads


def _fwd_separable(x, params):
    dw, pw = params
    if pw.stride != 1:
        raise ShapeError("separable convolution applies stride in the depthwise stage only")
    mid, c1 = _fwd_depthwise(x, dw)
    if pw.weights.shape[1] != mid.shape[1]:
        raise ShapeError(
            f"pointwise stage expects {pw.weights.shape[1]} channels, depthwise gives {mid.shape[1]}")
    out, c2 = _fwd_pointwise(mid, pw)
    return out, Cache("separable", out.shape, {"dw": c1, "pw": c2})


def _bwd_separable(cache, g):
    gmid, gpw = _bwd_pointwise(cache.state["pw"], g)
    gx, gdw = _bwd_depthwise(cache.state["dw"], gmid)
    return gx, {"depthwise": gdw, "pointwise": gpw}


# -- elementwise, pooling, normalization ------------------------------------

def _fwd_relu(x, _=None):
    x = check_tensor(x, "input")
    out = np.maximum(x, 0)
    return out, Cache("relu", out.shape, {"mask": x > 0})


def _bwd_relu(cache, g):
    return np.where(cache.state["mask"], g, 0).astype(g.dtype, copy=False), {}


def _fwd_maxpool(x, _=None):
    x = check_tensor(x, "input")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool needs even height and width, got {x.shape[2]}x{x.shape[3]}")
    out, idx = kernels.maxpool_forward(x)
    return out, Cache("maxpool", out.shape, {"idx": idx, "in_shape": x.shape})


def _bwd_maxpool(cache, g):
    gx = kernels.maxpool_backward(np.ascontiguousarray(g), cache.state["idx"], cache.state["in_shape"])
    return gx, {}


def _fwd_batchnorm(x, p: BatchNormParams, mode="infer"):
    x = check_tensor(x, "input")
    if np.asarray(p.gamma).shape != (x.shape[1],):
        raise ShapeError(f"batchnorm has {np.asarray(p.gamma).shape[0]} channels, input has {x.shape[1]}")
    dt = x.dtype
    gamma = np.asarray(p.gamma, dt)[None, :, None, None]
    beta = np.asarray(p.beta, dt)[None, :, None, None]
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
    elif mode == "infer":
        mean = np.asarray(p.running_mean, dt)[None, :, None, None]
        var = np.asarray(p.running_var, dt)[None, :, None, None]
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + dt.type(p.eps))
    xhat = (x - mean) * inv_std
    out = gamma * xhat + beta
    return ensure_finite(out, "batchnorm"), Cache(
        "batchnorm", out.shape, {"xhat": xhat, "inv_std": inv_std, "gamma": gamma, "mode": mode})


def _bwd_batchnorm(cache, g):
    st = cache.state
    xhat, inv_std, gamma = st["xhat"], st["inv_std"], st["gamma"]
    grads = {"gamma": (g * xhat).sum(axis=(0, 2, 3)), "beta": g.sum(axis=(0, 2, 3))}
    dxhat = g * gamma
    if st["mode"] == "infer":
        return dxhat * inv_std, grads
    m = g.shape[0] * g.shape[2] * g.shape[3]
    gx = (inv_std / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return gx, grads


def update_running_stats(p: BatchNormParams, x) -> BatchNormParams:
    """Return ``p`` with running statistics moved toward the batch statistics of ``x``.

    Running variance tracks the unbiased batch variance.
    """
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3)) * (m / (m - 1) if m > 1 else 1.0)
    mom = p.momentum
    dt = np.asarray(p.running_mean).dtype
    return replace(
        p,
        running_mean=(mom * p.running_mean + (1 - mom) * mean).astype(dt),
        running_var=(mom * p.running_var + (1 - mom) * var).astype(dt),
    )


def _fwd_upsample(x, _=None):
    x = check_tensor(x, "input")
    out = np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)
    return out, Cache("upsample", out.shape)


def _bwd_upsample(cache, g):
    n, c, h, w = g.shape
    return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)), {}


def _fwd_softmax(x, _=None):
    x = check_tensor(x, "logits")
    if x.shape[1] < 2:
        raise ShapeError("softmax needs at least 2 classes")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)
    return ensure_finite(out, "softmax_pixelwise"), Cache("softmax", out.shape, {"p": out})


def _bwd_softmax(cache, g):
    p = cache.state["p"]
    return p * (g - (g * p).sum(axis=1, keepdims=True)), {}


_FORWARD = {
    "conv_full": _fwd_conv_full, "depthwise": _fwd_depthwise, "pointwise": _fwd_pointwise,
    "separable": _fwd_separable, "relu": _fwd_relu, "maxpool": _fwd_maxpool,
    "batchnorm": _fwd_batchnorm, "upsample": _fwd_upsample, "softmax": _fwd_softmax,
}
_BACKWARD = {
    "conv_full": _bwd_conv_full, "depthwise": _bwd_depthwise, "pointwise": _bwd_pointwise,
    "separable": _bwd_separable, "relu": _bwd_relu, "maxpool": _bwd_maxpool,
    "batchnorm": _bwd_batchnorm, "upsample": _bwd_upsample, "softmax": _bwd_softmax,
}


def forward(kind: str, x, params: Any = None, mode: str = "infer"):
    """Run one layer and return ``(output, cache)``.

    ``params`` is a ConvParams, a ``(depthwise, pointwise)`` pair for
    ``separable``, a BatchNormParams, or ``None``.
    """
    if kind not in _FORWARD:
        raise ValueError(f"unknown layer kind {kind!r}")
    if kind == "batchnorm":
        return _fwd_batchnorm(x, params, mode)
    return _FORWARD[kind](x, params)


def backward(kind: str, cache: Cache, grad_output):
    """Return ``(grad_input, grad_params)`` for a cached forward call."""
    if not isinstance(cache, Cache) or cache.kind != kind:
        got = cache.kind if isinstance(cache, Cache) else type(cache).__name__
        raise StateError(f"backward for {kind!r} given a cache from {got!r}")
    g = np.asarray(grad_output)
    if g.shape != tuple(cache.out_shape):
        raise StateError(f"gradient shape {g.shape} does not match cached output {cache.out_shape}")
    return _BACKWARD[kind](cache, g)


def conv2d_full(x, p: ConvParams):
    return _fwd_conv_full(x, p)[0]


def depthwise_conv2d(x, p: ConvParams):
    return _fwd_depthwise(x, p)[0]


def pointwise_conv2d(x, p: ConvParams):
    return _fwd_pointwise(x, p)[0]


def separable_conv2d(x, depthwise: ConvParams, pointwise: ConvParams):
    return _fwd_separable(x, (depthwise, pointwise))[0]


def relu(x):
    return _fwd_relu(x)[0]


def maxpool_2x2(x):
    """Return ``(pooled, indices)``; indices are flat positions into ``x``."""
    out, cache = _fwd_maxpool(x)
    return out, cache.state["idx"]


def batchnorm(x, p: BatchNormParams, mode: str = "infer"):
    return _fwd_batchnorm(x, p, mode)[0]


def upsample_nearest_2x(x):
    return _fwd_upsample(x)[0]


def softmax_pixelwise(logits):
    return _fwd_softmax(logits)[0]
