"""Direct nested-loop convolutions used as independent oracles.

These are deliberately naive: explicit padding, one Python loop level per
index, float64 accumulation. Each returns ``(output, multiplications)``
where the count includes products against padding zeros, which is how the
analytic MAC formulas count.
"""
import numpy as np


def _padded(x, pad):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


def conv2d_direct(x, weights, bias=None, stride=1, pad=0):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = _padded(x, pad)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    mults = 0
    for b in range(n):
        for oc in range(o):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if bias is None else float(bias[oc])
                    for ic in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[b, ic, oy * stride + i, ox * stride + j] * w[oc, ic, i, j]
                                mults += 1
                    out[b, oc, oy, ox] = acc
    return out, mults


def depthwise_direct(x, weights, bias=None, stride=1, pad=0):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n, c, h, wd = x.shape
    k = w.shape[-1]
    xp = _padded(x, pad)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    mults = 0
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if bias is None else float(bias[ch])
                    for i in range(k):
                        for j in range(k):
                            acc += xp[b, ch, oy * stride + i, ox * stride + j] * w[ch, 0, i, j]
                            mults += 1
                    out[b, ch, oy, ox] = acc
    return out, mults


def pointwise_direct(x, weights, bias=None):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n, c, h, wd = x.shape
    o = w.shape[0]
    out = np.zeros((n, o, h, wd))
    mults = 0
    for b in range(n):
        for oc in range(o):
            for y in range(h):
                for xx in range(wd):
                    acc = 0.0 if bias is None else float(bias[oc])
                    for ic in range(c):
                        acc += x[b, ic, y, xx] * w[oc, ic, 0, 0]
                        mults += 1
                    out[b, oc, y, xx] = acc
    return out, mults


def separable_direct(x, dw_weights, pw_weights, pw_bias=None, stride=1, pad=0):
    mid, m1 = depthwise_direct(x, dw_weights, None, stride, pad)
    out, m2 = pointwise_direct(mid, pw_weights, pw_bias)
    return out, m1 + m2
