"""Numpy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable or when
``SEGMINI_PURE=1`` is set. Signatures and results match the extension.
"""
import numpy as np


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def depthwise_forward(x, w, stride, pad):
    # x: (n, c, h, w); w: (c, k, k)
    n, c, h, wd = x.shape
    k = w.shape[-1]
    ho = _out_size(h, k, stride, pad)
    wo = _out_size(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xp = xp.astype(np.float64)
    w64 = w.astype(np.float64)
    out = np.zeros((n, c, ho, wo))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += patch * w64[None, :, i, j, None, None]
    return out.astype(x.dtype)


def depthwise_backward(x, w, grad_out, stride, pad):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    ho, wo = grad_out.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None),
                  slice(i, i + stride * (ho - 1) + 1, stride),
                  slice(j, j + stride * (wo - 1) + 1, stride))
            gw[:, i, j] = np.einsum("nchw,nchw->c", grad_out, xp[sl])
            gxp[sl] += grad_out * w[None, :, i, j, None, None]
    gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    return np.ascontiguousarray(gx), gw


def maxpool_forward(x):
    n, c, h, w = x.shape
    win = (x.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4))
    arg = np.argmax(win, axis=-1)  # first maximum wins
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    dy, dx = np.divmod(arg, 2)
    nn, cc, oy, ox = np.indices(arg.shape)
    idx = ((nn * c + cc) * h + 2 * oy + dy) * w + 2 * ox + dx
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_backward(grad_out, idx, in_shape):
    grad = np.zeros(int(np.prod(in_shape)), dtype=grad_out.dtype)
    # windows are disjoint, so every input receives at most one gradient
    grad[idx.ravel()] = grad_out.ravel()
    return grad.reshape(in_shape)


def hsv_bins(rgb, h_bins, s_bins, v_bins):
    """Quantized (h, s, v) bin indices for an (..., 3) uint8 array."""
    rgb = rgb.astype(np.float64)
    # integer channels with multiply-before-divide keep integral hues exact
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    h = np.where(mx == r, 60.0 * (g - b) / safe,
                 np.where(mx == g, 60.0 * (b - r) / safe + 120.0,
                          60.0 * (r - g) / safe + 240.0))
    h = np.where(d > 0, h, 0.0)
    h = np.where(h < 0.0, h + 360.0, h)
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    hi = np.minimum((h * (h_bins / 360.0)).astype(np.intp), h_bins - 1)
    si = np.minimum((s * s_bins).astype(np.intp), s_bins - 1)
    vi = np.minimum((mx / 255.0 * v_bins).astype(np.intp), v_bins - 1)
    return hi, si, vi


def lut_lookup(rgb, table):
    hi, si, vi = hsv_bins(rgb, *table.shape)
    return table[hi, si, vi]


def lut_segment(image, table):
    image = np.asarray(image)
    if not (image.min() >= 0 and image.max() <= 1):
        raise ValueError("image values must lie in [0, 1]")
    rgb = np.rint(np.asarray(image, dtype=np.float64).transpose(1, 2, 0) * 255).astype(np.uint8)
    return lut_lookup(rgb, table)
