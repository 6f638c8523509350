# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport nearbyint

cnp.import_array()


cdef inline Py_ssize_t _first(Py_ssize_t t, Py_ssize_t stride) nogil:
    # smallest o >= 0 with o * stride + t >= 0
    return 0 if t >= 0 else (-t + stride - 1) // stride


cdef inline Py_ssize_t _stop(Py_ssize_t t, Py_ssize_t size, Py_ssize_t stride, Py_ssize_t out) nogil:
    # one past the largest o < out with o * stride + t < size
    cdef Py_ssize_t last = size - 1 - t
    if last < 0:
        return 0
    return min(out, last // stride + 1)


def depthwise_forward(const floating[:, :, :, ::1] x, const floating[:, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    # products of floats are exact in double; taps are summed in the same
    # order as the numpy fallback so both backends agree bit for bit
    cdef double[:, ::1] acc = np.empty((ho, wo))
    cdef Py_ssize_t b, ch, oy, ox, i, j, iy, y0, y1, x0, x1, off
    cdef double wv
    with nogil:
        for b in range(n):
            for ch in range(c):
                acc[:, :] = 0
                for i in range(k):
                    y0 = _first(i - pad, stride)
                    y1 = _stop(i - pad, h, stride, ho)
                    for j in range(k):
                        x0 = _first(j - pad, stride)
                        x1 = _stop(j - pad, wd, stride, wo)
                        wv = w[ch, i, j]
                        off = j - pad
                        for oy in range(y0, y1):
                            iy = oy * stride + i - pad
                            for ox in range(x0, x1):
                                acc[oy, ox] += <double>x[b, ch, iy, ox * stride + off] * wv
                for oy in range(ho):
                    for ox in range(wo):
                        out[b, ch, oy, ox] = <floating>acc[oy, ox]
    return out_arr


def depthwise_backward(const floating[:, :, :, ::1] x, const floating[:, :, ::1] w,
                       const floating[:, :, :, ::1] grad_out, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((n, c, h, wd), dtype=dtype)
    gw_arr = np.zeros((c, k, k), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef floating[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, ch, oy, ox, i, j, iy, ix, y0, y1, x0, x1
    cdef floating g, wv, tap
    with nogil:
        for ch in range(c):
            for i in range(k):
                y0 = _first(i - pad, stride)
                y1 = _stop(i - pad, h, stride, ho)
                for j in range(k):
                    x0 = _first(j - pad, stride)
                    x1 = _stop(j - pad, wd, stride, wo)
                    wv = w[ch, i, j]
                    tap = 0
                    for b in range(n):
                        for oy in range(y0, y1):
                            iy = oy * stride + i - pad
                            for ox in range(x0, x1):
                                ix = ox * stride + j - pad
                                g = grad_out[b, ch, oy, ox]
                                tap = tap + g * x[b, ch, iy, ix]
                                gx[b, ch, iy, ix] += g * wv
                    gw[ch, i, j] = tap
    return gx_arr, gw_arr


def maxpool_forward(const floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, oy, ox, dy, dx, best_y, best_x
    cdef floating best, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        best_y = 2 * oy
                        best_x = 2 * ox
                        best = x[b, ch, best_y, best_x]
                        for dy in range(2):
                            for dx in range(2):
                                v = x[b, ch, 2 * oy + dy, 2 * ox + dx]
                                # strict > keeps the first maximum in row-major order
                                if v > best:
                                    best = v
                                    best_y = 2 * oy + dy
                                    best_x = 2 * ox + dx
                        out[b, ch, oy, ox] = best
                        idx[b, ch, oy, ox] = ((b * c + ch) * h + best_y) * w + best_x
    return out_arr, idx_arr


def maxpool_backward(const floating[:, :, :, ::1] grad_out, const cnp.int64_t[:, :, :, ::1] idx, in_shape):
    dtype = np.float32 if floating is float else np.float64
    grad_arr = np.zeros(int(np.prod(in_shape)), dtype=dtype)
    cdef floating[::1] grad = grad_arr
    cdef Py_ssize_t b, ch, oy, ox
    with nogil:
        for b in range(grad_out.shape[0]):
            for ch in range(grad_out.shape[1]):
                for oy in range(grad_out.shape[2]):
                    for ox in range(grad_out.shape[3]):
                        grad[idx[b, ch, oy, ox]] = grad_out[b, ch, oy, ox]
    return grad_arr.reshape(in_shape)


cdef inline void _hsv_bin(double r, double g, double b, Py_ssize_t hb, Py_ssize_t sb,
                          Py_ssize_t vb, Py_ssize_t* hi, Py_ssize_t* si, Py_ssize_t* vi) noexcept nogil:
    cdef double mx = r, mn = r, d, h, s
    if g > mx:
        mx = g
    if b > mx:
        mx = b
    if g < mn:
        mn = g
    if b < mn:
        mn = b
    d = mx - mn
    if d > 0:
        if mx == r:
            h = 60.0 * (g - b) / d
        elif mx == g:
            h = 60.0 * (b - r) / d + 120.0
        else:
            h = 60.0 * (r - g) / d + 240.0
    else:
        h = 0.0
    if h < 0.0:
        h = h + 360.0
    s = d / mx if mx > 0 else 0.0
    hi[0] = <Py_ssize_t>(h * (hb / 360.0))
    if hi[0] > hb - 1:
        hi[0] = hb - 1
    si[0] = <Py_ssize_t>(s * sb)
    if si[0] > sb - 1:
        si[0] = sb - 1
    vi[0] = <Py_ssize_t>(mx / 255.0 * vb)
    if vi[0] > vb - 1:
        vi[0] = vb - 1


def hsv_bins(const cnp.uint8_t[:, :, ::1] rgb, Py_ssize_t h_bins, Py_ssize_t s_bins, Py_ssize_t v_bins):
    cdef Py_ssize_t H = rgb.shape[0], W = rgb.shape[1], y, x
    hi_arr = np.empty((H, W), dtype=np.intp)
    si_arr = np.empty((H, W), dtype=np.intp)
    vi_arr = np.empty((H, W), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] hi = hi_arr, si = si_arr, vi = vi_arr
    with nogil:
        for y in range(H):
            for x in range(W):
                _hsv_bin(rgb[y, x, 0], rgb[y, x, 1], rgb[y, x, 2],
                         h_bins, s_bins, v_bins, &hi[y, x], &si[y, x], &vi[y, x])
    return hi_arr, si_arr, vi_arr


def lut_lookup(const cnp.uint8_t[:, :, ::1] rgb, const cnp.uint8_t[:, :, ::1] table):
    cdef Py_ssize_t H = rgb.shape[0], W = rgb.shape[1], y, x, hi, si, vi
    cdef Py_ssize_t hb = table.shape[0], sb = table.shape[1], vb = table.shape[2]
    out_arr = np.empty((H, W), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    with nogil:
        for y in range(H):
            for x in range(W):
                _hsv_bin(rgb[y, x, 0], rgb[y, x, 1], rgb[y, x, 2],
                         hb, sb, vb, &hi, &si, &vi)
                out[y, x] = table[hi, si, vi]
    return out_arr


def lut_segment(const floating[:, :, ::1] image, const cnp.uint8_t[:, :, ::1] table):
    """Round a (3, H, W) image in [0, 1] to 8 bits and look up each pixel."""
    cdef Py_ssize_t H = image.shape[1], W = image.shape[2], y, x, hi, si, vi
    cdef Py_ssize_t hb = table.shape[0], sb = table.shape[1], vb = table.shape[2]
    cdef double r, g, b
    cdef bint bad = False
    out_arr = np.empty((H, W), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    with nogil:
        for y in range(H):
            for x in range(W):
                r = image[0, y, x]
                g = image[1, y, x]
                b = image[2, y, x]
                if not (0.0 <= r <= 1.0 and 0.0 <= g <= 1.0 and 0.0 <= b <= 1.0):
                    bad = True
                    break
                # nearbyint rounds half to even, matching np.rint
                _hsv_bin(nearbyint(r * 255.0), nearbyint(g * 255.0), nearbyint(b * 255.0),
                         hb, sb, vb, &hi, &si, &vi)
                out[y, x] = table[hi, si, vi]
            if bad:
                break
    if bad:
        raise ValueError("image values must lie in [0, 1]")
    return out_arr
