# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: 2D convolution and multi-point bilinear sampling.

Same contracts as slabdet._kernels.reference; see that module for the
layout conventions. Accumulation order differs from the numpy version, so
results agree to float64 round-off rather than bit-exactly.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def conv2d_forward(cnp.ndarray x_in, cnp.ndarray w_in, int stride, int pad):
    cdef double[:, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, :, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef int h = x.shape[0], wd = x.shape[1], cin = x.shape[2]
    cdef int kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (wd + 2 * pad - kw) // stride + 1
    out_np = np.zeros((ho, wo, cout), dtype=np.float64)
    cdef double[:, :, ::1] out = out_np
    cdef int oy, ox, i, j, ci, co, iy, ix
    cdef double xv
    for oy in range(ho):
        for ox in range(wo):
            for i in range(kh):
                iy = oy * stride + i - pad
                if iy < 0 or iy >= h:
                    continue
                for j in range(kw):
                    ix = ox * stride + j - pad
                    if ix < 0 or ix >= wd:
                        continue
                    for ci in range(cin):
                        xv = x[iy, ix, ci]
                        if xv == 0.0:
                            continue
                        for co in range(cout):
                            out[oy, ox, co] += xv * w[i, j, ci, co]
    return out_np


def conv2d_backward(cnp.ndarray x_in, cnp.ndarray w_in, cnp.ndarray gy_in,
                    int stride, int pad):
    cdef double[:, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, :, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef double[:, :, ::1] gy = np.ascontiguousarray(gy_in, dtype=np.float64)
    cdef int h = x.shape[0], wd = x.shape[1], cin = x.shape[2]
    cdef int kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    cdef int ho = gy.shape[0], wo = gy.shape[1]
    gx_np = np.zeros((h, wd, cin), dtype=np.float64)
    gw_np = np.zeros((kh, kw, cin, cout), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_np
    cdef double[:, :, :, ::1] gw = gw_np
    cdef int oy, ox, i, j, ci, co, iy, ix
    cdef double g, acc
    for oy in range(ho):
        for ox in range(wo):
            for i in range(kh):
                iy = oy * stride + i - pad
                if iy < 0 or iy >= h:
                    continue
                for j in range(kw):
                    ix = ox * stride + j - pad
                    if ix < 0 or ix >= wd:
                        continue
                    for ci in range(cin):
                        acc = 0.0
                        for co in range(cout):
                            g = gy[oy, ox, co]
                            acc += g * w[i, j, ci, co]
                            gw[i, j, ci, co] += g * x[iy, ix, ci]
                        gx[iy, ix, ci] += acc
    return gx_np, gw_np


def bilinear_forward(cnp.ndarray m_in, cnp.ndarray pts_in):
    cdef double[:, :, ::1] m = np.ascontiguousarray(m_in, dtype=np.float64)
    cdef double[:, ::1] pts = np.ascontiguousarray(pts_in, dtype=np.float64)
    cdef int h = m.shape[0], w = m.shape[1], c = m.shape[2]
    cdef int p = pts.shape[0]
    out_np = np.zeros((p, c), dtype=np.float64)
    cdef double[:, ::1] out = out_np
    cdef int k, ch, x0, y0, x1, y1
    cdef double px, py, fx, fy, w00, w10, w01, w11
    for k in range(p):
        px = pts[k, 0]
        py = pts[k, 1]
        x0 = <int>floor(px)
        y0 = <int>floor(py)
        x1 = x0 + 1
        y1 = y0 + 1
        fx = px - x0
        fy = py - y0
        w00 = (1.0 - fx) * (1.0 - fy)
        w10 = fx * (1.0 - fy)
        w01 = (1.0 - fx) * fy
        w11 = fx * fy
        for ch in range(c):
            out[k, ch] = (
                (m[y0, x0, ch] * w00 if 0 <= y0 < h and 0 <= x0 < w else 0.0)
                + (m[y0, x1, ch] * w10 if 0 <= y0 < h and 0 <= x1 < w else 0.0)
                + (m[y1, x0, ch] * w01 if 0 <= y1 < h and 0 <= x0 < w else 0.0)
                + (m[y1, x1, ch] * w11 if 0 <= y1 < h and 0 <= x1 < w else 0.0)
            )
    return out_np


def bilinear_backward(cnp.ndarray m_in, cnp.ndarray pts_in, cnp.ndarray gout_in):
    cdef double[:, :, ::1] m = np.ascontiguousarray(m_in, dtype=np.float64)
    cdef double[:, ::1] pts = np.ascontiguousarray(pts_in, dtype=np.float64)
    cdef double[:, ::1] gout = np.ascontiguousarray(gout_in, dtype=np.float64)
    cdef int h = m.shape[0], w = m.shape[1], c = m.shape[2]
    cdef int p = pts.shape[0]
    gm_np = np.zeros((h, w, c), dtype=np.float64)
    gpts_np = np.zeros((p, 2), dtype=np.float64)
    cdef double[:, :, ::1] gm = gm_np
    cdef double[:, ::1] gpts = gpts_np
    cdef int k, ch, x0, y0, x1, y1
    cdef bint v00, v10, v01, v11
    cdef double px, py, fx, fy, g, gx, gy
    cdef double a00, a10, a01, a11
    for k in range(p):
        px = pts[k, 0]
        py = pts[k, 1]
        x0 = <int>floor(px)
        y0 = <int>floor(py)
        x1 = x0 + 1
        y1 = y0 + 1
        fx = px - x0
        fy = py - y0
        v00 = 0 <= y0 < h and 0 <= x0 < w
        v10 = 0 <= y0 < h and 0 <= x1 < w
        v01 = 0 <= y1 < h and 0 <= x0 < w
        v11 = 0 <= y1 < h and 0 <= x1 < w
        gx = 0.0
        gy = 0.0
        for ch in range(c):
            g = gout[k, ch]
            a00 = m[y0, x0, ch] if v00 else 0.0
            a10 = m[y0, x1, ch] if v10 else 0.0
            a01 = m[y1, x0, ch] if v01 else 0.0
            a11 = m[y1, x1, ch] if v11 else 0.0
            if v00:
                gm[y0, x0, ch] += g * (1.0 - fx) * (1.0 - fy)
            if v10:
                gm[y0, x1, ch] += g * fx * (1.0 - fy)
            if v01:
                gm[y1, x0, ch] += g * (1.0 - fx) * fy
            if v11:
                gm[y1, x1, ch] += g * fx * fy
            gx += g * ((a10 - a00) * (1.0 - fy) + (a11 - a01) * fy)
            gy += g * ((a01 - a00) * (1.0 - fx) + (a11 - a10) * fx)
        gpts[k, 0] = gx
        gpts[k, 1] = gy
    return gm_np, gpts_np
