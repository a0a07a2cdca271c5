"""Pure-numpy kernels: 2D convolution and multi-point bilinear sampling.

These are the fallback implementations behind ``slabdet._kernels``. The
compiled core in ``_core.pyx`` matches the same signatures and semantics;
parity between the two is covered by tests/test_kernels.py.

Layout conventions (shared with the compiled core):
  images/feature maps  (H, W, C), float64, C contiguous
  conv weights         (kh, kw, Cin, Cout)
  sample points        (P, 2) as (x, y) in pixel coordinates; integer
                       coordinates hit grid centers, out-of-range neighbours
                       contribute zero
"""

from __future__ import annotations

import numpy as np


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    kh, kw, cin, cout = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    y = cols.reshape(ho * wo, kh * kw * cin) @ w.reshape(kh * kw * cin, cout)
    return y.reshape(ho, wo, cout)


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, gy: np.ndarray, stride: int, pad: int
) -> tuple[np.ndarray, np.ndarray]:
    kh, kw, cin, cout = w.shape
    ho, wo, _ = gy.shape
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    gy2 = gy.reshape(ho * wo, cout)
    gw = (cols.reshape(ho * wo, kh * kw * cin).T @ gy2).reshape(w.shape)
    gcols = (gy2 @ w.reshape(kh * kw * cin, cout).T).reshape(ho, wo, kh, kw, cin)
    gx = _col2im(gcols, x.shape, stride, pad)
    return gx, gw


def _im2col(x, kh, kw, stride, pad):
    h, w, c = x.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = xp[i : i + ho * stride : stride, j : j + wo * stride : stride, :]
    return cols, ho, wo


def _col2im(gcols, x_shape, stride, pad):
    h, w, c = x_shape
    ho, wo, kh, kw, _ = gcols.shape
    gxp = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[i : i + ho * stride : stride, j : j + wo * stride : stride, :] += gcols[:, :, i, j, :]
    if pad:
        return gxp[pad : pad + h, pad : pad + w, :]
    return gxp


def _corner_terms(m, pts):
    h, w, _ = m.shape
    px = pts[:, 0]
    py = pts[:, 1]
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    vals = []
    weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    coords = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)]
    for yy, xx in coords:
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        v = m[yy.clip(0, h - 1), xx.clip(0, w - 1), :]
        vals.append(np.where(valid[:, None], v, 0.0))
    return coords, weights, vals, fx, fy, (h, w)


def bilinear_forward(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    _, weights, vals, _, _, _ = _corner_terms(m, pts)
    out = np.zeros((pts.shape[0], m.shape[2]), dtype=m.dtype)
    for wgt, v in zip(weights, vals):
        out += wgt[:, None] * v
    return out


def bilinear_backward(
    m: np.ndarray, pts: np.ndarray, gout: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    coords, weights, vals, fx, fy, (h, w) = _corner_terms(m, pts)
    gm = np.zeros_like(m)
    gm_flat = gm.reshape(h * w, m.shape[2])
    for (yy, xx), wgt in zip(coords, weights):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = (yy.clip(0, h - 1) * w + xx.clip(0, w - 1))[valid]
        np.add.at(gm_flat, idx, wgt[valid, None] * gout[valid])
    v00, v10, v01, v11 = vals
    # d(out)/dx and d(out)/dy of the bilinear form, contracted with gout
    dx = (v10 - v00) * (1.0 - fy)[:, None] + (v11 - v01) * fy[:, None]
    dy = (v01 - v00) * (1.0 - fx)[:, None] + (v11 - v10) * fx[:, None]
    gpts = np.empty_like(pts)
    gpts[:, 0] = np.sum(dx * gout, axis=1)
    gpts[:, 1] = np.sum(dy * gout, axis=1)
    return gm, gpts
