"""Differentiable building blocks above the elementwise core."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .core import Tensor, as_tensor, make


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), backward)


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply gain/bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red).reshape(gain.shape), g.sum(axis=red).reshape(bias.shape)

    return make(out, (x, gain, bias), backward)


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1.

    ``x`` is ``(C, H, W)`` or ``(B, C, H, W)``; ``w`` is ``(O, C, 3, 3)``.
    Output spatial size is ``ceil(H / stride) x ceil(W / stride)``.
    """
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = w.data
    B, C, H, W = xd.shape
    O, Cw, kh, kw = wd.shape
    if Cw != C:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if (kh, kw) != (3, 3):
        raise ValueError("conv2d: only 3x3 kernels are supported")
    Ho, Wo = -(-H // stride), -(-W // stride)
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # im2col: rows ordered (c, ky, kx) to match w.reshape(O, C * 9)
    cols = np.empty((B, C, 9, Ho * Wo))
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky * 3 + kx] = xp[:, :, ky:ky + stride * Ho:stride,
                                         kx:kx + stride * Wo:stride].reshape(B, C, Ho * Wo)
    cols = cols.reshape(B, C * 9, Ho * Wo)
    w2 = wd.reshape(O, C * 9)
    out = np.matmul(w2, cols).reshape(B, O, Ho, Wo)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        g = g[None] if squeeze else g
        g2 = g.reshape(B, O, Ho * Wo)
        gw = np.zeros((O, C * 9))
        for i in range(B):
            gw += g2[i] @ cols[i].T
        gcols = np.matmul(w2.T, g2).reshape(B, C, 9, Ho * Wo)
        gxp = np.zeros_like(xp)
        for ky in range(3):
            for kx in range(3):
                gxp[:, :, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride] += (
                    gcols[:, :, ky * 3 + kx].reshape(B, C, Ho, Wo))
        gx = gxp[:, :, 1:H + 1, 1:W + 1]
        res = [gx[0] if squeeze else gx, gw.reshape(wd.shape)]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)

    return make(out[0] if squeeze else out, parents, backward)


def bilinear_sample(F, points) -> Tensor:
    """Sample ``F`` (C, H, W) at continuous pixel coordinates ``points`` (P, 2).

    Pixel centers sit at integer coordinates, x to the right and y down. Each
    neighbouring texel contributes ``max(0, 1-|dx|) * max(0, 1-|dy|)``; texels
    outside the map contribute nothing, so the result fades to zero within one
    pixel of the border. Differentiable in both ``F`` and ``points``.
    """
    F, points = as_tensor(F), as_tensor(points)
    C, H, W = F.shape
    pts = points.data
    x, y = pts[:, 0], pts[:, 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    P = len(pts)
    corners = ((0, 0), (1, 0), (0, 1), (1, 1))
    rows, cols, vals, dxs, dys = [], [], [], [], []
    for cx, cy in corners:
        xi, yi = x0 + cx, y0 + cy
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        wx = fx if cx else 1.0 - fx
        wy = fy if cy else 1.0 - fy
        sx = 1.0 if cx else -1.0
        sy = 1.0 if cy else -1.0
        r = np.nonzero(valid)[0]
        rows.append(r)
        cols.append(yi[r] * W + xi[r])
        vals.append((wx * wy)[r])
        dxs.append((sx * wy)[r])
        dys.append((sy * wx)[r])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    S = sp.csr_matrix((np.concatenate(vals), (rows, cols)), shape=(P, H * W))
    flat = F.data.reshape(C, H * W).T
    out = np.asarray(S @ flat)

    def backward(g):
        gF = np.asarray(S.T @ g).T.reshape(C, H, W) if F.requires_grad else None
        gp = np.zeros_like(pts)
        if points.requires_grad:
            Sx = sp.csr_matrix((np.concatenate(dxs), (rows, cols)), shape=(P, H * W))
            Sy = sp.csr_matrix((np.concatenate(dys), (rows, cols)), shape=(P, H * W))
            gp[:, 0] = (np.asarray(Sx @ flat) * g).sum(axis=1)
            gp[:, 1] = (np.asarray(Sy @ flat) * g).sum(axis=1)
        return gF, gp

    return make(out, (F, points), backward)


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).mean()
