"""Compiled per-tile compositing kernels (forward and recomputing backward)."""
from __future__ import annotations

import math

import numba
import numpy as np

T_MIN = 1e-4
MAX_ALPHA = 0.99


@numba.njit(cache=True, nogil=True)
def _covers(px, py, mx, my, rad):
    return (px >= math.floor(mx - rad) and px <= math.ceil(mx + rad)
            and py >= math.floor(my - rad) and py <= math.ceil(my + rad))


@numba.njit(cache=True, nogil=True)
def tile_forward(x0, y0, tw, th, members, means, conics, opacity, colors, radius,
                 cull, eps_alpha, bg, out):
    """Composite one tile into ``out`` (th*tw, 3), pixels row-major within the tile."""
    n = members.shape[0]
    for p in range(tw * th):
        px = x0 + p % tw
        py = y0 + p // tw
        T = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for k in range(n):
            j = members[k]
            mx = means[j, 0]
            my = means[j, 1]
            if cull and not _covers(px, py, mx, my, radius[j]):
                continue
            dx = px - mx
            dy = py - my
            power = -0.5 * (conics[j, 0] * dx * dx + conics[j, 2] * dy * dy) - conics[j, 1] * dx * dy
            if power > 0.0:
                continue
            raw = opacity[j] * math.exp(power)
            if raw < eps_alpha:
                continue
            w = min(MAX_ALPHA, raw)
            test_t = T * (1.0 - w)
            if test_t < T_MIN:
                break
            c0 += w * T * colors[j, 0]
            c1 += w * T * colors[j, 1]
            c2 += w * T * colors[j, 2]
            T = test_t
        out[p, 0] = c0 + T * bg[0]
        out[p, 1] = c1 + T * bg[1]
        out[p, 2] = c2 + T * bg[2]


@numba.njit(cache=True, nogil=True)
def tile_backward(x0, y0, tw, th, members, means, conics, opacity, colors, radius,
                  cull, eps_alpha, bg, grad_px, gout):
    """Accumulate per-member gradients into ``gout`` (len(members), 9).

    Columns: d mean x, d mean y, d conic a, b, c, d opacity, d colour r, g, b.
    The forward prefix of each pixel is recomputed, then walked back to front.
    """
    n = members.shape[0]
    ks = np.empty(n, dtype=np.int64)
    ws = np.empty(n)
    ts = np.empty(n)
    raws = np.empty(n)
    gss = np.empty(n)
    dxs = np.empty(n)
    dys = np.empty(n)
    for p in range(tw * th):
        px = x0 + p % tw
        py = y0 + p // tw
        g0 = grad_px[p, 0]
        g1 = grad_px[p, 1]
        g2 = grad_px[p, 2]
        if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
            continue
        T = 1.0
        m = 0
        for k in range(n):
            j = members[k]
            mx = means[j, 0]
            my = means[j, 1]
            if cull and not _covers(px, py, mx, my, radius[j]):
                continue
            dx = px - mx
            dy = py - my
            power = -0.5 * (conics[j, 0] * dx * dx + conics[j, 2] * dy * dy) - conics[j, 1] * dx * dy
            if power > 0.0:
                continue
            gs = math.exp(power)
            raw = opacity[j] * gs
            if raw < eps_alpha:
                continue
            w = min(MAX_ALPHA, raw)
            test_t = T * (1.0 - w)
            if test_t < T_MIN:
                break
            ks[m] = k
            ws[m] = w
            ts[m] = T
            raws[m] = raw
            gss[m] = gs
            dxs[m] = dx
            dys[m] = dy
            m += 1
            T = test_t
        s0 = T * bg[0]
        s1 = T * bg[1]
        s2 = T * bg[2]
        for i in range(m - 1, -1, -1):
            k = ks[i]
            j = members[k]
            w = ws[i]
            t = ts[i]
            wt = w * t
            gout[k, 6] += g0 * wt
            gout[k, 7] += g1 * wt
            gout[k, 8] += g2 * wt
            inv = 1.0 / (1.0 - w)
            gw = (g0 * (t * colors[j, 0] - s0 * inv) + g1 * (t * colors[j, 1] - s1 * inv)
                  + g2 * (t * colors[j, 2] - s2 * inv))
            s0 += wt * colors[j, 0]
            s1 += wt * colors[j, 1]
            s2 += wt * colors[j, 2]
            if raws[i] >= MAX_ALPHA:
                continue
            gout[k, 5] += gw * gss[i]
            gp = gw * raws[i]
            dx = dxs[i]
            dy = dys[i]
            a = conics[j, 0]
            b = conics[j, 1]
            c = conics[j, 2]
            gout[k, 0] += gp * (a * dx + b * dy)
            gout[k, 1] += gp * (c * dy + b * dx)
            gout[k, 2] += gp * -0.5 * dx * dx
            gout[k, 3] += gp * -dx * dy
            gout[k, 4] += gp * -0.5 * dy * dy
    return gout


@numba.njit(cache=True, nogil=True)
def tile_center_transmittance(x0, y0, tw, th, members, means, conics, opacity, radius,
                              owner_x, owner_y, cull, eps_alpha, out):
    """Transmittance in front of each splat at the pixel nearest to its center.

    Every pixel of the tile that owns at least one splat is composited front to
    back until its last owned splat is reached; the transmittance at that point
    is recorded in ``out``. Splats past the early-stop point keep the value 0.
    """
    n = members.shape[0]
    owned = np.zeros(tw * th, dtype=np.int64)
    for k in range(n):
        j = members[k]
        lx = owner_x[j] - x0
        ly = owner_y[j] - y0
        if lx >= 0 and lx < tw and ly >= 0 and ly < th:
            owned[ly * tw + lx] += 1
    for p in range(tw * th):
        left = owned[p]
        if left == 0:
            continue
        px = x0 + p % tw
        py = y0 + p // tw
        T = 1.0
        for k in range(n):
            j = members[k]
            if owner_x[j] == px and owner_y[j] == py:
                out[j] = T
                left -= 1
                if left == 0:
                    break
            mx = means[j, 0]
            my = means[j, 1]
            if cull and not _covers(px, py, mx, my, radius[j]):
                continue
            dx = px - mx
            dy = py - my
            power = -0.5 * (conics[j, 0] * dx * dx + conics[j, 2] * dy * dy) - conics[j, 1] * dx * dy
            if power > 0.0:
                continue
            raw = opacity[j] * math.exp(power)
            if raw < eps_alpha:
                continue
            w = min(MAX_ALPHA, raw)
            test_t = T * (1.0 - w)
            if test_t < T_MIN:
                break
            T = test_t
