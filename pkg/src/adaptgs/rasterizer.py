"""Tile-based differentiable Gaussian splatting.

Per-Gaussian preprocessing (projection, covariance transport, SH colour) runs
on the tape. Alpha compositing is a single custom op whose backward is written
by hand: for a pixel with front-to-back splats j,

    C = sum_j w_j T_j c_j + T_final * bg,     T_j = prod_{l<j} (1 - w_l)

so dC/dc_j = w_j T_j and dC/dw_j = T_j c_j - (C - sum_{m<=j} w_m T_m c_m) / (1 - w_j).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import covariance, project_covariance, to_camera
from .scene.types import SCALE_UNIT, SH_C0, SH_C1, Camera, GaussianSet
from .tensor import Tensor, custom, no_grad, sqrt, stack, take_rows

from ._kernels import MAX_ALPHA, T_MIN  # noqa: F401

TRANSMITTANCE_TILE = 4


@dataclass
class RenderSettings:
    tile_size: int = 16
    background: tuple = (0.0, 0.0, 0.0)
    eps_alpha: float = 1.0 / 255.0
    cull: bool = True
    cull_sigma: float = 3.0
    dilation: float = 0.3
    z_eps: float = 1e-4
    workers: int = 1

    def __post_init__(self):
        if self.tile_size < 8:
            raise ValueError("tile size must be at least 8")


@dataclass
class Splats:
    """Screen-space splats sorted front to back."""

    means: Tensor       # (M, 2)
    conics: Tensor      # (M, 3) inverse covariance a, b, c
    opacity: Tensor     # (M,)
    colors: Tensor      # (M, 3)
    depth: np.ndarray   # (M,)
    radius: np.ndarray  # (M,) pixels
    source: np.ndarray  # (M,) index into the Gaussian set
    extra: dict = field(default_factory=dict)


def eval_sh(sh: Tensor, dirs: Tensor) -> Tensor:
    """RGB for (N, 3, K) coefficients along unit view directions (N, 3); degrees 0 and 1."""
    k = sh.shape[2]
    rgb = sh[:, :, 0] * SH_C0
    if k >= 4:
        x = dirs[:, 0].reshape(-1, 1)
        y = dirs[:, 1].reshape(-1, 1)
        z = dirs[:, 2].reshape(-1, 1)
        rgb = rgb - sh[:, :, 1] * y * SH_C1 + sh[:, :, 2] * z * SH_C1 - sh[:, :, 3] * x * SH_C1
    elif k != 1:
        raise ValueError(f"unsupported SH coefficient count {k}")
    return rgb + 0.5


def preprocess(g: GaussianSet, cam: Camera, settings: RenderSettings) -> Splats:
    n = len(g)
    if n == 0:
        return _empty_splats()
    zc = to_camera(Tensor(g.mu.data), cam).data[:, 2]
    keep = np.nonzero(zc > settings.z_eps)[0]
    if settings.cull and len(keep):
        # coarse frustum test with a generous margin; exact bbox culling happens per tile
        with_margin = _coarse_frustum(g.mu.data[keep], g.s.data[keep], cam)
        keep = keep[with_margin]
    if len(keep) == 0:
        return _empty_splats()
    mu = take_rows(g.mu, keep) if len(keep) < n else g.mu
    s = take_rows(g.s, keep) if len(keep) < n else g.s
    r = take_rows(g.r, keep) if len(keep) < n else g.r
    alpha = take_rows(g.alpha, keep) if len(keep) < n else g.alpha
    sh = take_rows(g.sh, keep) if len(keep) < n else g.sh

    pc = to_camera(mu, cam)
    z = pc[:, 2]
    u = pc[:, 0] / z * cam.fx + cam.cx
    v = pc[:, 1] / z * cam.fy + cam.cy
    means = stack([u, v], axis=1)
    cov2 = project_covariance(covariance(s * SCALE_UNIT, r), pc, cam, settings.dilation)
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    conics = stack([c / det, -b / det, a / det], axis=1)

    d = mu - Tensor(cam.center)
    dirs = d / sqrt((d * d).sum(axis=1, keepdims=True))
    colors = eval_sh(sh, dirs)

    ad, bd, cd = a.data, b.data, c.data
    mid = 0.5 * (ad + cd)
    lam = mid + np.sqrt(np.maximum(0.1, mid * mid - (ad * cd - bd * bd)))
    radius = np.ceil(settings.cull_sigma * np.sqrt(lam))

    zd = z.data
    order = np.lexsort((keep, zd))
    if settings.cull:
        on = _on_screen(means.data[order], radius[order], cam)
        order = order[on]
    return Splats(take_rows(means, order), take_rows(conics, order), take_rows(alpha, order),
                  take_rows(colors, order), zd[order], radius[order], keep[order])


def _empty_splats() -> Splats:
    return Splats(Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 3))), Tensor(np.zeros(0)),
                  Tensor(np.zeros((0, 3))), np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64))


def _coarse_frustum(mu: np.ndarray, s: np.ndarray, cam: Camera) -> np.ndarray:
    pc = mu @ cam.R.T + cam.t
    z = pc[:, 2]
    ext = 4.0 * s.max(axis=1) * SCALE_UNIT
    u = cam.fx * pc[:, 0] / z + cam.cx
    v = cam.fy * pc[:, 1] / z + cam.cy
    mu_px = 4.0 * cam.fx * ext / z + 8
    return ((u > -mu_px) & (u < cam.width - 1 + mu_px) & (v > -mu_px) & (v < cam.height - 1 + mu_px))


def _on_screen(means: np.ndarray, radius: np.ndarray, cam: Camera) -> np.ndarray:
    x, y = means[:, 0], means[:, 1]
    return ((x + radius >= 0) & (x - radius <= cam.width - 1)
            & (y + radius >= 0) & (y - radius <= cam.height - 1))


# ------------------------------------------------------------------ compositing
def _tiles(cam: Camera, size: int):
    for ty in range(0, cam.height, size):
        for tx in range(0, cam.width, size):
            yield (tx, ty, min(size, cam.width - tx), min(size, cam.height - ty))


def _tile_members(tiles, means, radius, cull):
    n = len(means)
    if not cull:
        return [np.arange(n)] * len(tiles)
    x, y = means[:, 0], means[:, 1]
    lo_x, hi_x = np.floor(x - radius), np.ceil(x + radius)
    lo_y, hi_y = np.floor(y - radius), np.ceil(y + radius)
    out = []
    for tx, ty, tw, th in tiles:
        m = (hi_x >= tx) & (lo_x <= tx + tw - 1) & (hi_y >= ty) & (lo_y <= ty + th - 1)
        out.append(np.nonzero(m)[0])
    return out


def composite(sp: Splats, cam: Camera, settings: RenderSettings) -> Tensor:
    """Front-to-back alpha compositing of sorted splats into a (3, H, W) image.

    Each tile only visits splats whose 3-sigma box touches it (when culling is
    on); splats are already depth-sorted, so every pixel composites in order.
    """
    H, W = cam.height, cam.width
    bg = np.asarray(settings.background, dtype=np.float64)
    tiles = list(_tiles(cam, settings.tile_size))
    means = np.ascontiguousarray(sp.means.data)
    conics = np.ascontiguousarray(sp.conics.data)
    opacity = np.ascontiguousarray(sp.opacity.data)
    colors = np.ascontiguousarray(sp.colors.data)
    radius = np.ascontiguousarray(sp.radius)
    members = _tile_members(tiles, means, radius, settings.cull)
    eps = float(settings.eps_alpha)
    cull = bool(settings.cull)

    def fwd(i):
        tx, ty, tw, th = tiles[i]
        out = np.empty((tw * th, 3))
        _kernels.tile_forward(tx, ty, tw, th, members[i], means, conics, opacity, colors,
                              radius, cull, eps, bg, out)
        return out

    results = _map(fwd, range(len(tiles)), settings.workers)
    image = np.empty((H, W, 3))
    for (tx, ty, tw, th), px in zip(tiles, results):
        image[ty:ty + th, tx:tx + tw] = px.reshape(th, tw, 3)
    n = len(opacity)

    def backward(grad):
        gimg = np.transpose(grad, (1, 2, 0))

        def bwd(i):
            tx, ty, tw, th = tiles[i]
            gpx = np.ascontiguousarray(gimg[ty:ty + th, tx:tx + tw].reshape(-1, 3))
            gout = np.zeros((len(members[i]), 9))
            if len(members[i]) and np.any(gpx):
                _kernels.tile_backward(tx, ty, tw, th, members[i], means, conics, opacity, colors,
                                       radius, cull, eps, bg, gpx, gout)
            return gout

        parts = _map(bwd, range(len(tiles)), settings.workers)
        acc = np.zeros((n, 9))
        for mem, part in zip(members, parts):  # fixed tile order keeps the sum deterministic
            acc[mem] += part
        return acc[:, 0:2], acc[:, 2:5], acc[:, 5], acc[:, 6:9]

    return custom(np.transpose(image, (2, 0, 1)).copy(), (sp.means, sp.conics, sp.opacity, sp.colors), backward)


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def render(g: GaussianSet, cam: Camera, settings: RenderSettings | None = None) -> Tensor:
    """Render ``g`` from ``cam`` to a (3, H, W) tensor, differentiable in all Gaussian fields."""
    settings = settings or RenderSettings()
    sp = preprocess(g, cam, settings)
    if len(sp.source) == 0:
        bg = np.asarray(settings.background, dtype=np.float64)
        img = np.broadcast_to(bg[:, None, None], (3, cam.height, cam.width)).copy()
        fields = [g.mu, g.s, g.r, g.alpha, g.sh]
        return custom(img, fields, lambda gr: tuple(np.zeros(f.shape) for f in fields))
    return composite(sp, cam, settings)


def render_backward(g: GaussianSet, cam: Camera, settings: RenderSettings | None,
                    grad_image: np.ndarray) -> dict:
    """Gradients of ``sum(render(g) * grad_image)`` with respect to mu, s, r, alpha, sh."""
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != (3, cam.height, cam.width):
        raise ValueError(f"grad_image must be (3, {cam.height}, {cam.width})")
    leaves = {k: Tensor(getattr(g, k).data.copy(), requires_grad=True)
              for k in ("mu", "s", "r", "alpha", "sh")}
    g2 = GaussianSet(**leaves)
    img = render(g2, cam, settings)
    if img.requires_grad:
        img.backward(grad_image)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def density_map(g: GaussianSet, cam: Camera) -> np.ndarray:
    """Per-pixel count of visible projected centers (nearest-pixel binning)."""
    out = np.zeros((cam.height, cam.width))
    if len(g) == 0:
        return out
    pc = g.mu.data @ cam.R.T + cam.t
    z = pc[:, 2]
    front = z > 1e-4
    zs = np.where(front, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    vis = front & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    ix = np.rint(u[vis]).astype(np.int64)
    iy = np.rint(v[vis]).astype(np.int64)
    np.add.at(out, (iy, ix), 1.0)
    return out


def to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(np.transpose(image, (1, 2, 0)), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_raw(image: np.ndarray, path) -> None:
    """Little-endian float32 planar dump (C, H, W) for exact comparisons."""
    np.asarray(image, dtype="<f4").tofile(path)



def center_transmittance(g: GaussianSet, cam: Camera, settings: RenderSettings | None = None) -> np.ndarray:
    """Per Gaussian, the transmittance left by splats in front of it at its nearest pixel.

    1 for an unobstructed Gaussian, near 0 for one hidden behind others; 0 for
    Gaussians that are culled or project outside the image. Not differentiable.
    """
    settings = settings or RenderSettings()
    out = np.zeros(len(g))
    with no_grad():
        sp = preprocess(g.detach(), cam, settings)
    if len(sp.source) == 0:
        return out
    # small tiles keep the per-pixel member scan short; the result does not depend on tiling
    tiles = list(_tiles(cam, TRANSMITTANCE_TILE if settings.cull else settings.tile_size))
    means = np.ascontiguousarray(sp.means.data)
    radius = np.ascontiguousarray(sp.radius)
    members = _tile_members(tiles, means, radius, settings.cull)
    conics = np.ascontiguousarray(sp.conics.data)
    opacity = np.ascontiguousarray(sp.opacity.data)
    owner_x = np.floor(means[:, 0] + 0.5).astype(np.int64)
    owner_y = np.floor(means[:, 1] + 0.5).astype(np.int64)
    per_splat = np.zeros(len(sp.source))

    def run(i):
        tx, ty, tw, th = tiles[i]
        _kernels.tile_center_transmittance(tx, ty, tw, th, members[i], means, conics, opacity, radius,
                                           owner_x, owner_y, bool(settings.cull),
                                           float(settings.eps_alpha), per_splat)

    _map(run, range(len(tiles)), settings.workers)  # tiles own disjoint splats
    out[sp.source] = per_splat
    return out
