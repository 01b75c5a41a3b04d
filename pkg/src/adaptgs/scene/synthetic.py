"""Procedural multi-view scenes rendered by a small analytic ray tracer.

Scenes contain a textured backdrop, a floor and a few boxes, spheres and
cards. Cameras sit on a horizontal arc looking at the origin. The ray tracer is
deliberately independent of the Gaussian rasterizer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import Camera, SceneSample, View, look_at

_LIGHT = np.array([0.4, -0.8, -0.45]) / np.linalg.norm([0.4, -0.8, -0.45])


@dataclass(frozen=True)
class SceneSpec:
    n_views: int = 2
    n_targets: int = 2
    resolution: int = 64
    n_objects: int = 3
    d_near: float = 1.0
    d_far: float = 10.0
    arc_degrees: float = 30.0
    radius: float = 4.0
    fov_degrees: float = 50.0
    supersample: int = 2

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError("scene spec needs at least one input view")
        if self.n_targets < 1:
            raise ValueError("scene spec needs at least one target view")
        if self.resolution < 16:
            raise ValueError("resolution must be at least 16")
        if not 0 < self.d_near < self.d_far:
            raise ValueError("need 0 < d_near < d_far")


# ------------------------------------------------------------------ objects
class Texture:
    """Smooth procedural colour: base colour plus a few random sinusoids in object coordinates."""

    def __init__(self, rng: np.random.Generator, freq: float = 6.0, n_waves: int = 4):
        self.base = rng.uniform(0.25, 0.75, 3)
        self.k = rng.normal(0.0, freq, (n_waves, 3))
        self.phase = rng.uniform(0, 2 * np.pi, n_waves)
        self.amp = rng.uniform(-0.18, 0.18, (n_waves, 3))

    def __call__(self, p: np.ndarray) -> np.ndarray:
        waves = np.sin(p @ self.k.T + self.phase)
        return self.base + waves @ self.amp


class Plane:
    """Rectangle through ``center`` spanned by unit axes ``u``, ``v`` with half extents."""

    def __init__(self, center, u, v, half_u, half_v, texture):
        self.center = np.asarray(center, float)
        self.u = np.asarray(u, float) / np.linalg.norm(u)
        self.v = np.asarray(v, float) / np.linalg.norm(v)
        self.n = np.cross(self.u, self.v)
        self.half = (half_u, half_v)
        self.texture = texture

    def intersect(self, o, d):
        den = d @ self.n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - o) @ self.n) / den
        p = o + t[:, None] * d
        q = p - self.center
        inside = (np.abs(q @ self.u) <= self.half[0]) & (np.abs(q @ self.v) <= self.half[1])
        t = np.where((np.abs(den) > 1e-12) & inside & (t > 1e-9), t, np.inf)
        normal = np.where((den > 0)[:, None], -self.n, self.n)
        return t, normal

    def color(self, p):
        q = p - self.center
        return self.texture(np.stack([q @ self.u, q @ self.v, np.zeros(len(q))], axis=1))


class Sphere:
    def __init__(self, center, radius, texture):
        self.center = np.asarray(center, float)
        self.radius = float(radius)
        self.texture = texture

    def intersect(self, o, d):
        oc = o - self.center
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - root, -b + root
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where((disc >= 0) & (t > 1e-9), t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        return t, (p - self.center) / self.radius

    def color(self, p):
        return self.texture(p - self.center)


class Box:
    """Box with half sizes ``half`` rotated by ``yaw`` about the vertical axis."""

    def __init__(self, center, half, yaw, texture):
        self.center = np.asarray(center, float)
        self.half = np.asarray(half, float)
        c, s = np.cos(yaw), np.sin(yaw)
        self.R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])  # local -> world
        self.texture = texture

    def intersect(self, o, d):
        lo = (o - self.center) @ self.R
        ld = d @ self.R
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            ta = (-self.half - lo) * inv
            tb = (self.half - lo) * inv
        tmin = np.nanmax(np.minimum(ta, tb), axis=1)
        tmax = np.nanmin(np.maximum(ta, tb), axis=1)
        t = np.where((tmax >= tmin) & (tmin > 1e-9), tmin, np.inf)
        pl = lo + np.where(np.isfinite(t), t, 0.0)[:, None] * ld
        axis = np.argmax(np.abs(pl) / self.half, axis=1)
        nl = np.zeros_like(pl)
        nl[np.arange(len(pl)), axis] = np.sign(pl[np.arange(len(pl)), axis])
        return t, nl @ self.R.T

    def color(self, p):
        return self.texture((p - self.center) @ self.R)


# ------------------------------------------------------------------ tracing
def trace(objects: list, o: np.ndarray, d: np.ndarray):
    """Nearest hit per ray: (t, object index or -1, normal)."""
    n = len(d)
    best = np.full(n, np.inf)
    which = np.full(n, -1)
    normal = np.zeros((n, 3))
    for i, obj in enumerate(objects):
        t, nrm = obj.intersect(o, d)
        closer = t < best
        best = np.where(closer, t, best)
        which = np.where(closer, i, which)
        normal[closer] = nrm[closer]
    return best, which, normal


def shade(objects: list, o: np.ndarray, d: np.ndarray, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    t, which, normal = trace(objects, o, d)
    rgb = np.tile(np.asarray(background, float), (len(d), 1))
    hit = which >= 0
    p = o + np.where(hit, t, 0.0)[:, None] * d
    lam = 0.6 + 0.4 * np.abs(normal @ _LIGHT)
    for i, obj in enumerate(objects):
        m = which == i
        if np.any(m):
            rgb[m] = obj.color(p[m]) * lam[m, None]
    return np.clip(rgb, 0.0, 1.0)


def camera_rays(cam: Camera, offsets=((0.0, 0.0),)):
    """World-space rays through pixel centers (integer coordinates) shifted by ``offsets``."""
    ys, xs = np.mgrid[0:cam.height, 0:cam.width].astype(float)
    out = []
    for ox, oy in offsets:
        dc = np.stack([(xs.ravel() + ox - cam.cx) / cam.fx, (ys.ravel() + oy - cam.cy) / cam.fy,
                       np.ones(xs.size)], axis=1)
        dw = dc @ cam.R
        dw /= np.linalg.norm(dw, axis=1, keepdims=True)
        out.append(dw)
    return np.broadcast_to(cam.center, (xs.size, 3)), out


def render_objects(objects: list, cam: Camera, supersample: int = 2) -> np.ndarray:
    """Anti-aliased (3, H, W) image of ``objects`` seen from ``cam``."""
    k = max(1, int(supersample))
    offs = [((i + 0.5) / k - 0.5, (j + 0.5) / k - 0.5) for j in range(k) for i in range(k)]
    o, dirs = camera_rays(cam, offs)
    acc = sum(shade(objects, o, d) for d in dirs) / len(dirs)
    return np.ascontiguousarray(acc.reshape(cam.height, cam.width, 3).transpose(2, 0, 1))


def depth_map(objects: list, cam: Camera) -> np.ndarray:
    """Ground-truth z-depth at pixel centers (inf where nothing is hit)."""
    o, (d,) = camera_rays(cam)
    t, _, _ = trace(objects, o, d)
    z = (t[:, None] * d) @ cam.R.T
    return np.where(np.isfinite(t), z[:, 2], np.inf).reshape(cam.height, cam.width)


def locate_anchor(objects: list, cam: Camera, anchor: np.ndarray, tol: float = 1e-6):
    """Sub-pixel image location at which the traced scene shows ``anchor``, or None if hidden.

    Works from the ray tracer alone: the pixel whose surface hit is closest to
    the anchor is refined with a local affine fit of neighbouring hit points.
    """
    o, (d,) = camera_rays(cam)
    t, which, _ = trace(objects, o, d)
    hits = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    hits = hits.reshape(cam.height, cam.width, 3)
    valid = np.isfinite(t).reshape(cam.height, cam.width)
    dist = np.where(valid, np.linalg.norm(hits - anchor, axis=2), np.inf)
    iy, ix = np.unravel_index(np.argmin(dist), dist.shape)
    if not np.isfinite(dist[iy, ix]) or not (0 < ix < cam.width - 1 and 0 < iy < cam.height - 1):
        return None
    obj = which.reshape(cam.height, cam.width)
    if not (obj[iy, ix] == obj[iy, ix + 1] == obj[iy, ix - 1] == obj[iy + 1, ix] == obj[iy - 1, ix]):
        return None
    J = np.stack([(hits[iy, ix + 1] - hits[iy, ix - 1]) / 2, (hits[iy + 1, ix] - hits[iy - 1, ix]) / 2],
                 axis=1)
    delta, *_ = np.linalg.lstsq(J, anchor - hits[iy, ix], rcond=None)
    if np.linalg.norm(J @ delta - (anchor - hits[iy, ix])) > 1e-3 * np.linalg.norm(J):
        return None  # anchor not on the visible surface (occluded)
    # confirm visibility: the ray toward the anchor must hit it first
    ray = anchor - cam.center
    dist_a = np.linalg.norm(ray)
    th, _, _ = trace(objects, cam.center[None], (ray / dist_a)[None])
    if th[0] < dist_a - 1e-6 * max(1.0, dist_a):
        return None
    return np.array([ix + delta[0], iy + delta[1]])


# ------------------------------------------------------------------ generator
def _random_objects(rng: np.random.Generator, n_objects: int) -> list:
    objs = [
        Plane((0.0, 0.0, 3.0), (1, 0, 0), (0, 1, 0), 8.0, 8.0, Texture(rng, freq=2.5)),
        Plane((0.0, 1.0, 0.0), (1, 0, 0), (0, 0, 1), 8.0, 3.0, Texture(rng, freq=3.0)),
    ]
    for _ in range(n_objects):
        kind = rng.integers(0, 3)
        c = np.array([rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 0.5), rng.uniform(-0.8, 1.0)])
        size = rng.uniform(0.3, 0.55)
        if kind == 0:
            c[1] = min(c[1], 1.0 - size)
            objs.append(Sphere(c, size, Texture(rng)))
        elif kind == 1:
            half = size * rng.uniform(0.6, 1.0, 3)
            c[1] = min(c[1], 1.0 - half[1])
            objs.append(Box(c, half, rng.uniform(0, np.pi / 2), Texture(rng)))
        else:
            yaw = rng.uniform(-0.6, 0.6)
            u = (np.cos(yaw), 0.0, np.sin(yaw))
            objs.append(Plane(c, u, (0, 1, 0), size, size * 0.8, Texture(rng)))
    return objs


def _arc_camera(angle: float, elevation: float, spec: SceneSpec) -> Camera:
    eye = spec.radius * np.array([np.sin(angle), 0.0, -np.cos(angle)])
    eye[1] = -elevation
    f = 0.5 * spec.resolution / np.tan(np.radians(spec.fov_degrees) / 2)
    c = (spec.resolution - 1) / 2.0
    return Camera(f, f, c, c, spec.resolution, spec.resolution, look_at(eye, (0.0, 0.2, 0.0)))


def _anchors(rng: np.random.Generator, objects: list, cams: list, count: int = 12) -> np.ndarray:
    """Surface points seen by the middle camera, picked at random pixels."""
    cam = cams[len(cams) // 2]
    o, (d,) = camera_rays(cam)
    t, which, _ = trace(objects, o, d)
    idx = rng.choice(np.nonzero(np.isfinite(t))[0], size=count, replace=False)
    return o[idx] + t[idx, None] * d[idx]


def generate_scene(seed: int, spec: SceneSpec | None = None) -> SceneSample:
    """Deterministic procedural scene for ``seed``.

    Input cameras are spread evenly over the arc; target cameras sit strictly
    between the outermost inputs. ``meta`` carries the objects and a set of
    known 3D surface anchors.
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    objects = _random_objects(rng, spec.n_objects)
    half = np.radians(spec.arc_degrees) / 2
    elevation = rng.uniform(0.3, 0.8)
    angles = np.linspace(-half, half, spec.n_views) if spec.n_views > 1 else np.zeros(1)
    t_angles = -half + 2 * half * (np.arange(spec.n_targets) + 0.5) / spec.n_targets
    t_angles = t_angles * 0.8 + rng.uniform(-0.05, 0.05, spec.n_targets) * half
    in_cams = [_arc_camera(a, elevation, spec) for a in angles]
    tg_cams = [_arc_camera(a, elevation, spec) for a in t_angles]
    inputs = [View(render_objects(objects, c, spec.supersample), c) for c in in_cams]
    targets = [View(render_objects(objects, c, spec.supersample), c) for c in tg_cams]
    meta = {"objects": objects, "anchors": _anchors(rng, objects, in_cams), "seed": seed,
            "spec": spec}
    return SceneSample(inputs, targets, f"scene_{seed:05d}", meta)
