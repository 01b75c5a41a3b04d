"""Multi-view feature encoder, plane-sweep depth and pixel-wise Gaussian initialization."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import unproject
from .nn import Linear, Module, param
from .scene.types import S_MAX, S_MIN, SCALE_UNIT, SH_C0, Camera, GaussianSet, SceneSample, sh_coeffs
from .tensor import (Tensor, bilinear_sample, concat, conv2d, layernorm, relu, softmax, stack,
                     tsum)

log = logging.getLogger(__name__)


@dataclass
class FeatureBundle:
    maps: list          # per view Tensor (d_f, H_f, W_f)
    stride: int
    cameras: list       # full-resolution cameras, one per view

    @property
    def n_views(self) -> int:
        return len(self.maps)

    @property
    def dim(self) -> int:
        return self.maps[0].shape[0]

    def feature_cameras(self) -> list[Camera]:
        return [c.scaled(self.stride) for c in self.cameras]


class ConvStage(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        self.w1 = param(rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in)))
        self.b1 = param(np.zeros(c_out))
        self.w2 = param(rng.standard_normal((c_out, c_out, 3, 3)) * np.sqrt(2.0 / (9 * c_out)))
        self.b2 = param(np.zeros(c_out))
        self._stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        x = relu(conv2d(x, self.w1, self.b1, stride=self._stride))
        return conv2d(x, self.w2, self.b2)


class CrossViewAttention(Module):
    """Attention across views at each feature location (view-count agnostic)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.ln_g = param(np.ones(dim))
        self.ln_b = param(np.zeros(dim))
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng, gain=0.5)

    def __call__(self, x: Tensor) -> Tensor:
        """``x`` is (L, V, d): L locations, V views."""
        h = layernorm(x, self.ln_g, self.ln_b)
        q, k, v = self.q(h), self.k(h), self.v(h)
        att = softmax((q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(x.shape[-1])), axis=-1)
        return x + self.o(att @ v)


class Encoder(Module):
    """Per-view conv stack followed by ``n_attn`` cross-view attention layers."""

    def __init__(self, rng: np.random.Generator, channels=(32, 64, 128), strides=(2, 2, 1),
                 n_attn: int = 1):
        chans = (3,) + tuple(channels)
        self.stages = [ConvStage(chans[i], chans[i + 1], strides[i], rng) for i in range(len(channels))]
        self.attn = [CrossViewAttention(chans[-1], rng) for _ in range(n_attn)]
        self._stride = int(np.prod(strides))

    @property
    def stride(self) -> int:
        return self._stride

    def __call__(self, images: Tensor) -> Tensor:
        """(V, 3, H, W) images in [0, 1] -> (V, d_f, H_f, W_f) features."""
        x = (images - 0.5) * 2.0
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.stages) - 1:
                x = relu(x)
        V, C, Hf, Wf = x.shape
        if self.attn:
            t = x.reshape(V, C, Hf * Wf).transpose(2, 0, 1)  # (L, V, C)
            for layer in self.attn:
                t = layer(t)
            x = t.transpose(1, 2, 0).reshape(V, C, Hf, Wf)
        return x


def encode_views(sample: SceneSample, encoder: Encoder) -> FeatureBundle:
    H, W = sample.resolution
    if H % encoder.stride or W % encoder.stride:
        raise ValueError(f"resolution {W}x{H} is not divisible by the feature stride {encoder.stride}")
    images = Tensor(np.stack([v.image for v in sample.inputs]))
    feats = encoder(images)
    maps = [feats[i] for i in range(feats.shape[0])]
    return FeatureBundle(maps, encoder.stride, [v.camera for v in sample.inputs])


# ------------------------------------------------------------------ depth
def depth_candidates(d_near: float, d_far: float, n: int) -> np.ndarray:
    """``n`` depths spaced uniformly in inverse depth, near to far."""
    if n < 2:
        raise ValueError("need at least two depth candidates")
    return 1.0 / np.linspace(1.0 / d_near, 1.0 / d_far, n)


def upsample(m: Tensor, stride: int, H: int, W: int) -> Tensor:
    """Bilinear upsampling of (C, H_f, W_f) to (C, H, W) with edge replication."""
    C, Hf, Wf = m.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    off = (stride - 1) / 2.0
    px = np.clip((xs.ravel() - off) / stride, 0, Wf - 1)
    py = np.clip((ys.ravel() - off) / stride, 0, Hf - 1)
    out = bilinear_sample(m, Tensor(np.stack([px, py], axis=1)))  # (H*W, C)
    return out.transpose(1, 0).reshape(C, H, W)


@dataclass
class DepthResult:
    depth: list          # per view Tensor (H, W)
    probs: list          # per view Tensor (D, H_f, W_f) or None
    candidates: np.ndarray


def cost_volume_depth(features: FeatureBundle, d_near: float, d_far: float, n_depth: int = 32,
                      full_res: tuple | None = None) -> DepthResult:
    """Plane-sweep depth per view: correlation with every other view, softmax over candidates."""
    cands = depth_candidates(d_near, d_far, n_depth)
    cams = features.feature_cameras()
    V = features.n_views
    C, Hf, Wf = features.maps[0].shape
    H, W = full_res or (Hf * features.stride, Wf * features.stride)
    if V < 2:
        log.warning("single input view: using constant mid-range depth %.3f", 0.5 * (d_near + d_far))
        const = Tensor(np.full((H, W), 0.5 * (d_near + d_far)))
        return DepthResult([const] * V, [None] * V, cands)
    ys, xs = np.mgrid[0:Hf, 0:Wf].astype(float)
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1)
    P = len(pix)
    depth_col = np.repeat(cands, P)
    pix_all = np.tile(pix, (n_depth, 1))
    depths, probs = [], []
    for i in range(V):
        ref = features.maps[i].reshape(C, P).transpose(1, 0)  # (P, C)
        world = unproject(Tensor(pix_all), Tensor(depth_col), cams[i]).data
        corr = None
        for j in range(V):
            if j == i:
                continue
            pc = world @ cams[j].R.T + cams[j].t
            z = np.where(pc[:, 2] > 1e-4, pc[:, 2], np.nan)
            uv = np.stack([cams[j].fx * pc[:, 0] / z + cams[j].cx,
                           cams[j].fy * pc[:, 1] / z + cams[j].cy], axis=1)
            uv = np.where(np.isfinite(uv), uv, -10.0)  # behind the camera: outside the support
            warped = bilinear_sample(features.maps[j], Tensor(uv)).reshape(n_depth, P, C)
            c = tsum(warped * ref, axis=2)
            corr = c if corr is None else corr + c
        corr = corr * (1.0 / ((V - 1) * np.sqrt(C)))
        p = softmax(corr, axis=0)  # (D, P)
        d = tsum(p * Tensor(cands.reshape(-1, 1)), axis=0).reshape(1, Hf, Wf)
        depths.append(upsample(d, features.stride, H, W).reshape(H, W))
        probs.append(p.reshape(n_depth, Hf, Wf))
    return DepthResult(depths, probs, cands)


# ------------------------------------------------------------------ init
def pixel_grid(H: int, W: int) -> np.ndarray:
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def init_gaussians(sample: SceneSample, depth: list, seed: int = 0, sh_degree: int = 1) -> GaussianSet:
    """One Gaussian per input pixel, unprojected at the estimated depth.

    Scales are drawn as U[0.5, 1.5] times the pixel footprint at that depth
    (clamped to the permitted range), rotations are identity, opacity is 0.5 and
    the DC colour matches the source pixel.
    """
    rng = np.random.default_rng(seed)
    H, W = sample.resolution
    pix = pixel_grid(H, W)
    k = sh_coeffs(sh_degree)
    mus, ss, shs = [], [], []
    for view, d in zip(sample.inputs, depth):
        cam = view.camera
        dflat = d.reshape(H * W)
        mus.append(unproject(Tensor(pix), dflat, cam))
        footprint = dflat.data / (0.5 * (cam.fx + cam.fy) * SCALE_UNIT)
        jitter = rng.uniform(0.5, 1.5, (H * W, 3))
        ss.append(np.clip(jitter * footprint[:, None], S_MIN, S_MAX))
        sh = np.zeros((H * W, 3, k))
        sh[:, :, 0] = (view.image.reshape(3, -1).T - 0.5) / SH_C0
        shs.append(sh)
    n = len(sample.inputs) * H * W
    r = np.zeros((n, 4))
    r[:, 0] = 1.0
    return GaussianSet(concat(mus), np.concatenate(ss), r, np.full(n, 0.5), np.concatenate(shs))
