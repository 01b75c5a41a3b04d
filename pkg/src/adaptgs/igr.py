"""Gaussian queries, deformable attention, iterative refinement and range-safe decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import project
from .nn import MLP, Linear, Module, param
from .scene.types import S_MAX, S_MIN, SCALE_UNIT, Camera, GaussianSet
from .tensor import (Tensor, bilinear_sample, concat, layernorm, log, softmax, sqrt, tabs, tanh,
                     where)

LOG_S_MIN, LOG_S_MAX = np.log(S_MIN), np.log(S_MAX)


@dataclass
class IgrConfig:
    blocks: int = 3
    heads: int = 4
    points: int = 1
    d_model: int = 128
    max_offset: float = 4.0      # pixels, for the learned sampling offsets
    mu_offset: float = 4.0       # decoded centers move at most this many parent sigmas per axis

    def __post_init__(self):
        if self.blocks < 1 or self.points < 1 or self.heads < 1:
            raise ValueError("IGR needs blocks, points and heads >= 1")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")


# ------------------------------------------------------------------ range-safe deltas
def _toward_bounds(base: Tensor, delta: Tensor, lo, hi) -> Tensor:
    """Move ``base`` toward ``hi`` (delta > 0) or ``lo`` (delta < 0) by a tanh fraction.

    The result stays inside [lo, hi] for any delta and equals ``base`` at delta 0.
    """
    t = tanh(delta)
    up = (hi - base) * t
    down = (base - lo) * t
    return base + where(t.data >= 0, up, down)


def apply_deltas(g: GaussianSet, raw: Tensor, mu_offset: float) -> GaussianSet:
    """Decode per-Gaussian deltas ``raw`` (N, 11 + C) relative to ``g`` into a valid set."""
    n, k = len(g), g.sh.shape[2]
    d_mu, d_s, d_r, d_a = raw[:, 0:3], raw[:, 3:6], raw[:, 6:10], raw[:, 10]
    d_sh = raw[:, 11:].reshape(n, 3, k)
    mu = g.mu + tanh(d_mu) * (g.s * (SCALE_UNIT * mu_offset))
    log_s = _toward_bounds(log(g.s), d_s, LOG_S_MIN, LOG_S_MAX)
    s = log_s.exp()
    s = s + Tensor(np.clip(s.data, S_MIN, S_MAX) - s.data)  # guard the last ulp of exp(log)
    r = g.r + d_r
    r = r / sqrt((r * r).sum(axis=1, keepdims=True))
    alpha = _toward_bounds(g.alpha, d_a, 0.0, 1.0)
    sh = clamp_sh(g.sh + d_sh)
    return GaussianSet(mu, s, r, alpha, sh)


def clamp_sh(sh: Tensor) -> Tensor:
    """Clamp higher SH bands to the magnitude of band 0 of the same channel."""
    k = sh.shape[2]
    if k == 1:
        return sh
    dc = sh[:, :, 0:1]
    rest = sh[:, :, 1:]
    bound = tabs(dc)
    over = np.abs(rest.data) > bound.data
    sign = np.sign(rest.data)
    clamped = where(over, bound * Tensor(sign), rest)
    return concat([dc, clamped], axis=2)


# ------------------------------------------------------------------ attention
class DeformableAttention(Module):
    """Queries attend to a feature map sampled at a reference point plus P-1 learned offsets."""

    def __init__(self, d_model: int, d_feat: int, rng: np.random.Generator, heads: int = 4,
                 points: int = 1, max_offset: float = 4.0, zero_value: bool = False):
        self.value = Linear(d_feat, d_model, rng, zero=zero_value)
        self._points, self._heads, self._max_offset = points, heads, max_offset
        if points > 1:
            self.offset = Linear(d_model, 2 * (points - 1), rng, zero=True)
            self.offset.b = param(rng.uniform(-1, 1, 2 * (points - 1)))
            self.query = Linear(d_model, d_model, rng)
            self.key = Linear(d_feat, d_model, rng)

    def __call__(self, q: Tensor, F: Tensor, ref: np.ndarray, visible: np.ndarray) -> Tensor:
        return deformable_attention(q, F, ref, visible, self)


def deformable_attention(q: Tensor, F: Tensor, ref: np.ndarray, visible: np.ndarray,
                         da: DeformableAttention) -> Tensor:
    """(N, d) update for queries ``q`` from map ``F`` (C, H, W) at reference pixels ``ref`` (N, 2).

    Rows whose reference point is not visible receive a zero update.
    """
    n = q.shape[0]
    P = da._points
    mask = Tensor(np.asarray(visible, dtype=float).reshape(-1, 1))
    ref_t = Tensor(np.asarray(ref, dtype=float))
    if P == 1:
        return da.value(bilinear_sample(F, ref_t)) * mask
    off = tanh(da.offset(q)) * da._max_offset                     # (N, 2(P-1))
    pts = concat([ref_t.reshape(n, 1, 2), ref_t.reshape(n, 1, 2) + off.reshape(n, P - 1, 2)], axis=1)
    samples = bilinear_sample(F, pts.reshape(n * P, 2))            # (N P, C)
    h = da._heads
    d = da.value.w.shape[1]
    dh = d // h
    k = da.key(samples).reshape(n, P, h, dh).transpose(0, 2, 3, 1)  # (N, h, dh, P)
    v = da.value(samples).reshape(n, P, h, dh).transpose(0, 2, 1, 3)  # (N, h, P, dh)
    qh = da.query(q).reshape(n, h, 1, dh)
    w = softmax((qh @ k) * (1.0 / np.sqrt(dh)), axis=-1)          # (N, h, 1, P)
    out = (w @ v).reshape(n, d)
    return out * mask


def project_refs(mu: Tensor, cam: Camera):
    pix, _, vis = project(Tensor(mu.data), cam)
    return pix.data, vis


# ------------------------------------------------------------------ modules
class Embed(Module):
    def __init__(self, n_in: int, d_model: int, rng: np.random.Generator):
        self.mlp = MLP([n_in, d_model, d_model], rng, act="relu")

    def __call__(self, g: GaussianSet) -> Tensor:
        return self.mlp(g.param_matrix())


class IgrBlock(Module):
    def __init__(self, cfg: IgrConfig, d_feat: int, rng: np.random.Generator):
        self.attn = DeformableAttention(cfg.d_model, d_feat, rng, cfg.heads, cfg.points,
                                        cfg.max_offset, zero_value=True)
        self.ln_g = param(np.ones(cfg.d_model))
        self.ln_b = param(np.zeros(cfg.d_model))
        self.mlp = MLP([cfg.d_model, 2 * cfg.d_model, cfg.d_model], rng, act="relu", zero_last=True)


class Decoder(Module):
    def __init__(self, d_model: int, n_out: int, rng: np.random.Generator):
        self.mlp = MLP([d_model, d_model, n_out], rng, act="relu", zero_last=True)


class Refiner(Module):
    """Embedding, B refinement blocks and the decoder."""

    def __init__(self, cfg: IgrConfig, n_params: int, d_feat: int, rng: np.random.Generator):
        self.embed = Embed(n_params, cfg.d_model, rng)
        self.blocks = [IgrBlock(cfg, d_feat, rng) for _ in range(cfg.blocks)]
        self.decoder = Decoder(cfg.d_model, n_params, rng)
        self._cfg = cfg


def embed_gaussians(g: GaussianSet, refiner: Refiner) -> Tensor:
    if len(g) == 0:
        raise ValueError("cannot embed an empty Gaussian set")
    return refiner.embed(g)


def decode_gaussians(q: Tensor, base: GaussianSet, refiner: Refiner) -> GaussianSet:
    if q.shape[0] != len(base):
        raise ValueError("query rows must align with the base set")
    return apply_deltas(base, refiner.decoder.mlp(q), refiner._cfg.mu_offset)


def igr_block(q: Tensor, features, mu: Tensor, weights: Tensor, block: IgrBlock) -> Tensor:
    """One refinement step: view-weighted deformable attention, then LN -> MLP with residual."""
    cams = features.feature_cameras()
    h = q
    for i, (F, cam) in enumerate(zip(features.maps, cams)):
        ref, vis = project_refs(mu, cam)
        h = h + block.attn(q, F, ref, vis) * weights[i]
    return h + block.mlp(layernorm(h, block.ln_g, block.ln_b))


def refine(g: GaussianSet, features, weights: Tensor, refiner: Refiner, trace: list | None = None):
    """Run all IGR blocks on ``g`` and decode the refined set."""
    q = embed_gaussians(g, refiner)
    mu = g.mu
    for b, block in enumerate(refiner.blocks):
        q = igr_block(q, features, mu, weights, block)
        if b < len(refiner.blocks) - 1:
            mu = decode_gaussians(q, g, refiner).mu
        if trace is not None:
            trace.append(q.shape[0])
    return decode_gaussians(q, g, refiner)
