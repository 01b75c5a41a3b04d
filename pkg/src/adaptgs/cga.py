"""Cascade adapter: score maps, threshold hypernetworks, Gaussian scores, split and prune."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import upsample
from .geometry import project
from .igr import DeformableAttention, apply_deltas
from .nn import MLP, Module
from .rasterizer import RenderSettings, center_transmittance
from .scene.types import S_MIN, GaussianSet
from .tensor import (Tensor, bilinear_sample, clip, concat, sigmoid, softmax, softplus, stack,
                     take_rows, tmean, where)


@dataclass
class CgaConfig:
    stages: int = 3
    children: int = 1
    gamma_alpha: float = 0.5
    gamma_s: float = 0.5
    tau_alpha: float = 0.3
    temperature: float = 0.1
    max_queries: int = 1024
    child_offset: float = 2.0          # children move at most this many parent sigmas per axis
    visibility_weighting: bool = True  # weight per-view samples by unoccluded transmittance
    fixed_thresholds: tuple | None = None  # (tau_low, tau_high) bypasses the hypernetworks

    def __post_init__(self):
        if self.stages < 1 or self.children < 1:
            raise ValueError("CGA needs stages >= 1 and children >= 1")
        if not (0 < self.gamma_alpha < 1 and 0 < self.gamma_s < 1):
            raise ValueError("reduction factors must lie in (0, 1)")
        if not 0 < self.tau_alpha < 1:
            raise ValueError("tau_alpha must lie in (0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.fixed_thresholds is not None and self.fixed_thresholds[0] > self.fixed_thresholds[1]:
            raise ValueError("fixed thresholds need tau_low <= tau_high")


@dataclass
class StageRecord:
    stage: int
    n_in: int
    n_split: int
    n_reduced: int
    n_removed: int
    n_out: int
    tau_low: float
    tau_high: float
    scores: np.ndarray = field(repr=False, default=None)     # aligned with the stage's input set
    centers: np.ndarray = field(repr=False, default=None)    # input centers (n_in, 3)
    centers_out: np.ndarray = field(repr=False, default=None)


# ------------------------------------------------------------------ networks
class ViewWeighter(Module):
    """beta_i from mean-pooled features of view i; alpha = softmax(beta) over views."""

    def __init__(self, d_feat: int, rng: np.random.Generator):
        self.mlp = MLP([d_feat, 32, 1], rng, zero_last=True)

    def __call__(self, features) -> Tensor:
        pooled = [tmean(F.reshape(F.shape[0], -1), axis=1) for F in features.maps]
        beta = self.mlp(stack(pooled, axis=0)).reshape(-1)
        return softmax(beta, axis=0)


class Scorer(Module):
    def __init__(self, d_feat: int, rng: np.random.Generator):
        self.mlp = MLP([d_feat, 64, 1], rng)


class Hypernet(Module):
    def __init__(self, n_params: int, d_model: int, rng: np.random.Generator):
        self.embed = MLP([n_params, d_model, d_model], rng, act="relu")
        self.attn = DeformableAttention(d_model, 1, rng, heads=1, points=1)
        self.head = MLP([d_model, 64, 2], rng, zero_last=True)


class SplitNet(Module):
    def __init__(self, n_params: int, children: int, rng: np.random.Generator):
        self.mlp = MLP([n_params, 128, children * n_params], rng, act="relu", zero_last=True)
        bias = np.zeros((children, n_params))
        bias[:, 3:6] = -0.3   # children start somewhat smaller than their parent
        self.mlp.layers[-1].b.data[:] = bias.ravel()
        self._children = children


# ------------------------------------------------------------------ operations
def score_maps(features, weights: Tensor, scorer: Scorer, full_res: tuple) -> list:
    """Keypoint score maps: fuse views with ``weights``, score each location, spatial softmax.

    Each map is rescaled to spatial mean 1 at full resolution. The fused map is
    shared by every view.
    """
    C, Hf, Wf = features.maps[0].shape
    fused = None
    for i, F in enumerate(features.maps):
        term = F * weights[i]
        fused = term if fused is None else fused + term
    logits = scorer.mlp(fused.reshape(C, Hf * Wf).transpose(1, 0)).reshape(-1)
    low = (softmax(logits, axis=0) * float(Hf * Wf)).reshape(1, Hf, Wf)
    H, W = full_res
    up = upsample(low, features.stride, H, W).reshape(H, W)
    m = up / tmean(up)
    return [m] * features.n_views


def gaussian_scores(g: GaussianSet, maps: list, cams: list, weights: Tensor,
                    visibility: bool = False, settings: RenderSettings | None = None) -> Tensor:
    """Weighted average over views of the map value at each Gaussian's projection (0 if unseen)."""
    total = None
    for i, (R, cam) in enumerate(zip(maps, cams)):
        pix, _, vis = project(g.mu, cam)
        s = bilinear_sample(R.reshape(1, *R.shape), pix).reshape(-1)
        factor = vis.astype(float)
        if visibility:
            factor = factor * center_transmittance(g, cam, settings)
        term = s * Tensor(factor) * weights[i]
        total = term if total is None else total + term
    return total


def sample_indices(n: int, max_queries: int) -> np.ndarray:
    stride = -(-n // max_queries)
    return np.arange(0, n, stride)


def compute_thresholds(g: GaussianSet, maps: list, cams: list, weights: Tensor, hyper: Hypernet,
                       max_queries: int = 1024):
    """(tau_low, tau_high) scalars with tau_low <= tau_high by construction."""
    if len(g) == 0:
        raise ValueError("cannot compute thresholds for an empty set")
    idx = sample_indices(len(g), max_queries)
    sub = g.select(idx)
    q = hyper.embed(sub.param_matrix())
    h = q
    for i, (R, cam) in enumerate(zip(maps, cams)):
        pix, _, vis = project(Tensor(sub.mu.data), cam)
        h = h + hyper.attn(q, R.reshape(1, *R.shape), pix.data, vis) * weights[i]
    ab = hyper.head(tmean(h, axis=0, keepdims=True)).reshape(-1)
    tau_low = sigmoid(ab[0])
    return tau_low, tau_low + softplus(ab[1])


def _gate(score: Tensor, tau, sign: float, temperature: float, hard: bool) -> Tensor:
    """Straight-through gate: forward value 1, backward slope of sigmoid(sign*(score-tau)/T)."""
    n = score.shape[0]
    if hard:
        return Tensor(np.ones(n))
    soft = sigmoid((score - tau) * (sign / temperature))
    return soft - Tensor(soft.data) + 1.0


def split(g: GaussianSet, scores: Tensor, tau_high, cfg: CgaConfig, net: SplitNet,
          train: bool = False) -> tuple[GaussianSet, int]:
    """Append ``cfg.children`` SplitNet children for every Gaussian scoring above ``tau_high``."""
    th = float(np.asarray(tau_high.data if isinstance(tau_high, Tensor) else tau_high))
    idx = np.nonzero(scores.data > th)[0]
    if len(idx) == 0:
        return g, 0
    parents = g.select(idx)
    M = cfg.children
    raw = net.mlp(parents.param_matrix()).reshape(len(idx) * M, -1)
    rep = np.repeat(np.arange(len(idx)), M)
    base = parents.select(rep)
    kids = apply_deltas(base, raw, cfg.child_offset)
    gate = _gate(take_rows(scores, idx[rep]), tau_high, 1.0, cfg.temperature, not train)
    kids = GaussianSet(kids.mu, kids.s, kids.r, kids.alpha * gate, kids.sh)
    return GaussianSet.cat([g, kids]), len(idx)


def prune(g: GaussianSet, scores: Tensor, tau_low, cfg: CgaConfig, train: bool = False,
          n_scored: int | None = None) -> tuple[GaussianSet, int, int]:
    """Shrink (alpha > tau_alpha) or remove (alpha <= tau_alpha) Gaussians scoring below ``tau_low``.

    Only the first ``n_scored`` Gaussians (those that were scored) are eligible.
    """
    n = len(g)
    n_scored = n if n_scored is None else n_scored
    tl = float(np.asarray(tau_low.data if isinstance(tau_low, Tensor) else tau_low))
    low = np.zeros(n, dtype=bool)
    low[:n_scored] = scores.data[:n_scored] < tl
    a = g.alpha.data
    reduce = low & (a > cfg.tau_alpha)
    remove = low & (a <= cfg.tau_alpha)
    if not low.any():
        return g, 0, 0
    alpha, s = g.alpha, g.s
    if reduce.any():
        sc = scores if n == n_scored else concat([scores, Tensor(np.zeros(n - n_scored))])
        gate = _gate(sc, tau_low, -1.0, cfg.temperature, not train)
        alpha = alpha * where(reduce, 1.0 - gate * (1.0 - cfg.gamma_alpha), 1.0)
        fs = where(reduce, 1.0 - gate * (1.0 - cfg.gamma_s), 1.0)
        s = clip(s * fs.reshape(-1, 1), S_MIN, np.inf)
    out = GaussianSet(g.mu, s, g.r, alpha, g.sh)
    if remove.any():
        out = out.select(np.nonzero(~remove)[0])
    return out, int(reduce.sum()), int(remove.sum())


class Adapter(Module):
    """All learnable parts of the cascade."""

    def __init__(self, cfg: CgaConfig, n_params: int, d_feat: int, d_model: int,
                 rng: np.random.Generator):
        self.weighter = ViewWeighter(d_feat, rng)
        self.scorer = Scorer(d_feat, rng)
        self.hyper = [Hypernet(n_params, d_model, rng) for _ in range(cfg.stages)]
        self.splitnet = [SplitNet(n_params, cfg.children, rng) for _ in range(cfg.stages)]


def run_cga(g: GaussianSet, maps: list, cams: list, weights: Tensor, cfg: CgaConfig,
            adapter: Adapter, train: bool = False, records: list | None = None,
            settings: RenderSettings | None = None) -> GaussianSet:
    """K stages of thresholds -> scores -> split -> prune."""
    for k in range(cfg.stages):
        n_in = len(g)
        if n_in == 0:
            if records is not None:
                records.append(StageRecord(k, 0, 0, 0, 0, 0, float("nan"), float("nan")))
            continue
        if cfg.fixed_thresholds is not None:
            tau_low, tau_high = (Tensor(np.array(float(v))) for v in cfg.fixed_thresholds)
        else:
            tau_low, tau_high = compute_thresholds(g, maps, cams, weights, adapter.hyper[k],
                                                   cfg.max_queries)
        scores = gaussian_scores(g, maps, cams, weights, cfg.visibility_weighting, settings)
        centers = g.mu.data.copy() if records is not None else None
        g, n_split = split(g, scores, tau_high, cfg, adapter.splitnet[k], train)
        g, n_red, n_rem = prune(g, scores, tau_low, cfg, train, n_scored=n_in)
        if records is not None:
            records.append(StageRecord(k, n_in, n_split, n_red, n_rem, len(g),
                                       float(tau_low.data), float(tau_high.data), scores.data.copy(),
                                       centers, g.mu.data.copy()))
    return g
