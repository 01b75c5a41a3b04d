"""Model assembly and the forward pass from posed images to rendered target views."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .cga import Adapter, CgaConfig, run_cga, score_maps
from .config import Config
from .encoder import Encoder, cost_volume_depth, encode_views, init_gaussians
from .igr import Refiner, refine
from .nn import Module
from .rasterizer import render
from .scene.types import GaussianSet, SceneSample, sh_coeffs
from .tensor import Tensor, load_arrays, no_grad, save_arrays


class Model(Module):
    """Every learnable tensor of the pipeline, grouped by component."""

    def __init__(self, cfg: Config, seed: int = 0):
        rng = np.random.default_rng(seed)
        n_params = 11 + 3 * sh_coeffs(cfg.data.sh_degree)
        d_feat = cfg.encoder.channels[-1]
        self.encoder = Encoder(rng, cfg.encoder.channels, cfg.encoder.strides, cfg.encoder.attn_layers)
        self.adapter = Adapter(cfg.cga, n_params, d_feat, cfg.igr.d_model, rng)
        self.refiner = Refiner(cfg.igr, n_params, d_feat, rng)
        self._cfg = cfg

    @property
    def config(self) -> Config:
        return self._cfg

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state(self, arrays: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, "
                             f"unexpected {sorted(extra)[:3]}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"checkpoint tensor {k} has shape {arrays[k].shape}, expected {p.shape}")
            p.data[...] = arrays[k]


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    meta = {"config": model.config.to_ini()}
    meta.update(extra or {})
    save_arrays(path, model.state(), meta)


def load_checkpoint(path) -> Model:
    try:
        arrays, meta = load_arrays(path, with_meta=True)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from None
    if "config" not in meta:
        raise ValueError(f"checkpoint {path} carries no configuration")
    model = Model(Config.from_ini(meta["config"]))
    model.load_state(arrays)
    return model


def preset_config(cfg: Config, preset: str) -> Config:
    """Configuration used by an ablation preset."""
    if preset == "rigid":
        cga = dataclasses.replace(cfg.cga, fixed_thresholds=(cfg.train.rigid_tau_low,
                                                             cfg.train.rigid_tau_high))
        return dataclasses.replace(cfg, cga=cga)
    return cfg


@dataclass
class ForwardResult:
    gaussians: GaussianSet
    renders: list
    initial_count: int
    stages: list = field(default_factory=list)
    maps: list = field(default_factory=list)
    depth: list = field(default_factory=list)
    weights: np.ndarray | None = None
    before_igr: GaussianSet | None = None


def forward_pipeline(sample: SceneSample, model: Model, mode: str = "infer", preset: str | None = None,
                     render_targets: bool = True, workers: int | None = None,
                     cga_override: CgaConfig | None = None, seed: int | None = None) -> ForwardResult:
    """encode -> depth -> init -> CGA -> IGR -> decode -> render every target view.

    ``preset`` selects an ablation: ``vanilla`` renders the initial set, ``rigid``
    runs CGA with fixed thresholds, ``hyper`` runs CGA with learned thresholds,
    ``full`` adds iterative refinement.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be train or infer, got {mode!r}")
    cfg = model.config
    seed = cfg.train.seed if seed is None else seed
    preset = preset or cfg.train.preset
    cga_cfg = cga_override or preset_config(cfg, preset).cga
    train = mode == "train"
    settings = cfg.rasterizer.settings(workers)
    H, W = sample.resolution
    feats = encode_views(sample, model.encoder)
    depth = cost_volume_depth(feats, cfg.data.d_near, cfg.data.d_far, cfg.data.depth_candidates, (H, W))
    g = init_gaussians(sample, depth.depth, seed=seed, sh_degree=cfg.data.sh_degree)
    n0 = len(g)
    weights = model.adapter.weighter(feats)
    records, maps = [], []
    before = g
    if preset != "vanilla":
        maps = score_maps(feats, weights, model.adapter.scorer, (H, W))
        cams = [v.camera for v in sample.inputs]
        g = run_cga(g, maps, cams, weights, cga_cfg, model.adapter, train=train, records=records,
                    settings=settings)
        before = g
        if preset == "full" and len(g):
            g = refine(g, feats, weights, model.refiner)
    renders = [render(g, v.camera, settings) for v in sample.targets] if render_targets else []
    return ForwardResult(g, renders, n0, records, maps, depth.depth, weights.data.copy(), before)


def infer(sample: SceneSample, model: Model, preset: str | None = None,
          workers: int | None = None) -> ForwardResult:
    with no_grad():
        return forward_pipeline(sample, model, "infer", preset, workers=workers)


def select_inputs(sample: SceneSample, k: int) -> SceneSample:
    """Keep ``k`` input views spread evenly over the available ones (ends included)."""
    n = len(sample.inputs)
    if k > n:
        raise ValueError(f"scene {sample.scene_id} has {n} input views, {k} requested")
    if k == n:
        return sample
    idx = np.unique(np.round(np.linspace(0, n - 1, k)).astype(int))
    return sample.with_inputs(list(idx))
