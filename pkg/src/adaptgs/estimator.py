"""scikit-learn style wrapper around the feed-forward pipeline.

``X`` is always a list of :class:`SceneSample` objects (or scene directories):

* ``fit(X)`` trains the networks,
* ``transform(X)`` returns one adapted :class:`GaussianSet` per scene,
* ``predict(X)`` returns the rendered target views, ``(T, 3, H, W)`` per scene,
* ``score(X)`` returns the mean PSNR over all target views.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .config import PRESETS, Config, load_config
from .pipeline import Model, infer, load_checkpoint, save_checkpoint, select_inputs
from .scene.io import load_scene
from .scene.types import SceneSample
from .training import evaluate, train


def check_scenes(X, min_views: int = 1) -> list[SceneSample]:
    """Validate ``X`` as a non-empty list of scenes, loading any directory paths."""
    if isinstance(X, (SceneSample, str, Path)):
        X = [X]
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"expected a list of scenes, got {type(X).__name__}") from None
    if not items:
        raise ValueError("expected at least one scene")
    out = []
    for item in items:
        sample = load_scene(item) if isinstance(item, (str, Path)) else item
        if not isinstance(sample, SceneSample):
            raise TypeError(f"expected SceneSample or scene directory, got {type(item).__name__}")
        if len(sample.inputs) < min_views:
            raise ValueError(f"scene {sample.scene_id} has {len(sample.inputs)} input views, "
                             f"{min_views} required")
        out.append(sample)
    return out


class GaussianSplatRegressor(BaseEstimator):
    """Posed images in, adaptive Gaussian sets and novel views out.

    Parameters mirror the most used configuration keys; anything else can be
    given as ``section.key=value`` strings in ``overrides`` or through a config
    file in ``config``.
    """

    def __init__(self, steps: int = 5000, lr: float = 2e-4, views_in: int = 2, preset: str = "full",
                 seed: int = 0, workers: int = 1, config=None, overrides: tuple = ()):
        self.steps = steps
        self.lr = lr
        self.views_in = views_in
        self.preset = preset
        self.seed = seed
        self.workers = workers
        self.config = config
        self.overrides = overrides

    # ---------------------------------------------------------------- helpers
    def _resolve_config(self) -> Config:
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        base = self.config if isinstance(self.config, Config) else load_config(self.config)
        flags = [f"train.steps={self.steps}", f"train.lr={self.lr}", f"train.seed={self.seed}",
                 f"train.preset={self.preset}", f"data.views_in={self.views_in}",
                 f"rasterizer.workers={self.workers}"]
        return base.with_overrides(flags + list(self.overrides))

    def _model(self) -> Model:
        check_is_fitted(self, "model_")
        return self.model_

    # ---------------------------------------------------------------- estimator API
    def fit(self, X, y=None, eval_every: int = 0, stop_psnr: float | None = None):
        scenes = check_scenes(X, self.views_in)
        cfg = self._resolve_config()
        result = train(scenes, cfg, eval_every=eval_every, stop_psnr=stop_psnr)
        self.model_ = result.model
        self.config_ = cfg
        self.history_ = result.history
        self.n_steps_ = result.steps
        return self

    def transform(self, X) -> list:
        model = self._model()
        return [infer(select_inputs(s, self.views_in), model, self.preset, self.workers).gaussians
                for s in check_scenes(X, self.views_in)]

    def predict(self, X) -> list:
        model = self._model()
        out = []
        for s in check_scenes(X, self.views_in):
            res = infer(select_inputs(s, self.views_in), model, self.preset, self.workers)
            out.append(np.stack([r.data for r in res.renders]))
        return out

    def score(self, X, y=None) -> float:
        return evaluate(check_scenes(X, self.views_in), self._model(), self.views_in, self.preset,
                        self.workers).psnr

    def metrics(self, X, views_in: int | None = None):
        views = views_in or self.views_in
        return evaluate(check_scenes(X, views), self._model(), views, self.preset, self.workers)

    # ---------------------------------------------------------------- persistence
    def save(self, path) -> None:
        save_checkpoint(path, self._model(), {"preset": self.preset})

    @classmethod
    def load(cls, path, **params) -> "GaussianSplatRegressor":
        model = load_checkpoint(path)
        cfg = model.config
        est = cls(steps=cfg.train.steps, lr=cfg.train.lr, views_in=cfg.data.views_in,
                  preset=cfg.train.preset, seed=cfg.train.seed, config=cfg, **params)
        est.model_ = model
        est.config_ = cfg
        return est


__all__ = ["GaussianSplatRegressor", "NotFittedError", "check_scenes"]
