"""Adaptive feed-forward 3D Gaussian splatting on the CPU.

Posed input images are encoded, turned into pixel-aligned Gaussians via a
plane-sweep depth estimate, adapted by a cascade of learned split/prune stages,
refined with deformable attention and rendered by a tile-based differentiable
rasterizer. Everything, including automatic differentiation, is NumPy.
"""
from .config import Config, load_config
from .estimator import GaussianSplatRegressor
from .pipeline import Model, forward_pipeline, infer, load_checkpoint, save_checkpoint
from .rasterizer import RenderSettings, density_map, render, render_backward
from .scene import Camera, GaussianSet, SceneSample, SceneSpec, View, generate_scene, load_scene
from .training import evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Camera", "Config", "GaussianSet", "GaussianSplatRegressor", "Model", "RenderSettings",
    "SceneSample", "SceneSpec", "View", "density_map", "evaluate", "forward_pipeline",
    "generate_scene", "infer", "load_checkpoint", "load_config", "load_scene", "render",
    "render_backward", "save_checkpoint", "train",
]
