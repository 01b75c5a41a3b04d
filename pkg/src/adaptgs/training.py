"""Loss, training loop, evaluation metrics and the ablation harness."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .config import PRESETS, Config
from .pipeline import Model, forward_pipeline, infer, save_checkpoint, select_inputs
from .scene.types import SceneSample
from .tensor import Tensor, adam_init, adam_step, cosine_lr, mse, track_allocations

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
PERCEPTUAL_NOTE = "perceptual term: finite-difference image-gradient surrogate"


class DivergenceError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


# ------------------------------------------------------------------ loss and metrics
def gradient_surrogate(rendered: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared difference of horizontal and vertical finite-difference image gradients."""
    t = Tensor(np.asarray(target, dtype=np.float64))
    dx_r = rendered[:, :, 1:] - rendered[:, :, :-1]
    dy_r = rendered[:, 1:, :] - rendered[:, :-1, :]
    dx_t = t[:, :, 1:] - t[:, :, :-1]
    dy_t = t[:, 1:, :] - t[:, :-1, :]
    return (mse(dx_r, dx_t) + mse(dy_r, dy_t)) * 0.5


def loss_fn(rendered: Tensor, target, lambda_perc: float = 0.05, perceptual=gradient_surrogate) -> Tensor:
    """MSE plus ``lambda_perc`` times a perceptual term (pluggable)."""
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"loss: rendered {rendered.shape} vs target {target.shape}")
    out = mse(rendered, Tensor(target))
    if lambda_perc:
        out = out + perceptual(rendered, target) * lambda_perc
    return out


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    err = float(np.mean((np.asarray(rendered) - np.asarray(target)) ** 2))
    if err <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


@dataclass
class Metrics:
    psnr: float
    gaussian_count: float
    latency_ms: float
    peak_memory_estimate: float  # bytes allocated by tensors during one forward pass
    scenes: int = 0
    views_in: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ training
def schedule_lr(index: int, total: int, base_lr: float) -> float:
    """Cosine annealing over ``total`` steps: ``base_lr`` at index 0, exactly 0 at the last."""
    if total == 1:
        return base_lr
    return cosine_lr(index, total - 1, base_lr)


@dataclass
class TrainResult:
    model: Model
    history: list
    steps: int


def _training_sample(sample: SceneSample, views_in: int) -> SceneSample:
    return select_inputs(sample, min(views_in, len(sample.inputs)))


def train(dataset: list, cfg: Config, model: Model | None = None, log_path=None, checkpoint_path=None,
          eval_every: int = 0, stop_psnr: float | None = None, eval_set: list | None = None,
          callback=None) -> TrainResult:
    """Adam with cosine annealing over ``cfg.train.steps`` steps, one scene per step.

    With ``eval_every`` > 0 the model is evaluated periodically on ``eval_set``
    (default: the training scenes); training stops early once ``stop_psnr`` is reached.
    """
    if not dataset:
        raise ValueError("training needs at least one scene")
    tc = cfg.train
    model = model or Model(cfg, seed=tc.seed)
    params = model.parameters()
    state = adam_init(params, tc.lr)
    rng = np.random.default_rng(tc.seed)
    history = []
    logf = open(log_path, "w", encoding="utf-8") if log_path else None
    if logf:
        logf.write(json.dumps({"note": PERCEPTUAL_NOTE, "lambda_perc": tc.lambda_perc}) + "\n")
    step = 0
    try:
        for step in range(1, tc.steps + 1):
            lr = schedule_lr(step - 1, tc.steps, tc.lr)
            total = 0.0
            for p in params:
                p.zero_grad()
            for _ in range(tc.grad_accum):
                sample = _training_sample(dataset[int(rng.integers(len(dataset)))], cfg.data.views_in)
                res = forward_pipeline(sample, model, "train")
                loss = None
                for img, view in zip(res.renders, sample.targets):
                    term = loss_fn(img, view.image, tc.lambda_perc)
                    loss = term if loss is None else loss + term
                loss = loss * (1.0 / (len(res.renders) * tc.grad_accum))
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite loss at step {step}")
                if loss.requires_grad:
                    loss.backward()
                total += loss.item()
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                elif not np.all(np.isfinite(p.grad)):
                    raise DivergenceError(f"non-finite gradient at step {step}")
            adam_step(params, state, lr, tc.weight_decay)
            record = {"step": step, "loss": total, "count": len(res.gaussians), "lr": lr}
            do_eval = eval_every and (step % eval_every == 0 or step == tc.steps)
            if do_eval:
                m = evaluate(eval_set or dataset, model, cfg.data.views_in)
                record["psnr"] = m.psnr
                record["count"] = m.gaussian_count
            if do_eval or step % tc.log_every == 0 or step in (1, tc.steps):
                history.append(record)
                if logf:
                    logf.write(json.dumps(record) + "\n")
                    logf.flush()
                log.info("step %d loss %.6f count %s psnr %s", step, total, record["count"],
                         record.get("psnr"))
            if callback:
                callback(record)
            if checkpoint_path and tc.checkpoint_every and step % tc.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model, {"step": step})
            if do_eval and stop_psnr is not None and record["psnr"] >= stop_psnr:
                break
    finally:
        if logf:
            logf.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, {"step": step})
    return TrainResult(model, history, step)


# ------------------------------------------------------------------ evaluation
def evaluate(dataset: list, model: Model, views_in: int, preset: str | None = None,
             workers: int | None = None) -> Metrics:
    """Mean PSNR over all held-out targets, mean final Gaussian count and latency per scene."""
    if views_in < 1:
        raise ValueError("views_in must be at least 1")
    psnrs, counts, lat, mem = [], [], [], []
    for sample in dataset:
        sub = select_inputs(sample, views_in)
        t0 = time.perf_counter()
        with track_allocations() as tracker:
            res = infer(sub, model, preset, workers)
        lat.append((time.perf_counter() - t0) * 1e3)
        mem.append(tracker.bytes)
        counts.append(len(res.gaussians))
        psnrs.extend(psnr(r.data, v.image) for r, v in zip(res.renders, sub.targets))
    return Metrics(float(np.mean(psnrs)), float(np.mean(counts)), float(np.mean(lat)),
                   float(np.max(mem)), len(dataset), views_in)


# ------------------------------------------------------------------ ablation
def ablate(train_set: list, eval_set: list, cfg: Config, presets=PRESETS, log_dir=None) -> list[dict]:
    """Train and evaluate every preset with the same budget and seed; one row per preset."""
    import dataclasses
    rows = []
    for preset in presets:
        pcfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, preset=preset))
        log_path = f"{log_dir}/{preset}.jsonl" if log_dir else None
        result = train(train_set, pcfg, log_path=log_path)
        m = evaluate(eval_set, result.model, cfg.data.views_in, preset)
        rows.append({"preset": preset, "psnr": m.psnr, "count": m.gaussian_count,
                     "latency_ms": m.latency_ms, "steps": result.steps})
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'preset':<10} {'psnr_db':>9} {'count':>9} {'latency_ms':>11}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['preset']:<10} {r['psnr']:>9.3f} {r['count']:>9.1f} {r['latency_ms']:>11.1f}")
    return "\n".join(lines)
