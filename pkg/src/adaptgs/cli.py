"""Command-line interface: ``adaptgs <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
Any files a failing command created are removed before it exits.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import PRESETS, load_config
from .rasterizer import density_map, render, write_raw
from .scene import (Camera, DataError, SceneSpec, export_ply, generate_scene, import_ply, list_scenes,
                    load_scene, save_scene, write_image_png, write_map_png)
from .training import DivergenceError, ablate, evaluate, format_table, train

log = logging.getLogger("adaptgs")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4


class UsageError(Exception):
    pass


class Outputs:
    """Tracks paths a command creates so they can be removed if it fails."""

    def __init__(self):
        self._paths = []

    def file(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self._paths.append(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def directory(self, path) -> Path:
        path = Path(path)
        missing = []
        p = path
        while not p.exists():
            missing.append(p)
            p = p.parent
        self._paths.extend(reversed(missing))
        path.mkdir(parents=True, exist_ok=True)
        return path

    def cleanup(self) -> None:
        for path in reversed(self._paths):
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            elif path.exists():
                path.unlink()
            tmp = Path(f"{path}.tmp")
            if tmp.exists():
                tmp.unlink()


# ------------------------------------------------------------------ helpers
def _views_list(text: str) -> list[int]:
    try:
        views = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not views or any(v < 1 for v in views):
        raise argparse.ArgumentTypeError("view counts must be positive")
    return views


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _config(args):
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    try:
        return load_config(args.config, overrides)
    except OSError as exc:
        raise DataError(f"cannot read config: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_scenes(path) -> list:
    return [load_scene(p) for p in list_scenes(path)]


def _checkpoint(path):
    from .pipeline import load_checkpoint
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _infer(sample, model, views, preset, workers):
    from .pipeline import infer, select_inputs
    try:
        sub = select_inputs(sample, views) if views else sample
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return sub, infer(sub, model, preset, workers)


# ------------------------------------------------------------------ commands
def cmd_gen_data(args, out: Outputs) -> None:
    if args.views < 1 or args.scenes < 1 or args.targets < 1:
        raise UsageError("--views, --scenes and --targets must be at least 1")
    if args.res < 16 or args.res % 4:
        raise UsageError("--res must be a multiple of 4 and at least 16")
    root = out.directory(args.out)
    spec = SceneSpec(n_views=args.views, n_targets=args.targets, resolution=args.res,
                     n_objects=args.objects)
    for i in range(args.scenes):
        sample = generate_scene(args.seed * 100_003 + i, spec)
        save_scene(sample, out.directory(root / f"scene_{i:03d}"))
    print(f"wrote {args.scenes} scenes to {root}")


def cmd_train(args, out: Outputs) -> None:
    cfg = _config(args)
    scenes = _load_scenes(args.data)
    ckpt = out.file(args.out)
    log_path = out.file(args.log) if args.log else out.file(f"{args.out}.log.jsonl")
    result = train(scenes, cfg, log_path=log_path, checkpoint_path=ckpt)
    last = result.history[-1] if result.history else {}
    print(f"trained {result.steps} steps, final loss {last.get('loss', float('nan')):.6f}; "
          f"checkpoint {ckpt}")


def cmd_eval(args, out: Outputs) -> None:
    model = _checkpoint(args.checkpoint)
    scenes = _load_scenes(args.data)
    rows = []
    for views in args.views:
        try:
            m = evaluate(scenes, model, views, args.preset, args.threads)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        rows.append(m.to_dict())
    lines = ["views_in\tpsnr_db\tgaussian_count\tlatency_ms\tpeak_memory_bytes"]
    for r in rows:
        lines.append(f"{r['views_in']}\t{r['psnr']:.6f}\t{r['gaussian_count']:.1f}\t"
                     f"{r['latency_ms']:.1f}\t{r['peak_memory_estimate']:.0f}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        # latency is wall-clock and varies run to run; the file keeps the deterministic fields
        keep = [{k: r[k] for k in ("views_in", "psnr", "gaussian_count", "peak_memory_estimate",
                                   "scenes")} for r in rows]
        out.file(args.out).write_text(json.dumps(keep, indent=1) + "\n")


def cmd_infer(args, out: Outputs) -> None:
    model = _checkpoint(args.checkpoint)
    sample = load_scene(args.scene)
    sub, res = _infer(sample, model, args.views, args.preset, args.threads)
    ply = out.file(args.out_ply)
    export_ply(res.gaussians, ply)
    print(f"{len(res.gaussians)} Gaussians written to {ply}")
    if args.out_dir:
        # render from the exported file so `render` on the same PLY reproduces these bitwise
        g = import_ply(ply)
        folder = out.directory(args.out_dir)
        settings = model.config.rasterizer.settings(args.threads)
        for i, view in enumerate(sub.targets):
            img = render(g, view.camera, settings).data
            write_image_png(img, out.file(folder / f"target_{i:03d}.png"))
            write_raw(img, out.file(folder / f"target_{i:03d}.raw"))


def _read_camera(path, index: int) -> Camera:
    try:
        doc = json.loads(Path(path).read_text())
        entry = doc["views"][index] if isinstance(doc, dict) and "views" in doc else doc
        return Camera.from_dict(entry)
    except (OSError, json.JSONDecodeError, KeyError, IndexError, TypeError, ValueError) as exc:
        raise DataError(f"cannot read camera {index} from {path}: {exc}") from None


def cmd_render(args, out: Outputs) -> None:
    g = import_ply(args.ply)
    cam = _read_camera(args.camera, args.index)
    cfg = _config(args)
    img = render(g, cam, cfg.rasterizer.settings(args.threads)).data
    write_image_png(img, out.file(args.out_png))
    if args.raw:
        write_raw(img, out.file(args.raw))
    print(f"rendered {len(g)} Gaussians to {args.out_png}")


def _score_splat(centers: np.ndarray, scores: np.ndarray, cam: Camera) -> np.ndarray:
    """Mean Gaussian score per pixel of the projected centers (0 where none land)."""
    from .geometry import project_points
    total = np.zeros((cam.height, cam.width))
    count = np.zeros_like(total)
    if len(centers):
        pix, _, vis = project_points(centers, cam)
        ix = np.rint(pix[vis, 0]).astype(int)
        iy = np.rint(pix[vis, 1]).astype(int)
        np.add.at(total, (iy, ix), scores[vis])
        np.add.at(count, (iy, ix), 1.0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def cmd_inspect(args, out: Outputs) -> None:
    from .scene.types import GaussianSet
    model = _checkpoint(args.checkpoint)
    sample = load_scene(args.scene)
    sub, res = _infer(sample, model, args.views, "full", args.threads)
    folder = out.directory(args.out_dir)
    cams = [v.camera for v in sub.inputs]
    lines = ["stage\tn_in\tn_split\tn_reduced\tn_removed\tn_out\ttau_low\ttau_high"]
    for i, cam in enumerate(cams):
        if res.maps:
            write_map_png(res.maps[i].data, out.file(folder / f"keypoint_view{i}.png"))
        write_map_png(res.depth[i].data, out.file(folder / f"depth_view{i}.png"))
    for rec in res.stages:
        lines.append(f"{rec.stage}\t{rec.n_in}\t{rec.n_split}\t{rec.n_reduced}\t{rec.n_removed}\t"
                     f"{rec.n_out}\t{rec.tau_low:.6f}\t{rec.tau_high:.6f}")
        centers = rec.centers if rec.centers is not None else np.zeros((0, 3))
        scores = rec.scores if rec.scores is not None else np.zeros(0)
        for i, cam in enumerate(cams):
            write_map_png(_score_splat(centers, scores, cam),
                          out.file(folder / f"stage{rec.stage}_view{i}_scores.png"))
            g_in = GaussianSet(centers, np.ones((len(centers), 3)), np.tile([1.0, 0, 0, 0], (len(centers), 1)),
                               np.zeros(len(centers)), np.zeros((len(centers), 3, 1)))
            write_map_png(density_map(g_in, cam), out.file(folder / f"stage{rec.stage}_view{i}_density.png"))
    for i, cam in enumerate(cams):
        write_map_png(density_map(res.gaussians, cam), out.file(folder / f"final_view{i}_density.png"))
    text = "\n".join(lines) + "\n"
    out.file(folder / "thresholds.txt").write_text(text)
    print(text, end="")


def cmd_ablate(args, out: Outputs) -> None:
    cfg = _config(args)
    train_scenes = _load_scenes(args.data)
    eval_scenes = _load_scenes(args.eval_data) if args.eval_data else train_scenes
    folder = out.directory(args.out)
    presets = args.presets.split(",") if args.presets else list(PRESETS)
    if any(p not in PRESETS for p in presets):
        raise UsageError(f"--presets must be drawn from {PRESETS}")
    rows = ablate(train_scenes, eval_scenes, cfg, presets, log_dir=str(folder))
    table = format_table(rows)
    out.file(folder / "ablation.txt").write_text(table + "\n")
    tsv = ["preset\tpsnr_db\tcount\tlatency_ms\tsteps"]
    tsv += [f"{r['preset']}\t{r['psnr']:.6f}\t{r['count']:.1f}\t{r['latency_ms']:.1f}\t{r['steps']}"
            for r in rows]
    out.file(folder / "ablation.tsv").write_text("\n".join(tsv) + "\n")
    print(table)


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptgs", description="Adaptive feed-forward Gaussian splatting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)

    def common(sp, config=True, threads=True):
        if config:
            sp.add_argument("--config", help="INI configuration file (defaults when omitted)")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                            help="override one configuration value; repeatable, wins over --config")
            sp.add_argument("--seed", type=int, help="random seed (sets train.seed)")
        if threads:
            sp.add_argument("--threads", type=_positive, default=1,
                            help="rasterizer tile workers; results do not depend on it (default 1)")

    g = sub.add_parser("gen-data", help="write synthetic scenes")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    g.add_argument("--scenes", type=int, default=1, help="number of scenes (default 1)")
    g.add_argument("--views", type=int, default=2, help="input views per scene (default 2)")
    g.add_argument("--targets", type=int, default=2, help="target views per scene (default 2)")
    g.add_argument("--res", type=int, default=64, help="square resolution in pixels (default 64)")
    g.add_argument("--objects", type=int, default=3, help="objects per scene (default 3)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a checkpoint")
    common(t, threads=False)
    t.add_argument("--data", required=True, help="scene directory or directory of scenes")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="metrics log path (default <out>.log.jsonl)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e, config=False)
    e.add_argument("--checkpoint", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="scene directory or directory of scenes")
    e.add_argument("--views", type=_views_list, default=[2], help="input view counts, e.g. 2,3,4")
    e.add_argument("--preset", choices=PRESETS, help="ablation preset (default: checkpoint's)")
    e.add_argument("--out", help="write the metrics rows as JSON")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict a Gaussian set for one scene")
    common(i, config=False)
    i.add_argument("--checkpoint", required=True, help="checkpoint path")
    i.add_argument("--scene", required=True, help="scene directory")
    i.add_argument("--out-ply", required=True, help="output PLY path")
    i.add_argument("--out-dir", help="also render the target views here (PNG + raw float32)")
    i.add_argument("--views", type=_positive, help="use this many input views (default: all)")
    i.add_argument("--preset", choices=PRESETS, help="ablation preset (default: checkpoint's)")
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("render", help="render a PLY from a camera")
    common(r)
    r.add_argument("--ply", required=True, help="Gaussian PLY file")
    r.add_argument("--camera", required=True, help="camera JSON (single camera or cameras.json)")
    r.add_argument("--index", type=int, default=0, help="view index within cameras.json (default 0)")
    r.add_argument("--out-png", required=True, help="output PNG path")
    r.add_argument("--raw", help="also write the image as raw little-endian float32 (3, H, W)")
    r.set_defaults(func=cmd_render)

    s = sub.add_parser("inspect", help="dump score maps, density maps and thresholds per stage")
    common(s, config=False)
    s.add_argument("--checkpoint", required=True, help="checkpoint path")
    s.add_argument("--scene", required=True, help="scene directory")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.add_argument("--views", type=_positive, help="use this many input views (default: all)")
    s.set_defaults(func=cmd_inspect)

    a = sub.add_parser("ablate", help="train and evaluate every ablation preset")
    common(a, threads=False)
    a.add_argument("--data", required=True, help="training scenes")
    a.add_argument("--eval-data", help="evaluation scenes (default: the training scenes)")
    a.add_argument("--presets", help=f"comma-separated subset of {','.join(PRESETS)}")
    a.add_argument("--out", required=True, help="output directory for logs and tables")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help (0) or a usage error (2)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    out = Outputs()
    try:
        # BLAS stays single-threaded so results never depend on --threads
        with threadpool_limits(limits=1):
            args.func(args, out)
        return EXIT_OK
    except UsageError as exc:
        out.cleanup()
        print(f"adaptgs {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        out.cleanup()
        print(f"adaptgs {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        out.cleanup()
        print(f"adaptgs {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, ValueError) as exc:
        out.cleanup()
        print(f"adaptgs {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BaseException:
        out.cleanup()
        raise


if __name__ == "__main__":
    sys.exit(main())
