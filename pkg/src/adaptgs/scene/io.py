"""Scene directories, Gaussian PLY files and grayscale map dumps."""
from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .types import S_MAX, S_MIN, SCALE_UNIT, Camera, GaussianSet, SceneSample, View, sh_coeffs


class DataError(ValueError):
    """Raised for missing or malformed on-disk data."""


# ------------------------------------------------------------------ scenes
def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))


def _write_png(image: np.ndarray, path: Path) -> None:
    arr = (np.clip(np.transpose(image, (1, 2, 0)), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def _load_views(folder: Path) -> list:
    cam_file = folder / "cameras.json"
    if not cam_file.is_file():
        raise DataError(f"missing {cam_file}")
    try:
        doc = json.loads(cam_file.read_text())
        entries = doc["views"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"ill-formed {cam_file}: {exc}") from None
    if not isinstance(entries, list) or not entries:
        raise DataError(f"{cam_file} lists no views")
    views = []
    for i, entry in enumerate(entries):
        try:
            cam = Camera.from_dict(entry)
        except (ValueError, TypeError) as exc:
            raise DataError(f"{cam_file} view {i}: {exc}") from None
        img_path = folder / f"view_{i:03d}.png"
        if not img_path.is_file():
            raise DataError(f"missing {img_path}")
        image = _read_png(img_path)
        if image.shape[1:] != (cam.height, cam.width):
            raise DataError(f"{img_path} is {image.shape[2]}x{image.shape[1]}, camera says "
                            f"{cam.width}x{cam.height}")
        views.append(View(image, cam))
    return views


def load_scene(path) -> SceneSample:
    """Read a scene directory: cameras.json + view_XXX.png, targets under targets/."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"scene directory {root} does not exist")
    inputs = _load_views(root)
    if not (root / "targets").is_dir():
        raise DataError(f"scene {root} has no targets/ directory")
    targets = _load_views(root / "targets")
    try:
        return SceneSample(inputs, targets, root.name)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _save_views(views: list, folder: Path) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    doc = {"views": [v.camera.to_dict() for v in views]}
    (folder / "cameras.json").write_text(json.dumps(doc, indent=1))
    for i, v in enumerate(views):
        _write_png(v.image, folder / f"view_{i:03d}.png")


def save_scene(sample: SceneSample, path) -> None:
    root = Path(path)
    _save_views(sample.inputs, root)
    _save_views(sample.targets, root / "targets")


def list_scenes(path) -> list[Path]:
    """Scene directories below ``path`` (or ``path`` itself when it is a scene)."""
    root = Path(path)
    if (root / "cameras.json").is_file():
        return [root]
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    found = sorted(p for p in root.iterdir() if (p / "cameras.json").is_file())
    if not found:
        raise DataError(f"no scenes found under {root}")
    return found


# ------------------------------------------------------------------ PLY
_LOGIT_EPS = 1e-7


def _ply_names(k: int) -> list[str]:
    rest = 3 * (k - 1)
    return (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
            + [f"f_rest_{i}" for i in range(rest)]
            + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])


def export_ply(g: GaussianSet, path) -> None:
    """Binary little-endian PLY in the common splatting layout (opacity as logit, scale as log)."""
    n, k = len(g), g.sh.shape[2]
    names = _ply_names(k)
    sh = g.sh.data
    a = np.clip(g.alpha.data, _LOGIT_EPS, 1.0 - _LOGIT_EPS)
    cols = np.concatenate([
        g.mu.data, np.zeros((n, 3)), sh[:, :, 0],
        sh[:, :, 1:].reshape(n, 3 * (k - 1)),  # channel-major rest coefficients
        (np.log(a) - np.log1p(-a))[:, None],
        np.log(g.s.data * SCALE_UNIT), g.r.data,
    ], axis=1)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header += ["end_header"]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(cols, dtype="<f4").tobytes())
    os.replace(tmp, path)


def import_ply(path) -> GaussianSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if end < 0:
        raise DataError(f"{path}: PLY header has no end_header")
    lines = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[end + len(b"end_header\n"):]
    if not lines or lines[0] != "ply" or lines[1:2] != ["format binary_little_endian 1.0"]:
        raise DataError(f"{path}: expected a binary little-endian PLY")
    count, props = None, []
    for line in lines[2:]:
        if m := re.fullmatch(r"element vertex (\d+)", line):
            count = int(m.group(1))
        elif m := re.fullmatch(r"property float (\w+)", line):
            props.append(m.group(1))
        elif line.startswith("comment"):
            continue
        else:
            raise DataError(f"{path}: unsupported header line {line!r}")
    if count is None:
        raise DataError(f"{path}: missing vertex element")
    n_rest = sum(p.startswith("f_rest_") for p in props)
    k = n_rest // 3 + 1
    if n_rest % 3 or sh_coeffs(int(round(np.sqrt(k))) - 1) != k or props != _ply_names(k):
        raise DataError(f"{path}: property order does not match the Gaussian layout")
    width = len(props)
    if len(body) != 4 * width * count:
        raise DataError(f"{path}: expected {count} vertices, data block has {len(body)} bytes")
    cols = np.frombuffer(body, dtype="<f4").reshape(count, width).astype(np.float64)
    sh = np.empty((count, 3, k))
    sh[:, :, 0] = cols[:, 6:9]
    sh[:, :, 1:] = cols[:, 9:9 + n_rest].reshape(count, 3, k - 1)
    o = 9 + n_rest
    alpha = 1.0 / (1.0 + np.exp(-cols[:, o]))
    s = np.clip(np.exp(cols[:, o + 1:o + 4]) / SCALE_UNIT, S_MIN, S_MAX)
    r = cols[:, o + 4:o + 8]
    norm = np.linalg.norm(r, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise DataError(f"{path}: zero quaternion")
    return GaussianSet(cols[:, 0:3], s, r / norm, alpha, sh)


# ------------------------------------------------------------------ maps
def map_to_uint8(m: np.ndarray) -> np.ndarray:
    """Min-max normalize to 0..255; a constant map becomes mid-gray (128)."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("map contains non-finite values")
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_map_png(m: np.ndarray, path) -> None:
    Image.fromarray(map_to_uint8(m), "L").save(path)


def write_image_png(image: np.ndarray, path) -> None:
    """Write a (3, H, W) image in [0, 1] as 8-bit RGB."""
    _write_png(np.asarray(image), Path(path))
