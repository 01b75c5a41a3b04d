"""Core scene value types: cameras, Gaussian sets, and multi-view samples."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import Tensor, concat, take_rows

# World-space standard deviation of a Gaussian is ``s * SCALE_UNIT``. The
# permitted scale range [0.50, 15.00] is expressed in these units.
SCALE_UNIT = 0.01
S_MIN, S_MAX = 0.50, 15.00

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera; ``world_to_cam`` is a 4x4 rigid transform (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray = field(default_factory=lambda: np.eye(4))
    check: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        m = np.array(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "world_to_cam", m)
        if not self.check:
            return
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"camera focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if self.width < 16 or self.height < 16:
            raise ValueError(f"camera resolution {self.width}x{self.height} below 16 pixels")
        R = m[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("camera rotation is not orthonormal with determinant +1")
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise ValueError("camera transform last row must be (0, 0, 0, 1)")

    def _key(self) -> tuple:
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                self.world_to_cam.tobytes())

    def __eq__(self, other) -> bool:
        return isinstance(other, Camera) and self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())

    @property
    def R(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def scaled(self, stride: int) -> "Camera":
        """The same camera seen on a grid downsampled by ``stride`` (pixel centers kept consistent)."""
        off = (stride - 1) / 2.0
        return Camera(self.fx / stride, self.fy / stride, (self.cx - off) / stride,
                      (self.cy - off) / stride, self.width // stride, self.height // stride,
                      self.world_to_cam, check=False)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "world_to_cam": [float(v) for v in self.world_to_cam.reshape(-1)]}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            m = np.asarray(d["world_to_cam"], dtype=np.float64)
            if m.size != 16:
                raise ValueError("world_to_cam must hold 16 values")
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["width"]), int(d["height"]), m.reshape(4, 4))
        except KeyError as exc:
            raise ValueError(f"camera entry missing field {exc}") from None


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target`` (y down in image)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    m = np.eye(4)
    m[:3, :3] = R
    m[:3, 3] = -R @ eye
    return m


@dataclass
class View:
    image: np.ndarray  # (3, H, W) in [0, 1]
    camera: Camera


@dataclass
class SceneSample:
    inputs: list
    targets: list
    scene_id: str = ""
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.inputs:
            raise ValueError("a scene needs at least one input view")
        if not self.targets:
            raise ValueError("a scene needs at least one target view")
        shapes = {v.image.shape for v in self.inputs + self.targets}
        if len(shapes) != 1:
            raise ValueError(f"all views must share a resolution, got {sorted(shapes)}")
        (shape,) = shapes
        if len(shape) != 3 or shape[0] != 3:
            raise ValueError(f"images must be (3, H, W), got {shape}")

    @property
    def resolution(self) -> tuple:
        return self.inputs[0].image.shape[1:]

    def with_inputs(self, idx) -> "SceneSample":
        return SceneSample([self.inputs[i] for i in idx], self.targets, self.scene_id, self.meta)


def sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


class GaussianSet:
    """Structure-of-arrays Gaussian collection.

    ``mu`` (N, 3) world position, ``s`` (N, 3) scale in ``SCALE_UNIT`` units,
    ``r`` (N, 4) unit quaternion (w first), ``alpha`` (N,) opacity and ``sh``
    (N, 3, K) spherical-harmonic coefficients per colour channel. Fields are
    tensors so a set can sit in the middle of a differentiable computation.
    """

    def __init__(self, mu, s, r, alpha, sh, query: Tensor | None = None):
        self.mu = _t(mu)
        self.s = _t(s)
        self.r = _t(r)
        self.alpha = _t(alpha)
        self.sh = _t(sh)
        self.query = query
        n = self.mu.shape[0]
        shapes = {"mu": (n, 3), "s": (n, 3), "r": (n, 4), "alpha": (n,)}
        for key, shape in shapes.items():
            if getattr(self, key).shape != shape:
                raise ValueError(f"GaussianSet.{key} has shape {getattr(self, key).shape}, expected {shape}")
        if self.sh.ndim != 3 or self.sh.shape[:2] != (n, 3):
            raise ValueError(f"GaussianSet.sh has shape {self.sh.shape}, expected ({n}, 3, K)")
        if query is not None and query.shape[0] != n:
            raise ValueError("query rows must match the Gaussian count")

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def count(self) -> int:
        return len(self)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[2]))) - 1

    @property
    def n_sh(self) -> int:
        return 3 * self.sh.shape[2]

    @classmethod
    def empty(cls, degree: int = 1) -> "GaussianSet":
        k = sh_coeffs(degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3, k)))

    def detach(self) -> "GaussianSet":
        return GaussianSet(self.mu.data.copy(), self.s.data.copy(), self.r.data.copy(),
                           self.alpha.data.copy(), self.sh.data.copy())

    def select(self, idx) -> "GaussianSet":
        idx = np.asarray(idx, dtype=np.int64)
        q = take_rows(self.query, idx) if self.query is not None else None
        return GaussianSet(take_rows(self.mu, idx), take_rows(self.s, idx), take_rows(self.r, idx),
                           take_rows(self.alpha, idx), take_rows(self.sh, idx), q)

    @staticmethod
    def cat(sets: list["GaussianSet"]) -> "GaussianSet":
        return GaussianSet(concat([g.mu for g in sets]), concat([g.s for g in sets]),
                           concat([g.r for g in sets]), concat([g.alpha for g in sets]),
                           concat([g.sh for g in sets]))

    def param_matrix(self) -> Tensor:
        """(N, 11 + C) feature rows: mu, log s, r, logit alpha, sh (channel-major)."""
        from ..tensor import clip, log
        a = clip(self.alpha, 1e-4, 1 - 1e-4)
        return concat([self.mu, log(self.s), self.r,
                       (log(a) - log(1.0 - a)).reshape(-1, 1),
                       self.sh.reshape(len(self), self.n_sh)], axis=1)

    def violations(self, tol: float = 1e-9) -> dict:
        """Count invariant violations per field (all zero for a valid set)."""
        s, r, a, sh = self.s.data, self.r.data, self.alpha.data, self.sh.data
        out = {
            "scale_range": int(np.sum(np.any((s < S_MIN) | (s > S_MAX), axis=1))),
            "rot_norm": int(np.sum(np.abs(np.linalg.norm(r, axis=1) - 1.0) > tol)),
            "opacity_range": int(np.sum((a < 0) | (a > 1))),
            "sh_decay": int(np.sum(np.any(np.abs(sh[:, :, 1:]) > np.abs(sh[:, :, :1]) + 1e-12, axis=(1, 2)))),
            "non_finite": int(np.sum(~np.all(np.isfinite(np.concatenate(
                [self.mu.data, s, r, a[:, None], sh.reshape(len(self), self.n_sh)], axis=1)), axis=1))),
        }
        return out

    def validate(self) -> None:
        bad = {k: v for k, v in self.violations().items() if v}
        if bad:
            raise ValueError(f"GaussianSet invariant violations: {bad}")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
