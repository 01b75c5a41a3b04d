"""Sectioned key/value configuration with strict keys and canonical re-serialization."""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field

from .cga import CgaConfig
from .igr import IgrConfig


@dataclass
class DataConfig:
    d_near: float = 1.0
    d_far: float = 10.0
    depth_candidates: int = 32
    views_in: int = 2
    sh_degree: int = 1

    def __post_init__(self):
        if not 0 < self.d_near < self.d_far:
            raise ValueError("need 0 < d_near < d_far")
        if self.depth_candidates < 2:
            raise ValueError("depth_candidates must be at least 2")
        if self.views_in < 1:
            raise ValueError("views_in must be at least 1")
        if self.sh_degree not in (0, 1):
            raise ValueError("sh_degree must be 0 or 1")


@dataclass
class EncoderConfig:
    channels: tuple = (32, 64, 128)
    strides: tuple = (2, 2, 1)
    attn_layers: int = 1

    def __post_init__(self):
        if len(self.channels) != len(self.strides) or any(s not in (1, 2) for s in self.strides):
            raise ValueError("encoder channels/strides must pair up and strides be 1 or 2")


@dataclass
class RasterConfig:
    tile_size: int = 16
    background: tuple = (0.0, 0.0, 0.0)
    eps_alpha: float = 1.0 / 255.0
    cull_sigma: float = 3.0
    dilation: float = 0.3
    workers: int = 1

    def __post_init__(self):
        if self.tile_size < 8:
            raise ValueError("tile_size must be at least 8")
        if len(self.background) != 3:
            raise ValueError("background needs three values")

    def settings(self, workers: int | None = None):
        from .rasterizer import RenderSettings
        return RenderSettings(tile_size=self.tile_size, background=tuple(self.background),
                              eps_alpha=self.eps_alpha, cull_sigma=self.cull_sigma,
                              dilation=self.dilation,
                              workers=self.workers if workers is None else workers)


PRESETS = ("vanilla", "rigid", "hyper", "full")


@dataclass
class TrainConfig:
    steps: int = 5000
    lr: float = 2e-4
    weight_decay: float = 1e-4
    lambda_perc: float = 0.05
    grad_accum: int = 1
    seed: int = 0
    preset: str = "full"
    log_every: int = 50
    checkpoint_every: int = 1000
    rigid_tau_low: float = 0.2
    rigid_tau_high: float = 0.8

    def __post_init__(self):
        if self.steps < 1 or self.grad_accum < 1:
            raise ValueError("steps and grad_accum must be positive")
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}")


SECTIONS = {"data": DataConfig, "encoder": EncoderConfig, "cga": CgaConfig, "igr": IgrConfig,
            "rasterizer": RasterConfig, "train": TrainConfig}


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cga: CgaConfig = field(default_factory=CgaConfig)
    igr: IgrConfig = field(default_factory=IgrConfig)
    rasterizer: RasterConfig = field(default_factory=RasterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    # ---------------------------------------------------------------- text form
    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            obj = getattr(self, name)
            for f in dataclasses.fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> "Config":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ValueError(f"config: {exc}") from None
        values = {sec: dict(parser.items(sec)) for sec in parser.sections()}
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict) -> "Config":
        unknown = set(values) - set(SECTIONS)
        if unknown:
            raise ValueError(f"config: unknown section(s) {sorted(unknown)}")
        built = {}
        for name, kind in SECTIONS.items():
            built[name] = _build(kind, values.get(name, {}), name)
        return cls(**built)

    def with_overrides(self, overrides: list[str]) -> "Config":
        """Apply ``section.key=value`` overrides (flags win over file values)."""
        values = {name: {f.name: _format(getattr(getattr(self, name), f.name))
                         for f in dataclasses.fields(getattr(self, name))} for name in SECTIONS}
        for item in overrides:
            key, sep, value = item.partition("=")
            sec, dot, opt = key.strip().partition(".")
            if not sep or not dot:
                raise ValueError(f"override {item!r} must look like section.key=value")
            if sec not in values:
                raise ValueError(f"config: unknown section {sec!r}")
            values[sec][opt] = value.strip()
        return Config.from_dict(values)

    def to_dict(self) -> dict:
        return {name: {f.name: _format(getattr(getattr(self, name), f.name))
                       for f in dataclasses.fields(getattr(self, name))} for name in SECTIONS}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default, annotation: str, where: str):
    text = text.strip()
    try:
        if "tuple" in annotation:
            if text.lower() == "none":
                if "None" in annotation:
                    return None
                raise ValueError("value may not be none")
            items = [t.strip() for t in text.split(",") if t.strip()]
            sample = default[0] if default else 0.0
            conv = int if isinstance(sample, int) and not isinstance(sample, bool) else float
            return tuple(conv(t) for t in items)
        if isinstance(default, bool):
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError("expected a boolean")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ValueError(f"config {where}: cannot parse {text!r} ({exc})") from None


def _build(kind, raw: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(kind)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ValueError(f"config: unknown key(s) in [{section}]: {sorted(unknown)}")
    hints = {k: str(v) for k, v in typing.get_type_hints(kind).items()}
    kwargs = {}
    for key, text in raw.items():
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if default is None and "tuple" in hints[key]:
            default = (0.0,)
        kwargs[key] = _parse(str(text), default, hints[key], f"[{section}] {key}")
    try:
        return kind(**kwargs)
    except ValueError as exc:
        raise ValueError(f"config [{section}]: {exc}") from None


def load_config(path=None, overrides: list[str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = Config.from_ini(fh.read())
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
