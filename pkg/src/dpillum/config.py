"""Strict JSON run configuration: every key optional, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .priors import TrainConfig
from .render import RenderOptions
from .solver import SolverConfig
from .tonemap import PRESETS, Tonemap

EFFECTIVE_CONFIG = "effective_config.json"


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_mode: str = "tilde_beta"


@dataclass
class TonemapSection:
    preset: str | None = "outdoor"
    scale: float | None = None
    exponent: float | None = None

    def build(self) -> Tonemap:
        if self.scale is not None or self.exponent is not None:
            if self.scale is None or self.exponent is None:
                raise ConfigError("tonemap needs both scale and exponent")
            return Tonemap(self.scale, self.exponent)
        try:
            return Tonemap.preset(self.preset or "outdoor")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class SolverSection:
    rho_high: float = 0.1
    rho_low_max: float = 1.0
    rho_switch_t: int = 500
    init_iterations: int = 400
    refine_iterations: int = 200
    learning_rate: float = 1e-2
    material_lr: float = 1e-2
    material_steps: int = 1
    retained_lr: float | None = None
    prior: str = "diffusion"
    smoothness_weight: float | None = None
    chroma_weight: float | None = None
    target_median: float | None = None
    rotate: bool = True
    score_jacobian: bool = True
    guidance_scale: float = 1.0
    xhat_max: float | None = 3.0
    guidance_clip: float | None = 1.0


@dataclass
class TrainSection:
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 2e-3
    augment: bool = True
    flip_probability: float = 0.5
    max_steps: int | None = None
    channels: int = 32
    blocks: int = 4
    horizontal: str = "circular"
    head: str = "v"


@dataclass
class DataSection:
    count: int = 256
    height: int = 16
    width: int = 32


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str | None = None
    scene: str | None = None
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    tonemap: TonemapSection = field(default_factory=TonemapSection)
    solver: SolverSection = field(default_factory=SolverSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    render: dict | None = None  # RenderOptions overrides on top of the scene's own

    def solver_config(self, seed: int | None = None, render: RenderOptions | None = None,
                      env_shape=None, material_res: int | None = None) -> SolverConfig:
        s = self.solver
        kw = {f.name: getattr(s, f.name) for f in fields(SolverSection)}
        kw.update(asdict(self.schedule))
        kw["tonemap"] = self.tonemap.build()
        kw["seed"] = self.seed if seed is None else seed
        kw["render"] = self.render_options(render)
        if env_shape is not None:
            kw["env_shape"] = tuple(env_shape)
        if material_res is not None:
            kw["material_res"] = material_res
        try:
            return SolverConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def render_options(self, base: RenderOptions | None = None) -> RenderOptions:
        base = base or RenderOptions()
        if not self.render:
            return base
        return dataclasses.replace(base, **self.render)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
                           seed=self.seed, augment=t.augment, flip_probability=t.flip_probability,
                           max_steps=t.max_steps)


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kw = {}
    for k, v in doc.items():
        f = known[k]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kw[k] = _build(sub, v, f"{where}.{k}" if where else k)
        else:
            kw[k] = v
    return cls(**kw)


def parse_config(doc: dict) -> RunConfig:
    cfg = _build(RunConfig, doc, "")
    if cfg.render is not None:
        unknown = sorted(set(cfg.render) - set(RenderOptions.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown key(s) in render: {', '.join(unknown)}")
    try:
        cfg.solver_config()
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc)


def echo_config(cfg: RunConfig, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir) / EFFECTIVE_CONFIG
    with open(out, "w") as fh:
        json.dump(asdict(cfg), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out


__all__ = ["RunConfig", "ConfigError", "load_config", "parse_config", "echo_config", "PRESETS"]
