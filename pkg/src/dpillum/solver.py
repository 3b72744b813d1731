"""Joint illumination/material reconstruction.

Three stages: a free joint fit used for initialization, diffusion-guided
sampling of the environment with interleaved material updates, and a
materials-only refinement under the final environment. Prior-free
baselines share the same joint fit with an optional regularizer.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import rng_stream, save_pfm
from .diffusion import (
    NoiseSchedule,
    eps_from_score,
    make_schedule,
    posterior_x0,
    reverse_step,
    score_from_eps,
)
from .geometry import Scene
from .optim import Adam
from .priors import rotated_eps, rotated_eps_with_vjp
from .render import MaterialMaps, RenderOptions, global_median_normalize, render_loss_and_grads
from .tonemap import PRESETS, Tonemap

PRIOR_MODES = ("none", "global_norm", "smoothness", "chromaticity", "diffusion")


class SolverError(FloatingPointError):
    def __init__(self, message: str, stage: str, step: int, trace=None):
        super().__init__(f"{message} (stage {stage}, step {step})")
        self.stage = stage
        self.step = step
        self.trace = trace or []


@dataclass(frozen=True)
class SolverConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_mode: str = "tilde_beta"
    rho_high: float = 0.1
    rho_low_max: float = 1.0
    rho_switch_t: int = 500
    init_iterations: int = 400
    refine_iterations: int = 200
    learning_rate: float = 1e-2  # init stage (env and materials) and baselines
    material_lr: float = 1e-2
    material_steps: int = 1
    retained_lr: float | None = None  # diffusion-stage lr for roughness/metallic; None: material_lr
    prior: str = "diffusion"
    smoothness_weight: float | None = None  # None: balance against the initial render loss
    chroma_weight: float | None = None
    target_median: float | None = None  # global_norm target
    seed: int = 0
    tonemap: Tonemap = PRESETS["outdoor"]
    rotate: bool = True
    score_jacobian: bool = True  # backpropagate guidance through the noise predictor
    guidance_scale: float = 1.0  # multiplies rho(t) in the guided score
    xhat_max: float | None = 3.0  # upper clamp on the clean estimate before rendering
    guidance_clip: float | None = 1.0  # RMS cap on the guided shift, in units of sqrt(beta_t)
    env_shape: tuple[int, int] = (16, 32)
    material_res: int = 32
    render: RenderOptions = field(default_factory=RenderOptions)

    def __post_init__(self):
        if self.rho_high > self.rho_low_max:
            raise ValueError("rho_high must not exceed rho_low_max")
        if self.rho_high < 0:
            raise ValueError("rho must be non-negative")
        if self.init_iterations < 1 or self.refine_iterations < 0 or self.material_steps < 0:
            raise ValueError("iteration counts must be positive")
        if not 1 <= self.rho_switch_t:
            raise ValueError("rho_switch_t must be >= 1")
        if self.learning_rate <= 0 or self.material_lr <= 0 or (self.retained_lr is not None and self.retained_lr < 0):
            raise ValueError("learning rates must be positive")
        if self.prior not in PRIOR_MODES:
            raise ValueError(f"unknown prior mode {self.prior!r}; expected one of {PRIOR_MODES}")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


def rho_schedule(cfg: SolverConfig, t: int) -> float:
    """Guidance weight: flat ``rho_high`` above the switch step, then a
    linear ramp reaching ``rho_low_max`` as ``t`` goes to 0."""
    if t < 1 or t > cfg.T:
        raise ValueError(f"t={t} outside [1, {cfg.T}]")
    if t > cfg.rho_switch_t:
        return cfg.rho_high
    return cfg.rho_high + (cfg.rho_low_max - cfg.rho_high) * (cfg.rho_switch_t - t) / cfg.rho_switch_t


@dataclass
class TraceRow:
    step: int
    stage: str
    loss: float
    rho: float | None = None


@dataclass
class InitResult:
    env: np.ndarray
    mat: MaterialMaps
    trace: list[TraceRow]
    learning_rate: float
    fitted_albedo: np.ndarray  # albedo before the reset


@dataclass
class SolveResult:
    env: np.ndarray
    mat: MaterialMaps
    trace: list[TraceRow]
    seed: int
    prior: str

    def rho_trace(self) -> list[tuple[int, float]]:
        return [(r.step, r.rho) for r in self.trace if r.stage == "diffusion"]

    def stage_trace(self, stage: str) -> list[TraceRow]:
        return [r for r in self.trace if r.stage == stage]

    def save(self, out_dir: str | os.PathLike, prefix: str = "") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_pfm(out / f"{prefix}env.pfm", self.env)
        save_pfm(out / f"{prefix}albedo.pfm", self.mat.albedo)
        save_pfm(out / f"{prefix}roughness.pfm", self.mat.roughness[..., None])
        save_pfm(out / f"{prefix}metallic.pfm", self.mat.metallic[..., None])
        write_trace(out / f"{prefix}trace.csv", self.trace)


def write_trace(path, rows: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "stage", "loss", "rho"])
        for r in rows:
            w.writerow([r.step, r.stage, repr(r.loss), "" if r.rho is None else repr(r.rho)])


def observed_views(scene: Scene, views=None) -> list[int]:
    if views is not None:
        return list(views)
    return [i for i, v in enumerate(scene.views) if v.observation is not None]


# -- regularizers -------------------------------------------------------------

def total_variation(env: np.ndarray) -> tuple[float, np.ndarray]:
    """Anisotropic L1 TV, wrapping in azimuth; returns value and gradient."""
    dx = np.roll(env, -1, axis=1) - env
    dy = env[1:] - env[:-1]
    sx, sy = np.sign(dx), np.sign(dy)
    g = np.roll(sx, 1, axis=1) - sx
    g[1:] += sy
    g[:-1] -= sy
    return float(np.abs(dx).sum() + np.abs(dy).sum()), g


def chromaticity(env: np.ndarray) -> tuple[float, np.ndarray]:
    """L1 deviation of each channel from the texel's gray level."""
    d = env - env.mean(axis=2, keepdims=True)
    s = np.sign(d)
    return float(np.abs(d).sum()), s - s.mean(axis=2, keepdims=True)


# -- stages -------------------------------------------------------------------

def _initial_env(scene: Scene, views: list[int], cfg: SolverConfig) -> np.ndarray:
    obs = [scene.view(i).observation for i in views]
    level = float(np.mean([o[o.sum(axis=2) > 0].mean() if (o.sum(axis=2) > 0).any() else 0.0 for o in obs]))
    level = 2.0 * max(level, 1e-3)  # constant env seen by a gray 0.5 Lambertian surface
    rng = rng_stream(cfg.seed, "init/env")
    return level * (0.75 + 0.5 * rng.random((*cfg.env_shape, 3)))


def default_materials(K: int) -> MaterialMaps:
    return MaterialMaps.constant(K, (0.5, 0.5, 0.5), 0.5, 0.0)


def _check(loss: float, stage: str, step: int, trace) -> None:
    if not np.isfinite(loss):
        raise SolverError("non-finite loss", stage, step, trace)


def joint_fit(scene: Scene, cfg: SolverConfig, views=None, *, stage: str = "init",
              regularizer=None, env0=None, mat0=None, trace=None):
    """Adam on env (HDR, clamped >= 0) and materials; returns (env, mat, trace)."""
    views = observed_views(scene, views)
    env = _initial_env(scene, views, cfg) if env0 is None else np.array(env0, dtype=np.float64)
    mat = default_materials(cfg.material_res) if mat0 is None else mat0.copy()
    trace = [] if trace is None else trace
    opt = Adam(lr=cfg.learning_rate)
    weight = None
    for it in range(cfg.init_iterations):
        rg = render_loss_and_grads(scene, env, mat, views, cfg.render)
        loss, g_env = rg.loss, rg.env
        if regularizer is not None:
            rv, rgrad = regularizer(env)
            if weight is None:
                weight = regularizer.weight if regularizer.weight is not None else (
                    rg.loss / rv if rv > 0 else 0.0)
            loss += weight * rv
            g_env = g_env + weight * rgrad
        _check(loss, stage, it, trace)
        trace.append(TraceRow(it, stage, loss))
        params = {"env": env, **mat.arrays()}
        opt.step(params, {"env": g_env, **rg.material_grads()})
        np.maximum(env, 0.0, out=env)
        mat.clamp()
    return env, mat, trace


class _Reg:
    def __init__(self, fn, weight):
        self.fn = fn
        self.weight = weight

    def __call__(self, env):
        return self.fn(env)


def init_stage(scene: Scene, cfg: SolverConfig, views=None, *, mat0: MaterialMaps | None = None) -> InitResult:
    env, mat, trace = joint_fit(scene, cfg, views, mat0=mat0)
    fitted = mat.albedo.copy()
    mat.albedo[...] = 0.0
    return InitResult(env, mat, trace, cfg.learning_rate, fitted)


def refine_stage(scene: Scene, env_final: np.ndarray, mat: MaterialMaps, cfg: SolverConfig,
                 views=None, trace: list | None = None) -> MaterialMaps:
    """Materials-only Adam under a fixed environment."""
    views = observed_views(scene, views)
    mat = mat.copy()
    opt = Adam(lr=cfg.material_lr)
    for it in range(cfg.refine_iterations):
        rg = render_loss_and_grads(scene, env_final, mat, views, cfg.render, want_env=False)
        _check(rg.loss, "refine", it, trace)
        if trace is not None:
            trace.append(TraceRow(it, "refine", rg.loss))
        opt.step(mat.arrays(), rg.material_grads())
        mat.clamp()
    return mat


def dps_sample(scene: Scene | None, model, cfg: SolverConfig, mat_init: MaterialMaps | None,
               views=None, *, refine: bool = True, callback=None) -> SolveResult:
    """Guided reverse diffusion in the tonemapped domain.

    With ``scene=None`` (or rho 0 everywhere) this is plain ancestral
    sampling: random draws happen in the same order as
    :func:`dpillum.diffusion.ancestral_sample`. ``callback(t, x_t, env, mat)``
    is invoked after every guided step.
    """
    s = cfg.schedule()
    shape = tuple(model.shape)
    if scene is not None and shape != (*cfg.env_shape, 3):
        raise ValueError(f"model shape {shape} does not match env shape {cfg.env_shape}")
    tm = cfg.tonemap
    views = observed_views(scene, views) if scene is not None else []
    mat = mat_init.copy() if mat_init is not None else None
    keep = 1.0 if cfg.retained_lr is None else cfg.retained_lr / cfg.material_lr
    opt = Adam(lr=cfg.material_lr, lr_scale={"roughness": keep, "metallic": keep})
    trace: list[TraceRow] = []
    rng = rng_stream(cfg.seed, "dps")
    width = shape[1]

    x = rng.standard_normal(shape)
    for t in range(s.T, 0, -1):
        shift = int(rng.integers(width)) if cfg.rotate else 0
        rho = rho_schedule(cfg, t)
        ab = s.alpha_bar(t)
        vjp = None
        if scene is not None and rho > 0.0 and cfg.score_jacobian and hasattr(model, "eps_with_vjp"):
            eps, vjp = rotated_eps_with_vjp(model, x, t, shift)
        else:
            eps = rotated_eps(model, x, t, shift)
        z = rng.standard_normal(shape) if t > 1 else np.zeros(shape)
        if not np.isfinite(eps).all():
            raise SolverError("non-finite noise prediction", "diffusion", t, trace)
        if scene is not None and ab > 0.0 and (rho > 0.0 or cfg.material_steps > 0):
            score = score_from_eps(eps, ab)
            xhat = posterior_x0(s, x, score, t)
            inside = xhat > 0.0
            if cfg.xhat_max is not None:
                inside &= xhat < cfg.xhat_max
                env = tm.inverse(np.minimum(xhat, cfg.xhat_max))
            else:
                env = tm.inverse(xhat)
            rg = render_loss_and_grads(scene, env, mat, views, cfg.render,
                                       want_env=rho > 0.0, want_material=cfg.material_steps > 0)
            _check(rg.loss, "diffusion", t, trace)
            trace.append(TraceRow(t, "diffusion", rg.loss, rho))
            if rho > 0.0:
                u = np.where(inside, rg.env * tm.inverse_derivative(xhat), 0.0)  # dL/dxhat
                if vjp is not None:
                    u = u - np.sqrt(1.0 - ab) * vjp(u)
                guide = cfg.guidance_scale * rho * u / np.sqrt(ab)
                if cfg.guidance_clip is not None:
                    # cap the shift this term adds to x_{t-1} at guidance_clip * sqrt(beta_t) (RMS)
                    beta = s.beta(t)
                    shift_rms = beta / np.sqrt(1.0 - beta) * np.sqrt(np.mean(guide * guide))
                    cap = cfg.guidance_clip * np.sqrt(beta)
                    if shift_rms > cap:
                        guide *= cap / shift_rms
                eps = eps_from_score(score - guide, ab)
            for k in range(cfg.material_steps):
                if k > 0:
                    rg = render_loss_and_grads(scene, env, mat, views, cfg.render, want_env=False)
                opt.step(mat.arrays(), rg.material_grads())
                mat.clamp()
            if callback is not None:
                callback(t, x, env, mat)
        x = reverse_step(s, x, eps, t, z, cfg.sigma_mode)
        if not np.isfinite(x).all():
            raise SolverError("non-finite sample", "diffusion", t, trace)

    env = tm.inverse(x)
    if scene is not None and refine:
        mat = refine_stage(scene, env, mat, cfg, views, trace)
    return SolveResult(env, mat, trace, cfg.seed, "diffusion")


def baseline_solve(scene: Scene, cfg: SolverConfig, views=None) -> SolveResult:
    if cfg.prior == "diffusion":
        raise ValueError("baseline_solve needs a non-diffusion prior mode")
    reg = None
    if cfg.prior == "smoothness":
        reg = _Reg(total_variation, cfg.smoothness_weight)
    elif cfg.prior == "chromaticity":
        reg = _Reg(chromaticity, cfg.chroma_weight)
    env, mat, trace = joint_fit(scene, cfg, views, stage=cfg.prior, regularizer=reg)
    if cfg.prior == "global_norm":
        if cfg.target_median is None:
            raise ValueError("global_norm needs target_median")
        env = global_median_normalize(env, cfg.target_median)
    return SolveResult(env, mat, trace, cfg.seed, cfg.prior)


def solve(scene: Scene, model, cfg: SolverConfig, views=None, init: InitResult | None = None) -> SolveResult:
    """Full protocol for one seed; ``init`` may be shared between seeds."""
    if cfg.prior != "diffusion":
        return baseline_solve(scene, cfg, views)
    if init is None:
        init = init_stage(scene, cfg, views)
    res = dps_sample(scene, model, cfg, init.mat, views)
    res.trace = list(init.trace) + res.trace
    return res


def with_seed(cfg: SolverConfig, seed: int) -> SolverConfig:
    return replace(cfg, seed=seed)
