"""Evaluation helpers and end-to-end recipes shared by the CLI and tests."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .metrics import MetricReport, mse, psnr, sample_variance, seam_gap, ssim
from .render import LinearRender, MaterialMaps, render, view_cache
from .scenes import SceneBundle
from .solver import SolveResult, SolverConfig, baseline_solve, dps_sample, init_stage


# Solver settings shared by the bundled experiments: strong late guidance,
# roughness/metallic held at their init-stage values, longer init.
EXPERIMENT_RECIPE = dict(rho_low_max=10.0, retained_lr=0.0, init_iterations=1000)


def solver_config_for(bundle: SceneBundle, **overrides) -> SolverConfig:
    base = dict(render=bundle.render, env_shape=bundle.env_shape, material_res=bundle.material_res)
    base.update(overrides)
    return SolverConfig(**base)


def recipe_config_for(bundle: SceneBundle, **overrides) -> SolverConfig:
    """:func:`solver_config_for` with :data:`EXPERIMENT_RECIPE` applied first."""
    return solver_config_for(bundle, **{**EXPERIMENT_RECIPE, **overrides})


def heldout_scores(bundle: SceneBundle, env: np.ndarray, mat: MaterialMaps) -> dict[str, float]:
    """PSNR/SSIM of re-renders against the held-out observations; the peak
    is the brightest observed held-out value."""
    views = bundle.held_out
    if not views:
        return {}
    obs = [bundle.scene.view(i).observation for i in views]
    peak = float(max(o.max() for o in obs))
    ps, ss = [], []
    for i, o in zip(views, obs):
        img = render(bundle.scene, env, mat, i, bundle.render)
        ps.append(psnr(img, o, peak))
        ss.append(ssim(img, o, peak) if min(o.shape[:2]) >= 11 else float("nan"))
    return {"heldout_psnr": float(np.mean(ps)), "heldout_ssim": float(np.mean(ss))}


def texel_coverage(bundle: SceneBundle, K: int, views=None) -> np.ndarray:
    """Material texels touched by the bilinear footprint of any surface
    pixel of ``views``; shape ``(K, K)``."""
    views = bundle.train_views if views is None else views
    cov = np.zeros(K * K, dtype=bool)
    for i in views:
        vc = view_cache(bundle.scene, i, bundle.env_shape, K, bundle.render)
        cov[vc.tex_idx[vc.tex_w > 0]] = True
    return cov.reshape(K, K)


def albedo_mse_observed(bundle: SceneBundle, mat: MaterialMaps) -> float:
    cov = texel_coverage(bundle, mat.K)
    return float(np.mean((mat.albedo[cov] - bundle.gt_mat.albedo[cov]) ** 2))


def texel_influence(bundle: SceneBundle, mat: MaterialMaps | None = None, views=None) -> tuple[np.ndarray, np.ndarray]:
    """Per env texel, total transport weight from unmasked and from masked
    surface pixels, ``(H, W)`` each."""
    mat = bundle.gt_mat if mat is None else mat
    views = bundle.train_views if views is None else views
    H, W = bundle.env_shape
    seen = np.zeros(H * W)
    hidden = np.zeros(H * W)
    for i in views:
        view = bundle.scene.view(i)
        plain = replace(view, mask=None)
        lin = LinearRender(type(bundle.scene)(bundle.scene.mesh, [plain]), mat, [0], (H, W), bundle.render)
        weight = lin.A.sum(axis=0)  # (pixels, texels), channels summed
        vc = view_cache(bundle.scene, i, (H, W), mat.K, bundle.render)
        keep = np.ones(vc.n_pixels, dtype=bool) if view.mask is None else view.mask.reshape(-1)[vc.pix]
        seen += weight[keep].sum(axis=0)
        hidden += weight[~keep].sum(axis=0)
    return seen.reshape(H, W), hidden.reshape(H, W)


def run_diffusion(bundle: SceneBundle, model, cfg: SolverConfig, seeds, init=None) -> tuple[list[SolveResult], object]:
    """Shared init stage, then one guided sample + refinement per seed."""
    views = bundle.train_views
    if init is None:
        init = init_stage(bundle.scene, cfg, views)
    results = [dps_sample(bundle.scene, model, replace(cfg, seed=s), init.mat, views) for s in seeds]
    return results, init


def run_baseline(bundle: SceneBundle, cfg: SolverConfig) -> SolveResult:
    return baseline_solve(bundle.scene, cfg, bundle.train_views)


def report_for(bundle: SceneBundle, results: list[SolveResult]) -> MetricReport:
    rep = MetricReport()
    envs = [r.env for r in results]
    rep["seam"] = float(np.median([seam_gap(e) for e in envs]))
    if len(results) >= 2:
        rep["sigma2_sample"] = sample_variance(envs)
    if bundle.gt_env is not None:
        rep["env_mse"] = float(np.mean([mse(e, bundle.gt_env) for e in envs]))
    if bundle.gt_mat is not None:
        rep["albedo_mse"] = float(np.mean([albedo_mse_observed(bundle, r.mat) for r in results]))
    if bundle.held_out:
        scores = [heldout_scores(bundle, r.env, r.mat) for r in results]
        rep["psnr"] = float(np.mean([s["heldout_psnr"] for s in scores]))
        rep["ssim"] = float(np.mean([s["heldout_ssim"] for s in scores]))
    return rep


def texel_groups(bundle: SceneBundle, purity: float = 0.9, floor: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Split env texels into ``(observed, masked)``: texels whose transport
    weight comes at least ``purity`` from unmasked (resp. masked) pixels,
    ignoring texels below ``floor`` of the strongest total weight."""
    seen, hidden = texel_influence(bundle)
    total = seen + hidden
    strong = total > floor * total.max()
    share = np.where(strong, seen / np.where(strong, total, 1.0), 0.0)
    return strong & (share >= purity), strong & (share <= 1.0 - purity)
